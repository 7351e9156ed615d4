"""Deterministic dense-tensor kernels with hand-derived vector-Jacobian products.

All kernels are pure functions over numpy arrays in float32 or float64.
There are no fused or reordered fast paths: ``matmul`` accumulates rank-1
updates in ascending inner-index order, so its output is bit-identical to
a naive triple loop at the same precision, run after run.  Everything else
is built from elementwise numpy ops whose evaluation order is fixed.
"""

from typing import NamedTuple, Optional, Sequence

import numpy as np

SUPPORTED_DTYPES = (np.float32, np.float64)

DEFAULT_LN_EPS = 1e-5


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


def check_tensor(x: np.ndarray, name: str = "tensor") -> np.ndarray:
    """Validate the dense-tensor contract: rank 1-3, f32/f64, finite."""
    x = np.asarray(x)
    if x.ndim < 1 or x.ndim > 3:
        raise ShapeError(f"{name}: rank must be 1-3, got shape {x.shape}")
    if x.dtype not in SUPPORTED_DTYPES:
        raise TypeError(f"{name}: dtype must be float32/float64, got {x.dtype}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name}: contains non-finite values")
    return x


def _common_dtype(*arrays) -> np.dtype:
    dtypes = {np.asarray(a).dtype for a in arrays}
    if len(dtypes) != 1:
        raise TypeError(f"mixed precisions {sorted(str(d) for d in dtypes)}; "
                        "cast operands to a common dtype first")
    (dt,) = dtypes
    if dt not in SUPPORTED_DTYPES:
        raise TypeError(f"unsupported dtype {dt}")
    return dt


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with pinned accumulation order.

    out[i, j] is accumulated as sum_k a[i, k] * b[k, j] with k ascending,
    one rank-1 update per step, starting from zero.  Bit-identical to the
    naive triple loop at the same precision.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    dt = _common_dtype(a, b)
    out = np.zeros((a.shape[0], b.shape[1]), dtype=dt)
    for k in range(a.shape[1]):
        out += a[:, k, None] * b[None, k, :]
    return out


def softmax_rows(m: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """Row-wise softmax of m / scale, stabilized by row-max subtraction."""
    if not scale > 0:
        raise ValueError(f"softmax_rows: scale must be positive, got {scale}")
    m = np.asarray(m)
    if m.ndim != 2:
        raise ShapeError(f"softmax_rows: expected a matrix, got shape {m.shape}")
    u = (m - m.max(axis=1, keepdims=True)) / m.dtype.type(scale)
    e = np.exp(u)
    return e / e.sum(axis=1, keepdims=True)


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
               eps: float = DEFAULT_LN_EPS) -> np.ndarray:
    """Per-row normalization to zero mean / unit variance, then affine.

    Variance is biased (divisor = row width).  eps defaults to 1e-5.
    """
    if not eps > 0:
        raise ValueError(f"layer_norm: eps must be positive, got {eps}")
    x = np.asarray(x)
    gamma = np.asarray(gamma)
    beta = np.asarray(beta)
    if x.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"layer_norm: x {x.shape} with gamma {gamma.shape}, "
                         f"beta {beta.shape}")
    dt = _common_dtype(x, gamma, beta)
    mu = x.mean(axis=1, keepdims=True)
    var = np.square(x - mu).mean(axis=1, keepdims=True)
    xhat = (x - mu) / np.sqrt(var + dt.type(eps))
    return xhat * gamma + beta


def linear(x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray] = None) -> np.ndarray:
    """x @ w plus an optional broadcast bias row."""
    out = matmul(x, w)
    if b is not None:
        b = np.asarray(b)
        if b.shape != (out.shape[1],):
            raise ShapeError(f"linear: bias {b.shape} does not match "
                             f"output width {out.shape[1]}")
        out = out + b
    return out


def relu(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    return np.maximum(x, x.dtype.type(0))


def ffn(x: np.ndarray, w1: np.ndarray, b1: Optional[np.ndarray],
        w2: np.ndarray, b2: Optional[np.ndarray]) -> np.ndarray:
    """Two-layer feed-forward block: linear, ReLU, linear."""
    return linear(relu(linear(x, w1, b1)), w2, b2)


class PositionalEncoding(NamedTuple):
    """Sine/cosine spatial position table for an H x W grid, C channels."""
    height: int
    width: int
    table: np.ndarray  # (H*W) x C, row-major over the grid

    @property
    def channels(self) -> int:
        return self.table.shape[1]


def sinusoidal_pe(h: int, w: int, c: int, dtype=np.float64) -> PositionalEncoding:
    """Build the spatial position encoding for an h x w grid.

    Convention (pinned by the spot-value test): channels are split in half,
    the first half encoding the row coordinate and the second the column.
    Within each half, pair i of (sin, cos) channels oscillates at
    omega_i = 10000 ** (-i / (c/4)), i = 0 .. c/4 - 1, evaluated at the
    integer grid coordinate:

        table[r*w + x, 2i]           = sin(r * omega_i)
        table[r*w + x, 2i + 1]       = cos(r * omega_i)
        table[r*w + x, c/2 + 2i]     = sin(x * omega_i)
        table[r*w + x, c/2 + 2i + 1] = cos(x * omega_i)
    """
    if c % 4 != 0:
        raise ShapeError(f"sinusoidal_pe: channels must be divisible by 4, got {c}")
    if h < 1 or w < 1:
        raise ShapeError(f"sinusoidal_pe: grid extents must be positive, got {h}x{w}")
    quarter = c // 4
    omega = 10000.0 ** (-np.arange(quarter, dtype=np.float64) / quarter)
    rows = np.repeat(np.arange(h, dtype=np.float64), w)
    cols = np.tile(np.arange(w, dtype=np.float64), h)
    table = np.empty((h * w, c), dtype=np.float64)
    for axis_offset, coord in ((0, rows), (c // 2, cols)):
        angles = coord[:, None] * omega[None, :]
        table[:, axis_offset + 0:axis_offset + 2 * quarter:2] = np.sin(angles)
        table[:, axis_offset + 1:axis_offset + 2 * quarter:2] = np.cos(angles)
    return PositionalEncoding(h, w, table.astype(dtype))


# ---------------------------------------------------------------------------
# Vector-Jacobian products
# ---------------------------------------------------------------------------

def matmul_vjp(a: np.ndarray, b: np.ndarray, g: np.ndarray):
    """Cotangents of matmul: (g @ b^T, a^T @ g)."""
    return matmul(g, np.ascontiguousarray(b.T)), matmul(np.ascontiguousarray(a.T), g)


def softmax_rows_vjp(m: np.ndarray, scale: float, g: np.ndarray) -> np.ndarray:
    y = softmax_rows(m, scale)
    gu = y * (g - (g * y).sum(axis=1, keepdims=True))
    return gu / y.dtype.type(scale)


def layer_norm_vjp(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                   eps: float, g: np.ndarray):
    x = np.asarray(x)
    dt = x.dtype
    mu = x.mean(axis=1, keepdims=True)
    var = np.square(x - mu).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + dt.type(eps))
    xhat = (x - mu) * inv
    ghat = g * gamma
    gx = inv * (ghat - ghat.mean(axis=1, keepdims=True)
                - xhat * (ghat * xhat).mean(axis=1, keepdims=True))
    ggamma = (g * xhat).sum(axis=0)
    gbeta = g.sum(axis=0)
    return gx.astype(dt, copy=False), ggamma, gbeta


def linear_vjp(x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray], g: np.ndarray):
    gx, gw = matmul_vjp(x, w, g)
    if b is None:
        return gx, gw
    return gx, gw, g.sum(axis=0)


def relu_vjp(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    return g * (x > 0)


def ffn_vjp(x: np.ndarray, w1: np.ndarray, b1: Optional[np.ndarray],
            w2: np.ndarray, b2: Optional[np.ndarray], g: np.ndarray):
    h = linear(x, w1, b1)
    a = relu(h)
    back2 = linear_vjp(a, w2, b2, g)
    gh = relu_vjp(h, back2[0])
    back1 = linear_vjp(x, w1, b1, gh)
    grads = [back1[0], back1[1]]
    grads.append(back1[2] if b1 is not None else None)
    grads.append(back2[1])
    grads.append(back2[2] if b2 is not None else None)
    return tuple(grads)


def vjp(op_id: str, inputs: Sequence, cotangent: np.ndarray):
    """Dispatch the VJP for one of the exported kernels.

    Returns one cotangent per differentiable tensor input, in input order
    (None for absent optional biases).  Scalar parameters (softmax scale,
    layer-norm eps) are not differentiated.
    """
    g = np.asarray(cotangent)
    if op_id == "matmul":
        a, b = inputs
        return matmul_vjp(np.asarray(a), np.asarray(b), g)
    if op_id == "softmax_rows":
        m, scale = inputs
        return (softmax_rows_vjp(np.asarray(m), scale, g),)
    if op_id == "layer_norm":
        x, gamma, beta = (np.asarray(t) for t in inputs[:3])
        eps = inputs[3] if len(inputs) > 3 else DEFAULT_LN_EPS
        return layer_norm_vjp(x, gamma, beta, eps, g)
    if op_id == "linear":
        x, w = np.asarray(inputs[0]), np.asarray(inputs[1])
        b = inputs[2] if len(inputs) > 2 else None
        return linear_vjp(x, w, None if b is None else np.asarray(b), g)
    if op_id == "ffn":
        x, w1, b1, w2, b2 = inputs
        return ffn_vjp(np.asarray(x), np.asarray(w1),
                       None if b1 is None else np.asarray(b1),
                       np.asarray(w2),
                       None if b2 is None else np.asarray(b2), g)
    raise KeyError(f"vjp: unknown op id {op_id!r}")
