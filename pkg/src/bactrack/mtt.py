"""Mixed-temporal transformer: per-template encoder and MTA decoder.

One shared encoder block turns every template feature map into a token
sequence; the decoder self-attends the search feature, cross-attends it
over the whole encoded collection with grouped mixed-temporal attention,
and emits the fused search representation consumed by the prediction
heads.

Untrained runs use a deterministic seeded initialization in which the
query and key projections are tied, so attention scores reduce to a
random-projection correlation between search and template content.  That
is what lets the engine track without any learned weights.
"""

import json
import math
import os
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from . import tensorio
from .attention import MhaWeights, MtaWeights, mha, mta
from .numerics import PositionalEncoding, ShapeError

DEFAULT_FFN_MULT = 4


@dataclass(frozen=True)
class LnParams:
    gamma: np.ndarray
    beta: np.ndarray


@dataclass(frozen=True)
class FfnWeights:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


@dataclass(frozen=True)
class EncoderWeights:
    """Single encoder block, shared by every collection slot."""

    msa: MhaWeights
    ffn: FfnWeights
    ln1: LnParams
    ln2: LnParams


@dataclass(frozen=True)
class DecoderWeights:
    msa: MhaWeights
    mta: MtaWeights
    ffn: FfnWeights
    ln1: LnParams
    ln2: LnParams
    ln3: LnParams


@dataclass(frozen=True)
class MttWeights:
    encoder: EncoderWeights
    decoder: DecoderWeights

    @property
    def groups(self) -> int:
        return self.decoder.mta.groups


class EncodedCollection:
    """Encoded template slots; index 0 is always the initial template."""

    def __init__(self, x_enc: Sequence[np.ndarray]):
        x_enc = tuple(x_enc)
        if not x_enc:
            raise ShapeError("encoded collection may not be empty")
        ref = ad.value_of(x_enc[0]).shape
        for i, t in enumerate(x_enc):
            if ad.value_of(t).shape != ref:
                raise ShapeError(f"slot {i} shape {ad.value_of(t).shape} != {ref}")
        self.x_enc = x_enc

    def __len__(self):
        return len(self.x_enc)

    def __getitem__(self, i):
        return self.x_enc[i]

    def __iter__(self):
        return iter(self.x_enc)


def _check_grid(fmap, pe: PositionalEncoding, what: str) -> Tuple[int, int, int]:
    shape = ad.value_of(fmap).shape
    if len(shape) != 3:
        raise ShapeError(f"{what}: expected H x W x C feature map, got {shape}")
    h, w, c = shape
    if (pe.height, pe.width) != (h, w) or pe.table.shape[1] != c:
        raise ShapeError(f"{what}: positional encoding grid "
                         f"{(pe.height, pe.width, pe.table.shape[1])} does not "
                         f"match feature map {(h, w, c)}")
    return h, w, c


def _block_msa(tokens, pe_table, w: MhaWeights, ln: LnParams):
    # residual carries the position-augmented input
    xp = ad.add(tokens, pe_table)
    att = mha(xp, xp, xp, w)
    return ad.layer_norm(ad.add(att, xp), ln.gamma, ln.beta)


def _block_ffn(tokens, w: FfnWeights, ln: LnParams):
    f = ad.ffn(tokens, w.w1, w.b1, w.w2, w.b2)
    return ad.layer_norm(ad.add(f, tokens), ln.gamma, ln.beta)


def encode_template(f_z, pe: PositionalEncoding, w: EncoderWeights,
                    depth: int = 1):
    """Encode one template feature map to an L_z x C token sequence."""
    h, wd, c = _check_grid(f_z, pe, "encode_template")
    pe_table = pe.table.astype(ad.value_of(f_z).dtype, copy=False)
    x = ad.reshape2d(f_z, h * wd, c)
    for _ in range(depth):
        x = _block_ffn(_block_msa(x, pe_table, w.msa, w.ln1), w.ffn, w.ln2)
    return x


def encode_collection(features: Sequence, pe: PositionalEncoding,
                      w: EncoderWeights, depth: int = 1) -> EncodedCollection:
    """Encode every collection slot independently with the shared weights."""
    return EncodedCollection([encode_template(f, pe, w, depth) for f in features])


def decode(f_x, pe_x: PositionalEncoding, enc: EncodedCollection,
           w: DecoderWeights, depth: int = 1):
    """Fuse the search feature with the encoded collection; returns L_x x C."""
    if len(enc) != w.mta.groups:
        raise ShapeError(f"collection has {len(enc)} slots, decoder expects "
                         f"{w.mta.groups}")
    h, wd, c = _check_grid(f_x, pe_x, "decode")
    pe_table = pe_x.table.astype(ad.value_of(f_x).dtype, copy=False)
    x = ad.reshape2d(f_x, h * wd, c)
    for _ in range(depth):
        x = _block_msa(x, pe_table, w.msa, w.ln1)
        cross = mta(x, list(enc), w.mta)
        x = ad.layer_norm(ad.add(cross, x), w.ln2.gamma, w.ln2.beta)
        x = _block_ffn(x, w.ffn, w.ln3)
    return x


# ---------------------------------------------------------------------------
# Deterministic initialization
# ---------------------------------------------------------------------------

def _xavier(rng, rows: int, cols: int, dtype) -> np.ndarray:
    limit = math.sqrt(6.0 / (rows + cols))
    return rng.uniform(-limit, limit, size=(rows, cols)).astype(dtype)


def _orthonormal(rng, rows: int, cols: int, dtype) -> np.ndarray:
    """Orthonormal-column projection (QR of a seeded draw, signs fixed).

    Dot products of two inputs through the same orthonormal projection
    equal the inner product of their components in one shared subspace, so
    every key token scores by alignment rather than by how much of its
    norm a lopsided random matrix happens to keep; that is what stops
    single high-gain tokens from soaking up every attention row.
    """
    q, r = np.linalg.qr(rng.standard_normal((rows, cols)))
    return (q * np.sign(np.diag(r))).astype(dtype)


def _init_ffn(rng, c: int, hidden: int, dtype) -> FfnWeights:
    return FfnWeights(w1=_xavier(rng, c, hidden, dtype),
                      b1=np.zeros(hidden, dtype=dtype),
                      w2=_xavier(rng, hidden, c, dtype),
                      b2=np.zeros(c, dtype=dtype))


def _init_ln(c: int, dtype) -> LnParams:
    return LnParams(gamma=np.ones(c, dtype=dtype), beta=np.zeros(c, dtype=dtype))


def _bump_frequency_index(c: int, grid: int) -> int:
    """Lowest pair index whose frequency keeps the bump single-lobed.

    cos(omega * (u - u0)) is a monotone bump over the grid only while the
    largest |u - u0| stays inside the first half period; for wider grids
    the readout has to drop to a slower channel pair.
    """
    quarter = c // 4
    span = (grid - 1) / 2.0
    for i in range(quarter):
        if 10000.0 ** (-i / quarter) * span <= 0.95 * math.pi:
            return i
    return quarter - 1


def match_meter_column(c: int, grid: int, dtype=np.float64) -> np.ndarray:
    """Value column turning an attended position into a center-match score.

    cos(omega*(u - u0)) = cos(omega*u0)*cos(omega*u) + sin(omega*u0)*sin(omega*u),
    so a centered bump over the template grid is a fixed linear functional
    of the sinusoidal position channels.  The column reads the sin/cos pair
    of one frequency per axis plus the near-constant last cos channel, whose
    coefficient is chosen to make the coefficients sum to zero: any offset a
    normalization step adds uniformly across channels then cancels out of
    the meter.  Attention that lands on the template center reports high,
    attention on the context ring reports low, and a diffuse row averages
    to the grid mean; none of that depends on what the target looks like.
    """
    if c % 4:
        raise ShapeError(f"match meter needs channels divisible by 4, got {c}")
    quarter = c // 4
    i = _bump_frequency_index(c, grid)
    omega = 10000.0 ** (-i / quarter)
    u0 = (grid - 1) / 2.0
    col = np.zeros(c, dtype=dtype)
    total = 0.0
    for axis_offset in (0, c // 2):
        col[axis_offset + 2 * i] = math.sin(omega * u0)
        col[axis_offset + 2 * i + 1] = math.cos(omega * u0)
        total += math.sin(omega * u0) + math.cos(omega * u0)
    col[c // 2 - 1] = -total
    return col


def match_phase_column(c: int, grid: int, axis: int,
                       dtype=np.float64) -> np.ndarray:
    """Odd companion of the match meter: signed offset along one axis.

    sin(omega*(u - u0)) = cos(omega*u0)*sin(omega*u) - sin(omega*u0)*cos(omega*u)
    crosses zero at the template center and is monotone across the grid, so
    the attention-weighted readout reports *where* along the axis the match
    landed, not just how central it was.  Together with the even bump this
    forms a quadrature pair: a linear head can recover the sub-cell landing
    point from the pair instead of rounding to the loudest cell.  Same
    zero-coefficient-sum correction as the even column.
    """
    if c % 4:
        raise ShapeError(f"match meter needs channels divisible by 4, got {c}")
    if axis not in (0, 1):
        raise ValueError(f"axis must be 0 (row) or 1 (col), got {axis}")
    quarter = c // 4
    i = _bump_frequency_index(c, grid)
    omega = 10000.0 ** (-i / quarter)
    u0 = (grid - 1) / 2.0
    col = np.zeros(c, dtype=dtype)
    off = axis * (c // 2)
    col[off + 2 * i] = math.cos(omega * u0)
    col[off + 2 * i + 1] = -math.sin(omega * u0)
    col[c // 2 - 1] = -(math.cos(omega * u0) - math.sin(omega * u0))
    return col


METERS_PER_HEAD = 3


def meter_lanes(c: int, heads: int) -> Tuple[int, ...]:
    """Output channels reserved for the per-head match meters.

    Three lanes per head (even bump, row phase, col phase).  High-index
    sin channels oscillate at near-zero frequency, so the positional table
    is ~0 there for any realistic grid; routing the meters onto those
    lanes keeps them clear of the position prior that rides the residual
    stream.
    """
    if c % 4:
        raise ShapeError(f"meter lanes need channels divisible by 4, got {c}")
    total = METERS_PER_HEAD * heads
    lanes = []
    half, full = c // 2, c
    per_side = (total + 1) // 2
    for n in range(per_side):
        lanes.append(half - 2 - 2 * n)
    for n in range(total - per_side):
        lanes.append(full - 2 - 2 * n)
    if min(lanes) < 2:
        raise ShapeError(f"channels={c} too narrow for {heads} meter lanes")
    return tuple(lanes)


def reserved_lanes(c: int, heads: int, grid: int = 4) -> Tuple[int, ...]:
    """All channels the meter path relies on staying content-free.

    Covers the sin/cos input pair of the bump frequency on both axes, the
    constant-offset cos channel, and the per-head output lanes.  The
    feature extractor projects image content away from these so the meters
    read pure position evidence.
    """
    i = _bump_frequency_index(c, grid)
    lanes = {2 * i, 2 * i + 1, c // 2 + 2 * i, c // 2 + 2 * i + 1, c // 2 - 1}
    lanes.update(meter_lanes(c, heads))
    return tuple(sorted(lanes))


def init_mtt_weights(seed: int, c: int = 256, heads: int = 8, groups: int = 4,
                     ffn_hidden: Optional[int] = None, qk_gain: float = 2.0,
                     residual_gain: float = 0.2, template_grid: int = 4,
                     meter_gain: float = 3.0,
                     dtype=np.float64) -> MttWeights:
    """Seeded reference weights that turn the decoder into a matcher.

    Tying W^Q to the key projections makes each attention score an inner
    product of the two inputs under one shared random projection, i.e. a
    correlation response, which a tracker can run on without training;
    qk_gain sharpens the attention temperature.  Each head's mixed-temporal
    value path is a quadrature meter triple (``match_meter_column`` plus a
    ``match_phase_column`` per axis): the head reports how centrally its
    attention landed in its group's template and the signed row/col offset
    of the landing point, and W^0 routes each report to its own reserved
    output lane (``meter_lanes``).  The self-attention and feed-forward output
    projections are damped by residual_gain and zeroed on every reserved
    lane, so the meters stay clean of image content and a linear readout
    can use them as appearance-independent match evidence.  Draw order is
    fixed; identical seeds yield bit-identical bundles.
    """
    dtype = np.dtype(dtype)
    if ffn_hidden is None:
        ffn_hidden = DEFAULT_FFN_MULT * c
    rng = np.random.default_rng(seed)
    gain = dtype.type(qk_gain)
    rg = dtype.type(residual_gain)
    reserved = list(reserved_lanes(c, heads, template_grid))

    def mk():
        return _xavier(rng, c, c, dtype)

    def clear(m: np.ndarray) -> np.ndarray:
        m[:, reserved] = 0.0
        return m

    def damp(f: FfnWeights) -> FfnWeights:
        return FfnWeights(w1=f.w1, b1=f.b1, w2=clear(f.w2 * rg), b2=f.b2)

    m_enc = mk()
    enc_msa = MhaWeights(heads=heads, wq=m_enc * gain, wk=m_enc,
                         wv=mk(), wo=clear(mk() * rg))
    enc = EncoderWeights(msa=enc_msa,
                         ffn=damp(_init_ffn(rng, c, ffn_hidden, dtype)),
                         ln1=_init_ln(c, dtype), ln2=_init_ln(c, dtype))

    m_dec = mk()
    dec_msa = MhaWeights(heads=heads, wq=m_dec * gain, wk=m_dec,
                         wv=mk(), wo=clear(mk() * rg))
    cg, hg, dk = c // groups, heads // groups, c // heads
    if dk < METERS_PER_HEAD:
        raise ShapeError(f"head dim {dk} cannot hold {METERS_PER_HEAD} meters")
    wk = tuple(_orthonormal(rng, c, cg, dtype) for _ in range(groups))
    meters = (match_meter_column(c, template_grid, dtype),
              match_phase_column(c, template_grid, 0, dtype),
              match_phase_column(c, template_grid, 1, dtype))
    wv_g = np.zeros((c, cg), dtype=dtype)
    for j in range(hg):
        for d, mcol in enumerate(meters):
            wv_g[:, j * dk + d] = mcol
    wv = tuple(wv_g.copy() for _ in range(groups))
    wq = np.concatenate([m * gain for m in wk], axis=1)
    lanes = meter_lanes(c, heads)
    wo = np.zeros((c, c), dtype=dtype)
    for k in range(groups):
        for j in range(hg):
            for d in range(METERS_PER_HEAD):
                wo[k * cg + j * dk + d,
                   lanes[METERS_PER_HEAD * (k * hg + j) + d]] = \
                    dtype.type(meter_gain)
    dec_mta = MtaWeights(groups=groups, heads=heads, wq=wq, wk=wk, wv=wv,
                         wo=wo)
    dec = DecoderWeights(msa=dec_msa, mta=dec_mta,
                         ffn=damp(_init_ffn(rng, c, ffn_hidden, dtype)),
                         ln1=_init_ln(c, dtype), ln2=_init_ln(c, dtype),
                         ln3=_init_ln(c, dtype))
    return MttWeights(encoder=enc, decoder=dec)


# ---------------------------------------------------------------------------
# Weight bundle IO: directory of tensors plus a JSON manifest
# ---------------------------------------------------------------------------

MANIFEST_NAME = "manifest.json"
BUNDLE_FORMAT = "bactrack-weights"
BUNDLE_VERSION = 1


def _flatten_weights(w: MttWeights) -> dict:
    t = {}
    for side, blk in (("enc", w.encoder), ("dec", w.decoder)):
        msa = blk.msa
        t[f"{side}.msa.wq"] = msa.wq
        t[f"{side}.msa.wk"] = msa.wk
        t[f"{side}.msa.wv"] = msa.wv
        t[f"{side}.msa.wo"] = msa.wo
        t[f"{side}.ffn.w1"] = blk.ffn.w1
        t[f"{side}.ffn.b1"] = blk.ffn.b1
        t[f"{side}.ffn.w2"] = blk.ffn.w2
        t[f"{side}.ffn.b2"] = blk.ffn.b2
        lns = [("ln1", blk.ln1), ("ln2", blk.ln2)]
        if side == "dec":
            lns.append(("ln3", blk.ln3))
        for name, ln in lns:
            t[f"{side}.{name}.gamma"] = ln.gamma
            t[f"{side}.{name}.beta"] = ln.beta
    m = w.decoder.mta
    t["dec.mta.wq"] = m.wq
    t["dec.mta.wo"] = m.wo
    for k in range(m.groups):
        t[f"dec.mta.wk{k}"] = m.wk[k]
        t[f"dec.mta.wv{k}"] = m.wv[k]
    return t


def save_weights(dirpath: str, w: MttWeights) -> None:
    os.makedirs(dirpath, exist_ok=True)
    tensors = _flatten_weights(w)
    files = {}
    for role in sorted(tensors):
        fname = role.replace(".", "_") + ".bact"
        tensorio.save_tensor(os.path.join(dirpath, fname), tensors[role])
        files[role] = fname
    manifest = {"format": BUNDLE_FORMAT, "version": BUNDLE_VERSION,
                "heads": w.decoder.msa.heads, "groups": w.decoder.mta.groups,
                "tensors": files}
    with open(os.path.join(dirpath, MANIFEST_NAME), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_weights(dirpath: str) -> MttWeights:
    path = os.path.join(dirpath, MANIFEST_NAME)
    try:
        with open(path) as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise tensorio.FormatError(f"unreadable weight manifest {path}: {e}")
    if manifest.get("format") != BUNDLE_FORMAT:
        raise tensorio.FormatError(f"not a weight bundle: {path}")
    if manifest.get("version") != BUNDLE_VERSION:
        raise tensorio.FormatError(f"unsupported bundle version "
                                   f"{manifest.get('version')}")
    heads = int(manifest["heads"])
    groups = int(manifest["groups"])
    files = manifest["tensors"]

    def t(role):
        if role not in files:
            raise tensorio.FormatError(f"bundle missing tensor {role}")
        return tensorio.load_tensor(os.path.join(dirpath, files[role]))

    def msa(side):
        return MhaWeights(heads=heads, wq=t(f"{side}.msa.wq"),
                          wk=t(f"{side}.msa.wk"), wv=t(f"{side}.msa.wv"),
                          wo=t(f"{side}.msa.wo"))

    def ffn_w(side):
        return FfnWeights(w1=t(f"{side}.ffn.w1"), b1=t(f"{side}.ffn.b1"),
                          w2=t(f"{side}.ffn.w2"), b2=t(f"{side}.ffn.b2"))

    def ln(side, name):
        return LnParams(gamma=t(f"{side}.{name}.gamma"),
                        beta=t(f"{side}.{name}.beta"))

    enc = EncoderWeights(msa=msa("enc"), ffn=ffn_w("enc"),
                         ln1=ln("enc", "ln1"), ln2=ln("enc", "ln2"))
    dec_mta = MtaWeights(groups=groups, heads=heads, wq=t("dec.mta.wq"),
                         wk=tuple(t(f"dec.mta.wk{k}") for k in range(groups)),
                         wv=tuple(t(f"dec.mta.wv{k}") for k in range(groups)),
                         wo=t("dec.mta.wo"))
    dec = DecoderWeights(msa=msa("dec"), mta=dec_mta, ffn=ffn_w("dec"),
                         ln1=ln("dec", "ln1"), ln2=ln("dec", "ln2"),
                         ln3=ln("dec", "ln3"))
    return MttWeights(encoder=enc, decoder=dec)
