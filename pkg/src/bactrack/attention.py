"""Multi-head attention and grouped mixed-temporal attention (MTA).

MTA splits the query channels into G contiguous chunks and lets head
group k attend only to template k of the appearance collection, through
per-group key/value projections of width C/G.  Because each group sees a
single template, the score and weighted-sum work for G templates costs
exactly what one-template MHA costs; ``attention_flops`` makes that count
auditable.

Forwards are written against the lifted ops in :mod:`bactrack.autodiff`,
so the same code serves the plain inference path (ndarray in, ndarray
out) and the taped path used by gradient checks.
"""

import math
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .numerics import ShapeError


def _shape(x) -> Tuple[int, ...]:
    return tuple(ad.value_of(x).shape)


def _require_square(mat, c: int, name: str) -> None:
    if _shape(mat) != (c, c):
        raise ShapeError(f"{name}: expected {c}x{c}, got {_shape(mat)}")


@dataclass(frozen=True)
class MhaWeights:
    heads: int
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray

    def __post_init__(self):
        c = _shape(self.wq)[0]
        for name in ("wq", "wk", "wv", "wo"):
            _require_square(getattr(self, name), c, name)
        if self.heads < 1 or c % self.heads:
            raise ShapeError(f"C={c} not divisible by heads={self.heads}")

    @property
    def channels(self) -> int:
        return _shape(self.wq)[0]


@dataclass(frozen=True)
class MtaWeights:
    """Grouped cross-attention weights.

    wk/wv hold one C x (C/G) projection per head group; group k consumes
    query channels [k*C/G, (k+1)*C/G) and template slot k.
    """

    groups: int
    heads: int
    wq: np.ndarray
    wk: Tuple[np.ndarray, ...]
    wv: Tuple[np.ndarray, ...]
    wo: np.ndarray

    def __post_init__(self):
        g, h = self.groups, self.heads
        c = _shape(self.wq)[0]
        _require_square(self.wq, c, "wq")
        _require_square(self.wo, c, "wo")
        if g < 1 or h < 1:
            raise ShapeError("groups and heads must be positive")
        if h % g:
            raise ShapeError(f"heads={h} not divisible by groups={g}")
        if c % g or (c // g) % (h // g):
            raise ShapeError(f"C={c} incompatible with groups={g}, heads={h}")
        if len(self.wk) != g or len(self.wv) != g:
            raise ShapeError(f"need {g} key and value projections, "
                             f"got {len(self.wk)}/{len(self.wv)}")
        for k in range(g):
            for name, mat in (("wk", self.wk[k]), ("wv", self.wv[k])):
                if _shape(mat) != (c, c // g):
                    raise ShapeError(f"{name}[{k}]: expected {c}x{c // g}, "
                                     f"got {_shape(mat)}")

    @property
    def channels(self) -> int:
        return _shape(self.wq)[0]

    @property
    def head_dim(self) -> int:
        return _shape(self.wq)[0] // self.heads


def _heads_attend(q, k, v, n_heads: int, head_dim: int, collect=None):
    """Scaled dot-product attention over contiguous head slices of q/k/v."""
    scale = math.sqrt(head_dim)
    outs = []
    for j in range(n_heads):
        j0, j1 = j * head_dim, (j + 1) * head_dim
        qj = ad.slice_cols(q, j0, j1)
        kj = ad.slice_cols(k, j0, j1)
        vj = ad.slice_cols(v, j0, j1)
        attn = ad.softmax_rows(ad.matmul(qj, ad.transpose(kj)), scale)
        if collect is not None:
            collect.append(ad.value_of(attn))
        outs.append(ad.matmul(attn, vj))
    return ad.concat_cols(outs)


def mha(q_in, k_in, v_in, w: MhaWeights, return_attn: bool = False):
    """Canonical h-head attention: project, attend per head, concat, project."""
    c = w.channels
    if _shape(q_in)[1] != c or _shape(k_in)[1] != c or _shape(v_in)[1] != c:
        raise ShapeError(f"inputs must have {c} channels")
    if _shape(k_in)[0] != _shape(v_in)[0]:
        raise ShapeError("key and value lengths differ")
    q = ad.matmul(q_in, w.wq)
    k = ad.matmul(k_in, w.wk)
    v = ad.matmul(v_in, w.wv)
    maps = [] if return_attn else None
    out = ad.matmul(_heads_attend(q, k, v, w.heads, c // w.heads, maps), w.wo)
    if return_attn:
        return out, np.stack(maps)
    return out


def mta(search, templates: Sequence, w: MtaWeights, return_attn: bool = False):
    """Mixed-temporal attention of a search feature over G template slots.

    Slot k feeds head group k (slot 0 is the initial template by
    convention).  Returns Lx x C; with return_attn also a list of G
    arrays (h/G, Lx, Lz) of row-stochastic attention maps.
    """
    g, h, c = w.groups, w.heads, w.channels
    cg, hg, dk = c // g, h // g, c // h
    if len(templates) != g:
        raise ShapeError(f"expected {g} templates, got {len(templates)}")
    if _shape(search)[1] != c:
        raise ShapeError(f"search must have {c} channels")
    for k, z in enumerate(templates):
        if _shape(z)[1] != c:
            raise ShapeError(f"template {k} must have {c} channels")
    q = ad.matmul(search, w.wq)
    group_outs = []
    attn_maps = []
    for k in range(g):
        qk = ad.slice_cols(q, k * cg, (k + 1) * cg)
        kk = ad.matmul(templates[k], w.wk[k])
        vk = ad.matmul(templates[k], w.wv[k])
        maps = [] if return_attn else None
        group_outs.append(_heads_attend(qk, kk, vk, hg, dk, maps))
        if return_attn:
            attn_maps.append(np.stack(maps))
    out = ad.matmul(ad.concat_cols(group_outs), w.wo)
    if return_attn:
        return out, attn_maps
    return out


def attention_flops(lx: int, lz: int, c: int, heads: int, groups: int,
                    templates: int) -> dict:
    """Exact multiply-add counts for grouped attention.

    ``templates`` total template slots are divided evenly across head
    groups, so each group's key length is lz * templates / groups.
    groups=templates=1 gives the standard single-template MHA counts.
    """
    if heads < 1 or groups < 1 or templates < 1:
        raise ShapeError("heads, groups and templates must be positive")
    if heads % groups or c % groups or (c // groups) % (heads // groups):
        raise ShapeError(f"C={c} incompatible with groups={groups}, heads={heads}")
    if templates % groups:
        raise ShapeError(f"templates={templates} not divisible by groups={groups}")
    per_group_keys = lz * (templates // groups)
    # one (h/G)-head pass per group, head dim C/h
    score = groups * (heads // groups) * lx * per_group_keys * (c // heads)
    weighted = score
    proj = 2 * lx * c * c + 2 * templates * lz * c * (c // groups)
    return {"score_stage": score, "weighted_sum_stage": weighted,
            "projections": proj}
