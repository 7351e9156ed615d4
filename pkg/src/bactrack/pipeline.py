"""Per-frame tracking loop.

Crop a search region around the previous box, extract features, fuse them
against the appearance collection through the mixed-temporal transformer,
score locations with a linear classification head, bias toward small
displacements with a Hann window penalty, decode the box, and hand the
result to the appearance discriminator.

The engine ships untrained.  Reference runs rely on two deterministic
calibrations: tied query/key transformer weights (see bactrack.mtt) and a
classification head fitted on the first frame by ridge regression to a
Gaussian target map, in the spirit of classical correlation-filter
initialization.  Both are seeded, so whole runs are reproducible bit for
bit.
"""

import json
import math
from dataclasses import dataclass, field, fields, replace
from typing import Dict, List, NamedTuple, Optional, Tuple

import numpy as np

from . import appearance as ap
from . import mtt
from .numerics import ShapeError, sinusoidal_pe
from .appearance import StateError


@dataclass(frozen=True)
class BBox:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.cx, self.cy, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"box not finite: {vals}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box needs positive extent: {vals}")

    def as_list(self) -> List[float]:
        return [float(self.cx), float(self.cy), float(self.w), float(self.h)]

    def to_xyxy(self) -> Tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2,
                self.cx + self.w / 2, self.cy + self.h / 2)


@dataclass(frozen=True)
class TrackerConfig:
    n_templates: int = 3
    groups: int = 4
    heads: int = 8
    channels: int = 256
    template_patch: int = 127
    search_patch: int = 287
    template_grid: int = 6
    search_grid: int = 26
    tau0: float = 1.8
    w1: float = 0.95
    w2: float = 0.9
    tau_si: float = 0.42
    window_weight: float = 0.49
    context_amount: float = 0.5
    scale_clip: float = 1.5
    size_lr: float = 0.25
    dynamic_range: float = 255.0
    extractor: str = "cells"
    weights: Optional[str] = None
    seed: int = 0
    qk_gain: float = 2.0
    residual_gain: float = 0.2
    meter_gain: float = 3.0
    content_gain: float = 3.0
    contrast_floor: float = 0.02
    ffn_hidden: Optional[int] = None
    depth: int = 1
    head_augmentations: int = 4
    head_real_shifts: int = 6
    head_aug_strength: float = 0.8
    head_ridge: float = 1e-2
    cal_span: float = 2.0
    precision: str = "f64"
    ad_mode: str = "full"

    def __post_init__(self):
        if self.n_templates < 0:
            raise ValueError("n_templates must be non-negative")
        # G = N+1 except in the no-update arm, where all groups read z0
        if self.n_templates and self.groups != self.n_templates + 1:
            raise ValueError(f"groups={self.groups} must equal "
                             f"n_templates+1={self.n_templates + 1}")
        if self.heads % self.groups or self.channels % self.heads:
            raise ValueError("channels/heads/groups divisibility violated")
        if (self.channels // self.groups) % (self.heads // self.groups):
            raise ValueError("group channel chunk not splittable over heads")
        if self.precision not in ("f32", "f64"):
            raise ValueError(f"unknown precision {self.precision!r}")
        if self.ad_mode not in ("full", "au", "rp", "dp"):
            raise ValueError(f"unknown ad_mode {self.ad_mode!r}")
        if not 0 <= self.window_weight <= 1:
            raise ValueError("window_weight must lie in [0, 1]")
        for name in ("template_patch", "search_patch"):
            if getattr(self, name) < 2:
                raise ValueError(f"{name} too small")

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "TrackerConfig":
        known = {f.name for f in fields(cls)}
        bad = sorted(set(d) - known)
        if bad:
            raise ValueError(f"unknown config keys: {', '.join(bad)}")
        return cls(**d)


def desk_config(**overrides) -> TrackerConfig:
    """Small geometry for fast harness runs; same structure as the default.

    heads = groups here, so each group's match runs in its full C/G-wide
    orthonormal subspace; splitting it across two heads halves the
    projection width and roughly doubles spurious-match pickup.
    """
    base = dict(channels=64, template_patch=64, search_patch=192,
                template_grid=4, search_grid=12, heads=4)
    base.update(overrides)
    return TrackerConfig(**base)


# ---------------------------------------------------------------------------
# Cropping and resizing
# ---------------------------------------------------------------------------

class CropGeom(NamedTuple):
    x0: int
    y0: int
    side: int
    out: int


def _resize_matrix(src: int, dst: int) -> np.ndarray:
    """Row-interpolation matrix for separable bilinear resize.

    Uses the half-pixel-center convention, so src == dst is an exact
    identity.
    """
    m = np.zeros((dst, src))
    ratio = src / dst
    for i in range(dst):
        x = (i + 0.5) * ratio - 0.5
        x = min(max(x, 0.0), src - 1.0)
        lo = int(math.floor(x))
        hi = min(lo + 1, src - 1)
        frac = x - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m


def _area_matrix(src: int, dst: int) -> np.ndarray:
    """Row matrix for area-averaging (box) downsample.

    Each output tap integrates its full src interval, so sub-tap shifts of
    the input move the output smoothly instead of aliasing the way a
    two-tap bilinear resample does. Falls back to bilinear when upsampling.
    """
    if src <= dst:
        return _resize_matrix(src, dst)
    m = np.zeros((dst, src))
    ratio = src / dst
    for i in range(dst):
        a, b = i * ratio, (i + 1) * ratio
        lo, hi = int(math.floor(a)), int(math.ceil(b))
        for j in range(lo, min(hi, src)):
            m[i, j] = min(b, j + 1) - max(a, j)
        m[i] /= ratio
    return m


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.shape[0] == out_h and img.shape[1] == out_w:
        return img.copy()
    return _resize_matrix(img.shape[0], out_h) @ img @ _resize_matrix(
        img.shape[1], out_w).T


def _crop_geom(frame: np.ndarray, box: BBox, context_amount: float,
               out_size: int, window_scale: float = 1.0):
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 2 or frame.size == 0:
        raise ShapeError("frame must be a non-empty 2-d grayscale array")
    p = context_amount * (box.w + box.h)
    s = math.sqrt((box.w + p) * (box.h + p)) * window_scale
    side = max(2, int(round(s)))
    x0 = int(round(box.cx - side / 2))
    y0 = int(round(box.cy - side / 2))
    fh, fw = frame.shape
    window = np.full((side, side), frame.mean(), dtype=np.float64)
    ys, ye = max(0, y0), min(fh, y0 + side)
    xs, xe = max(0, x0), min(fw, x0 + side)
    if ys < ye and xs < xe:
        window[ys - y0:ye - y0, xs - x0:xe - x0] = frame[ys:ye, xs:xe]
    return bilinear_resize(window, out_size, out_size), CropGeom(x0, y0, side,
                                                                 out_size)


def crop_patch(frame: np.ndarray, box: BBox, context_amount: float,
               out_size: int) -> np.ndarray:
    """Square context crop around the box, mean-padded, resized to out_size."""
    if out_size < 2:
        raise ValueError("out_size must be at least 2")
    return _crop_geom(frame, box, context_amount, out_size)[0]


def _patch_to_frame(x_patch: float, origin: int, geom: CropGeom) -> float:
    scale = geom.side / geom.out
    return origin + (x_patch + 0.5) * scale - 0.5


def _frame_to_patch(x_frame: float, origin: int, geom: CropGeom) -> float:
    scale = geom.side / geom.out
    return (x_frame - origin + 0.5) / scale - 0.5


# ---------------------------------------------------------------------------
# Feature extraction
# ---------------------------------------------------------------------------

class CellExtractor:
    """Cell-windowed features, one shared seeded projection, layer norm.

    The patch is first resized to a whole number of cells: template
    patches round the cell size up (127 -> 6 cells of 22), search patches
    round it down (287 -> 26 cells of 11).  Each cell's window is then
    widened past the cell boundary (OVERLAP x the cell side), resampled to
    one canonical resolution, standardized, and projected by a single
    shared matrix, so the same content produces the same features in the
    template and the search patch.  The shared projection is what lets
    tied query/key attention act as a correlation matcher; the widened
    windows keep that correlation alive when the content sits a fraction
    of a cell off the grid.  Deterministic given the seed.
    """

    CANON = 8
    SCALES = (1.5, 3.0)

    def __init__(self, channels: int, template_patch: int, template_grid: int,
                 search_patch: int, search_grid: int, seed: int, dtype=np.float64,
                 reserved: Tuple[int, ...] = (), content_gain: float = 3.0,
                 contrast_floor: float = 5.0):
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xFEA7]))
        n = len(self.SCALES) * self.CANON * self.CANON
        limit = math.sqrt(6.0 / (n + channels))
        proj = rng.uniform(-limit, limit, size=(n, channels))
        # unit-norm columns keep feature magnitude proportional to window
        # contrast, so a quiet window stays quiet after projection
        norms = np.sqrt(np.square(proj).sum(axis=0))
        self._proj = (proj / np.maximum(norms, 1e-12)).astype(self.dtype)
        # decoder match meters read / write these channels; projecting
        # image content away from them is what keeps the meters clean
        if reserved:
            self._proj[:, list(reserved)] = 0.0
        # content has to outweigh the positional table in the token stream:
        # template and search grids assign different coordinates to the
        # same content, so any position term in a cross-attention score is
        # noise pulling the match toward accidental coordinate affinity
        self._content_gain = self.dtype.type(content_gain)
        self._floor = self.dtype.type(contrast_floor)
        t_cell = max(1, -(-template_patch // template_grid))
        s_cell = max(1, search_patch // search_grid)
        self._geom = {template_patch: (template_grid, t_cell),
                      search_patch: (search_grid, s_cell)}
        # window sizes always derive from the template cell, so a search
        # grid finer than the template stride oversamples the same-sized
        # receptive field instead of shrinking it
        self._win_cell = t_cell
        self.channels = channels

    def _windows(self, inner: np.ndarray, grid: int, cell: int,
                 scale: float) -> np.ndarray:
        size = inner.shape[0]
        win = min(size, max(cell, int(round(self._win_cell * scale))))
        rmat = _area_matrix(win, self.CANON)
        rows = np.empty((grid * grid, self.CANON * self.CANON))
        for r in range(grid):
            y0 = min(max(r * cell + (cell - win) // 2, 0), size - win)
            for c in range(grid):
                x0 = min(max(c * cell + (cell - win) // 2, 0), size - win)
                cut = inner[y0:y0 + win, x0:x0 + win]
                rows[r * grid + c] = (rmat @ cut @ rmat.T).reshape(-1)
        return rows

    def _standardize(self, rows: np.ndarray) -> np.ndarray:
        # soft normalization: structured windows come out near unit RMS,
        # windows whose contrast sits at or below the floor stay quiet.
        # Full standardization would amplify a flat background window into
        # a loud full-contrast gradient that matches everything.
        rows = rows - rows.mean(axis=1, keepdims=True)
        ms = np.square(rows).mean(axis=1, keepdims=True)
        return rows / np.sqrt(ms + self._floor * self._floor)

    def extract(self, patch: np.ndarray) -> np.ndarray:
        patch = np.asarray(patch, dtype=np.float64)
        if patch.ndim != 2 or patch.shape[0] != patch.shape[1]:
            raise ShapeError(f"expected a square patch, got {patch.shape}")
        size = patch.shape[0]
        if size not in self._geom:
            raise ShapeError(f"patch side {size} is neither the template nor "
                             f"the search size {sorted(self._geom)}")
        grid, cell = self._geom[size]
        inner = bilinear_resize(patch, grid * cell, grid * cell)
        # per-window mean removal kills the shared brightness direction
        # that would otherwise dominate every projected feature; the wider
        # scales keep the correlation alive when the content sits a
        # fraction of a cell off the grid
        rows = np.concatenate(
            [self._standardize(self._windows(inner, grid, cell, s))
             for s in self.SCALES], axis=1).astype(self.dtype)
        feats = rows @ self._proj
        feats = (feats - feats.mean(axis=1, keepdims=True)) * self._content_gain
        return feats.reshape(grid, grid, self.channels).astype(self.dtype)


EXTRACTORS = {"cells": CellExtractor}


def make_extractor(cfg: TrackerConfig):
    if cfg.extractor not in EXTRACTORS:
        raise ValueError(f"unknown extractor {cfg.extractor!r}")
    reserved = mtt.reserved_lanes(cfg.channels, cfg.heads, cfg.template_grid)
    return EXTRACTORS[cfg.extractor](cfg.channels, cfg.template_patch,
                                     cfg.template_grid, cfg.search_patch,
                                     cfg.search_grid, cfg.seed, cfg.dtype,
                                     reserved=reserved,
                                     content_gain=cfg.content_gain,
                                     contrast_floor=cfg.contrast_floor
                                     * cfg.dynamic_range)


# ---------------------------------------------------------------------------
# Prediction head
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HeadWeights:
    w_cls: np.ndarray
    b_cls: float
    w_reg: np.ndarray
    b_reg: np.ndarray


def predict(x_dec: np.ndarray, head: HeadWeights,
            grid: Tuple[int, int]) -> Tuple[np.ndarray, np.ndarray]:
    """Per-location sigmoid score map and non-negative l,t,r,b offsets."""
    gh, gw = grid
    x = np.asarray(x_dec, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != gh * gw:
        raise ShapeError(f"decoded features {x.shape} do not cover a "
                         f"{gh}x{gw} grid")
    if x.shape[1] != np.asarray(head.w_cls).shape[0]:
        raise ShapeError("head width does not match feature channels")
    logits = x @ np.asarray(head.w_cls, dtype=np.float64) + head.b_cls
    scores = 1.0 / (1.0 + np.exp(-logits))
    offs = x @ np.asarray(head.w_reg, dtype=np.float64) + np.asarray(
        head.b_reg, dtype=np.float64)
    offs = np.maximum(offs, 0.0)
    return scores.reshape(gh, gw), offs.reshape(gh, gw, 4)


def location_coord(row: int, col: int, grid: Tuple[int, int],
                   patch_size: int) -> Tuple[float, float]:
    """Patch-pixel coordinate a grid location is responsible for."""
    gh, gw = grid
    return ((col + 0.5) * patch_size / gw, (row + 0.5) * patch_size / gh)


def decode_box_at(offsets: np.ndarray, row: int, col: int,
                  grid: Tuple[int, int], patch_size: int,
                  min_extent: float = 1.0) -> BBox:
    x_loc, y_loc = location_coord(row, col, grid, patch_size)
    l, t, r, b = (float(v) for v in offsets[row, col])
    w = max(l + r, min_extent)
    h = max(t + b, min_extent)
    return BBox(cx=x_loc + (r - l) / 2, cy=y_loc + (b - t) / 2, w=w, h=h)


def encode_offsets(box: BBox, row: int, col: int, grid: Tuple[int, int],
                   patch_size: int) -> np.ndarray:
    """Inverse of decode_box_at for the location (row, col)."""
    x_loc, y_loc = location_coord(row, col, grid, patch_size)
    x1, y1, x2, y2 = box.to_xyxy()
    return np.array([x_loc - x1, y_loc - y1, x2 - x_loc, y2 - y_loc])


def refine_peak(score_map: np.ndarray, row: int, col: int,
                radius: int = 2) -> Tuple[float, float]:
    """Sub-cell peak position from the neighborhood of the argmax.

    Weighted centroid after subtracting the local pedestal; a lone spike
    stays on its cell, a blob spread over neighboring cells lands on its
    center of mass.
    """
    sm = np.asarray(score_map, dtype=np.float64)
    gh, gw = sm.shape
    r0, r1 = max(0, row - radius), min(gh, row + radius + 1)
    c0, c1 = max(0, col - radius), min(gw, col + radius + 1)
    win = sm[r0:r1, c0:c1] - sm[r0:r1, c0:c1].min()
    acc = float(win.sum())
    if acc <= 0.0:
        return float(row), float(col)
    rows_idx, cols_idx = np.meshgrid(np.arange(r0, r1), np.arange(c0, c1),
                                     indexing="ij")
    return (float((win * rows_idx).sum() / acc),
            float((win * cols_idx).sum() / acc))


def window_penalty(score_map: np.ndarray, lam: float) -> np.ndarray:
    """Convex blend with a centered Hann window normalized to peak 1."""
    if not 0 <= lam <= 1:
        raise ValueError(f"window weight {lam} outside [0, 1]")
    score_map = np.asarray(score_map, dtype=np.float64)
    if score_map.ndim != 2:
        raise ShapeError("score map must be 2-d")
    hann = np.outer(np.hanning(score_map.shape[0]),
                    np.hanning(score_map.shape[1]))
    peak = hann.max()
    hann = hann / peak if peak > 0 else np.ones_like(hann)
    return (1.0 - lam) * score_map + lam * hann


# ---------------------------------------------------------------------------
# Tracker state and loop
# ---------------------------------------------------------------------------

@dataclass
class TrackState:
    cfg: TrackerConfig
    box: BBox
    t: int
    collection: ap.AppearanceCollection
    policy: ap.UpdatePolicy
    head: HeadWeights
    pe_z: object
    pe_x: object
    weights: mtt.MttWeights
    extractor: object
    telemetry: List[dict] = field(default_factory=list)
    _enc_cache: Dict[int, tuple] = field(default_factory=dict)

    def encoded_views(self) -> mtt.EncodedCollection:
        views = ap.collection_views(self.collection)
        if len(views) < self.cfg.groups:
            views.extend([views[0]] * (self.cfg.groups - len(views)))
        # cache entries keep a reference to the view array itself: id() is
        # only unique among live objects, and an evicted template's id can
        # be recycled for a freshly admitted one
        cache = {}
        toks = []
        for v in views:
            key = id(v)
            hit = cache.get(key)
            if hit is None:
                hit = self._enc_cache.get(key)
            if hit is None or hit[0] is not v:
                hit = (v, mtt.encode_template(v, self.pe_z,
                                              self.weights.encoder,
                                              self.cfg.depth))
            cache[key] = hit
            toks.append(hit[1])
        self._enc_cache = cache
        return mtt.EncodedCollection(toks)


def _search_window_scale(cfg: TrackerConfig) -> float:
    return cfg.search_patch / cfg.template_patch


def _template_candidate(frame, box, cfg, extractor):
    patch, _ = _crop_geom(frame, box, cfg.context_amount, cfg.template_patch)
    return patch, extractor.extract(patch)


def _augmented_frames(frame, gt_box: BBox, cfg: TrackerConfig, count: int):
    """Frame 0 plus synthetic rehearsal frames for the head fit.

    Each copy replaces the whole scene with fresh smooth noise and gives
    the target region yet another texture.  On one real frame any static
    scene detail predicts the target position as well as the true match
    response does; randomizing both scene and target per sample leaves
    "this location matches the current template" as the only predictor
    that survives across the set.
    """
    out = [frame]
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xA6]))
    fh, fw = frame.shape
    x1, y1, x2, y2 = (int(round(v)) for v in gt_box.to_xyxy())
    x1, y1 = max(x1, 0), max(y1, 0)
    x2, y2 = min(x2, fw), min(y2, fh)
    h, w = y2 - y1, x2 - x1
    if h < 2 or w < 2:
        return out
    beta = cfg.head_aug_strength
    for _ in range(count):
        bg_cells = max(4, min(fh, fw) // 8)
        noisy = bilinear_resize(rng.uniform(0.0, 255.0, size=(bg_cells, bg_cells)),
                                fh, fw)
        cells = max(3, min(h, w) // 4)
        fieldv = bilinear_resize(rng.uniform(0.0, 255.0, size=(cells, cells)),
                                 h, w)
        noisy[y1:y2, x1:x2] = (1 - beta) * frame[y1:y2, x1:x2] + beta * fieldv
        out.append(noisy)
    return out


def _fit_head(frame, gt_box: BBox, cfg: TrackerConfig, weights, extractor,
              pe_z, pe_x, z_feats) -> HeadWeights:
    """Ridge-fit the classification and box heads on frame 0.

    Three sample families, each removing one shortcut the ridge would
    otherwise take.  Augmented samples swap new texture into the target
    box and replace the whole scene, so neither frame-0 texture nor any
    static scene detail predicts the label.  Shifted crops of the real
    frame move the target (and every background cell) across grid phases,
    so the positional encoding of a permanently centered target stops
    working and off-phase background cells get pinned to the negative
    label.  What survives is the template-match response wherever the
    target happens to sit.

    The box head is a second ridge on the same decoded rows: cells near
    the target regress their own (l, t, r, b) distances to the box edges.
    The same phase coverage matters even more here, the sub-cell part of
    the answer is exactly what varies across the shifts.

    The classification ridge sees only the even meter lanes, not the full
    decoded row.  Content channels carry enough frame-0 coincidence to fit
    the Gaussian a second way, and those fits produce confident false
    peaks as soon as the crop geometry leaves the fit distribution; the
    meters are the one feature family that stays calibrated across the
    whole grid.  The box ridge keeps the full row: it is only ever read
    out at the winning cell, where the features are target texture and
    the fit stays in distribution, and the extra channels noticeably
    sharpen the sub-cell placement.
    """
    z_tok = mtt.encode_template(z_feats, pe_z, weights.encoder, cfg.depth)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x0FF5]))
    g = cfg.search_grid
    _, geom0 = _crop_geom(frame, gt_box, cfg.context_amount,
                          cfg.search_patch, _search_window_scale(cfg))
    lim = 0.25 * geom0.side

    def shifted():
        return BBox(gt_box.cx + rng.uniform(-lim, lim),
                    gt_box.cy + rng.uniform(-lim, lim), gt_box.w, gt_box.h)

    base = [z_tok] * cfg.groups
    samples = [(frame, gt_box, base)]
    samples += [(frame, shifted(), base) for _ in range(cfg.head_real_shifts)]
    for fr in _augmented_frames(frame, gt_box, cfg,
                                cfg.head_augmentations)[1:]:
        tpatch, _ = _crop_geom(fr, gt_box, cfg.context_amount,
                               cfg.template_patch)
        a_tok = mtt.encode_template(extractor.extract(tpatch), pe_z,
                                    weights.encoder, cfg.depth)
        samples.append((fr, shifted(), [z_tok] + [a_tok] * (cfg.groups - 1)))

    rows, labels = [], []
    reg_rows, reg_targets = [], []
    grid2 = (g, g)
    for fr, center, toks in samples:
        patch, geom = _crop_geom(fr, center, cfg.context_amount,
                                 cfg.search_patch, _search_window_scale(cfg))
        f_x = extractor.extract(patch)
        x_dec = mtt.decode(f_x, pe_x, mtt.EncodedCollection(toks),
                           weights.decoder, cfg.depth)
        dec = np.asarray(x_dec, dtype=np.float64)
        rows.append(dec)

        cx_p = _frame_to_patch(gt_box.cx, geom.x0, geom)
        cy_p = _frame_to_patch(gt_box.cy, geom.y0, geom)
        xs, ys = np.meshgrid(
            (np.arange(g) + 0.5) * cfg.search_patch / g,
            (np.arange(g) + 0.5) * cfg.search_patch / g)
        d2 = (xs - cx_p) ** 2 + (ys - cy_p) ** 2
        scale = geom.out / geom.side
        sigma = max(math.sqrt(gt_box.w * scale * gt_box.h * scale) / 2.0, 1.0)
        labels.append((-3.0 + 6.0 * np.exp(-d2 / (2 * sigma * sigma))).reshape(-1))

        # offsets are only ever decoded at the winning cell, so the
        # regression is fit on cells the argmax can actually land on
        x1_p = _frame_to_patch(gt_box.cx - gt_box.w / 2, geom.x0, geom)
        y1_p = _frame_to_patch(gt_box.cy - gt_box.h / 2, geom.y0, geom)
        box_p = BBox(cx=cx_p, cy=cy_p, w=2 * (cx_p - x1_p),
                     h=2 * (cy_p - y1_p))
        near = np.flatnonzero(d2.reshape(-1) <= sigma * sigma)
        for idx in near:
            reg_rows.append(dec[idx])
            reg_targets.append(encode_offsets(box_p, idx // g, idx % g,
                                              grid2, cfg.search_patch))

    lanes = mtt.meter_lanes(cfg.channels, cfg.heads)
    even = list(lanes[0::mtt.METERS_PER_HEAD])
    x = np.concatenate(rows, axis=0)
    y = np.concatenate(labels)
    n, c = x.shape
    xe = x[:, even]
    xa = np.concatenate([xe, np.ones((n, 1))], axis=1)
    ne = xe.shape[1]
    alpha = cfg.head_ridge * n
    a = xa.T @ xa + alpha * np.eye(ne + 1)
    sol = np.linalg.solve(a, xa.T @ y)

    # ridge shrinkage plus class imbalance compresses the logits; an
    # affine recalibration (order-preserving) pins the training peak near
    # +2 and the background near -2 so sigmoid scores span a usable range
    z = xa @ sol
    peak = float(z.max())
    floor = float(z[y < 0].mean()) if np.any(y < 0) else float(z.min())
    spread = peak - floor
    if spread > 1e-9:
        a_cal = 2.0 * cfg.cal_span / spread
        b_cal = cfg.cal_span - a_cal * peak
    else:
        a_cal, b_cal = 1.0, 0.0
    w_cls = np.zeros(c)
    w_cls[even] = a_cal * sol[:ne]

    scale0 = geom0.out / geom0.side
    w_p, h_p = gt_box.w * scale0, gt_box.h * scale0
    w_reg = np.zeros((c, 4))
    b_reg = np.array([w_p / 2, h_p / 2, w_p / 2, h_p / 2])
    if len(reg_rows) > 4:
        xr = np.asarray(reg_rows)
        yr = np.asarray(reg_targets)
        xra = np.concatenate([xr, np.ones((len(xr), 1))], axis=1)
        ar = xra.T @ xra + cfg.head_ridge * len(xr) * np.eye(c + 1)
        sol_r = np.linalg.solve(ar, xra.T @ yr)
        w_reg, b_reg = sol_r[:c], sol_r[c]
    return HeadWeights(w_cls=w_cls, b_cls=float(a_cal * sol[ne] + b_cal),
                       w_reg=w_reg, b_reg=b_reg)


def _load_or_init_weights(cfg: TrackerConfig) -> mtt.MttWeights:
    if cfg.weights:
        return mtt.load_weights(cfg.weights)
    return mtt.init_mtt_weights(cfg.seed, c=cfg.channels, heads=cfg.heads,
                                groups=cfg.groups, ffn_hidden=cfg.ffn_hidden,
                                qk_gain=cfg.qk_gain,
                                residual_gain=cfg.residual_gain,
                                template_grid=cfg.template_grid,
                                meter_gain=cfg.meter_gain,
                                dtype=cfg.dtype)


def init_track(frame: np.ndarray, gt_box: BBox, cfg: TrackerConfig) -> TrackState:
    """Build the initial state: z0 cropped and cached, head calibrated."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 2 or frame.size == 0:
        raise ShapeError("frame must be a non-empty 2-d grayscale array")
    fh, fw = frame.shape
    if not (0 <= gt_box.cx < fw and 0 <= gt_box.cy < fh):
        raise ValueError(f"box center {(gt_box.cx, gt_box.cy)} outside "
                         f"{fw}x{fh} frame")
    weights = _load_or_init_weights(cfg)
    extractor = make_extractor(cfg)
    pe_z = sinusoidal_pe(cfg.template_grid, cfg.template_grid, cfg.channels,
                         cfg.dtype)
    pe_x = sinusoidal_pe(cfg.search_grid, cfg.search_grid, cfg.channels,
                         cfg.dtype)
    patch, feats = _template_candidate(frame, gt_box, cfg, extractor)
    z0 = ap.TemplateEntry(patch=patch, features=feats, score=1.0, frame_index=0)
    collection = ap.AppearanceCollection(initial=z0, temporal=(),
                                         capacity=cfg.n_templates)
    policy = ap.UpdatePolicy(tau0=cfg.tau0, w1=cfg.w1, w2=cfg.w2,
                             tau_si=cfg.tau_si)
    head = _fit_head(frame, gt_box, cfg, weights, extractor, pe_z, pe_x, feats)
    return TrackState(cfg=cfg, box=gt_box, t=0, collection=collection,
                      policy=policy, head=head, pe_z=pe_z, pe_x=pe_x,
                      weights=weights, extractor=extractor)


def _run_discriminator(state: TrackState, frame, new_box: BBox, s_t: float):
    """Returns (decision, tau or None, ssim or None) and mutates collection."""
    cfg = state.cfg
    if cfg.n_templates == 0:
        return "none", None, None
    consts = ap.SsimConstants.from_range(cfg.dynamic_range)
    mode = cfg.ad_mode
    if mode == "full":
        patch, feats = _template_candidate(frame, new_box, cfg, state.extractor)
        res = ap.consider_update(state.t, patch, feats, s_t, state.collection,
                                 state.policy, consts)
        state.collection = res.collection
        return res.decision, res.tau, res.ssim
    if mode == "au":
        patch, feats = _template_candidate(frame, new_box, cfg, state.extractor)
        state.collection = _admit(state.collection, patch, feats, s_t, state.t)
        return ap.ADMITTED, None, None
    if mode == "rp":
        tau = ap.compute_threshold(state.t, state.policy, state.collection)
        if not s_t > tau:
            return ap.REJECTED_RELIABILITY, tau, None
        patch, feats = _template_candidate(frame, new_box, cfg, state.extractor)
        state.collection = _admit(state.collection, patch, feats, s_t, state.t)
        return ap.ADMITTED, tau, None
    # dp: diversity principle only
    patch, feats = _template_candidate(frame, new_box, cfg, state.extractor)
    sv = ap.ssim(patch, state.collection.newest().patch, consts)
    if not sv < state.policy.tau_si:
        return ap.REJECTED_DIVERSITY, None, sv
    state.collection = _admit(state.collection, patch, feats, s_t, state.t)
    return ap.ADMITTED, None, sv


def _admit(collection: ap.AppearanceCollection, patch, feats, score: float,
           t: int) -> ap.AppearanceCollection:
    entry = ap.TemplateEntry(patch=np.array(patch, dtype=np.float64),
                             features=feats, score=float(score), frame_index=t)
    temporal = collection.temporal + (entry,)
    if len(temporal) > collection.capacity:
        temporal = temporal[1:]
    return ap.AppearanceCollection(initial=collection.initial,
                                   temporal=temporal,
                                   capacity=collection.capacity)


def track_frame(state: TrackState, frame: np.ndarray, weights: mtt.MttWeights,
                extractor) -> Tuple[BBox, float, dict]:
    """Advance one frame; returns (new box, confidence, telemetry record)."""
    if state.head is None:
        raise StateError("track_frame before init_track")
    cfg = state.cfg
    frame = np.asarray(frame, dtype=np.float64)
    state.t += 1
    t = state.t

    patch, geom = _crop_geom(frame, state.box, cfg.context_amount,
                             cfg.search_patch, _search_window_scale(cfg))
    f_x = extractor.extract(patch)
    state.weights = weights
    state.extractor = extractor
    enc = state.encoded_views()
    x_dec = mtt.decode(f_x, state.pe_x, enc, weights.decoder, cfg.depth)
    grid = (cfg.search_grid, cfg.search_grid)
    score_map, offsets = predict(x_dec, state.head, grid)
    pmap = window_penalty(score_map, cfg.window_weight)
    row, col = np.unravel_index(int(np.argmax(pmap)), pmap.shape)
    s_t = float(pmap[row, col])

    # sub-cell placement comes from the regressed offsets at the winning
    # cell, not from a centroid over the score map: the score plateau is
    # as wide as the target and its mass center wanders with texture
    box_p = decode_box_at(offsets, row, col, grid, cfg.search_patch)
    scale = geom.side / geom.out
    cx = _patch_to_frame(box_p.cx, geom.x0, geom)
    cy = _patch_to_frame(box_p.cy, geom.y0, geom)
    # the crop side scales with the box, so raw size estimates feed back
    # into the next frame's geometry; damping breaks the compounding
    w = (1 - cfg.size_lr) * state.box.w + cfg.size_lr * box_p.w * scale
    h = (1 - cfg.size_lr) * state.box.h + cfg.size_lr * box_p.h * scale
    if cfg.scale_clip and cfg.scale_clip > 1:
        w = min(max(w, state.box.w / cfg.scale_clip), state.box.w * cfg.scale_clip)
        h = min(max(h, state.box.h / cfg.scale_clip), state.box.h * cfg.scale_clip)
    fh, fw = frame.shape
    cx = min(max(cx, 0.0), fw - 1.0)
    cy = min(max(cy, 0.0), fh - 1.0)
    w = min(max(w, 2.0), float(fw))
    h = min(max(h, 2.0), float(fh))
    new_box = BBox(cx, cy, w, h)
    state.box = new_box

    state.policy.record_warmup(t, s_t)
    decision, tau_v, ssim_v = _run_discriminator(state, frame, new_box, s_t)
    record = {"t": t, "box": new_box.as_list(), "score": s_t,
              "tau": tau_v, "ssim": ssim_v, "decision": decision}
    state.telemetry.append(record)
    return new_box, s_t, record


class Tracker:
    """Convenience wrapper owning config, weights, extractor, and state."""

    def __init__(self, cfg: TrackerConfig):
        self.cfg = cfg
        self.state: Optional[TrackState] = None

    def init(self, frame, gt_box: BBox) -> TrackState:
        self.state = init_track(frame, gt_box, self.cfg)
        return self.state

    def step(self, frame) -> dict:
        if self.state is None:
            raise StateError("step before init")
        _, _, record = track_frame(self.state, frame, self.state.weights,
                                   self.state.extractor)
        return record

    @property
    def telemetry(self) -> List[dict]:
        return [] if self.state is None else self.state.telemetry


def write_telemetry(path: str, records: List[dict]) -> None:
    """One JSON object per line; key order fixed for byte-stable output."""
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True))
            fh.write("\n")


def read_telemetry(path: str) -> List[dict]:
    records = []
    with open(path) as fh:
        for i, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{i + 1}: bad telemetry line: {e}")
    return records
