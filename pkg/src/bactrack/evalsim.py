"""Synthetic sequences and one-pass-evaluation metrics.

Sequences are deterministic given their seed: a textured square target
moves over a static low-contrast background with optional appearance
drift, occlusion windows, illumination ramp, and distractor objects.
Ground truth is exact by construction (the box is derived from the
integer paste position of the target texture).

Appearance drift interpolates through an endless chain of noise textures
at a fixed rate per frame, so the initial appearance decorrelates
steadily; that is the regime where a static-template tracker decays and
an updating collection should not.
"""

import json
import math
import os
import re
from dataclasses import dataclass, field, fields
from typing import Dict, List, Optional, Sequence as Seq, Tuple

import numpy as np

from .pipeline import BBox

BG_LO, BG_HI = 110.0, 146.0
TEX_LO, TEX_HI = 30.0, 230.0
OCCLUDER_VALUE = 64.0


@dataclass(frozen=True)
class SyntheticConfig:
    frame_size: int = 160
    length: int = 60
    seed: int = 0
    target_size: int = 24
    drift_rate: float = 0.05
    velocity: Tuple[float, float] = (2.0, 1.3)
    jitter: float = 0.4
    occlusions: Tuple[Tuple[int, int, float], ...] = ()
    distractors: int = 0
    distractor_similarity: float = 0.7
    illumination_ramp: float = 0.0
    # 3 cells over a 24 px target gives ~8-16 px structure; much finer and
    # any sub-cell misalignment decorrelates the appearance completely,
    # which no tracker without subpixel features could follow
    texture_cells: int = 3

    def __post_init__(self):
        if self.length < 2:
            raise ValueError("sequence length must be at least 2")
        if self.frame_size < 32:
            raise ValueError("frame_size too small")
        if not 8 <= self.target_size <= self.frame_size // 2:
            raise ValueError("target_size out of range")
        rates = (self.drift_rate, self.jitter, self.illumination_ramp,
                 *self.velocity)
        if not all(math.isfinite(r) for r in rates):
            raise ValueError("rates must be finite")
        for s, e, cov in self.occlusions:
            if not (0 <= s <= e and 0 <= cov <= 1):
                raise ValueError(f"bad occlusion window {(s, e, cov)}")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["velocity"] = list(self.velocity)
        d["occlusions"] = [list(o) for o in self.occlusions]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        known = {f.name for f in fields(cls)}
        bad = sorted(set(d) - known)
        if bad:
            raise ValueError(f"unknown sequence config keys: {', '.join(bad)}")
        d = dict(d)
        if "velocity" in d:
            d["velocity"] = tuple(d["velocity"])
        if "occlusions" in d:
            d["occlusions"] = tuple(tuple(o) for o in d["occlusions"])
        return cls(**d)


@dataclass
class Sequence:
    frames: List[np.ndarray]
    boxes: List[BBox]
    meta: Dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.frames) != len(self.boxes):
            raise ValueError("one ground-truth box per frame required")

    def __len__(self):
        return len(self.frames)


def _smooth_noise(rng, cells: int, out: int, lo: float, hi: float) -> np.ndarray:
    """Coarse uniform noise bilinearly upsampled to out x out."""
    coarse = rng.uniform(lo, hi, size=(cells, cells))
    if cells == out:
        return coarse
    xs = np.linspace(0, cells - 1, out)
    i0 = np.clip(xs.astype(int), 0, cells - 2)
    frac = xs - i0
    rows = coarse[i0] * (1 - frac)[:, None] + coarse[i0 + 1] * frac[:, None]
    cols = rows[:, i0] * (1 - frac)[None, :] + rows[:, i0 + 1] * frac[None, :]
    return cols


class _Bouncer:
    """Constant-velocity point with jitter, reflecting off the walls."""

    def __init__(self, pos, vel, lo: float, hi: float, jitter: float, rng):
        self.x, self.y = float(pos[0]), float(pos[1])
        self.vx, self.vy = float(vel[0]), float(vel[1])
        self.lo, self.hi = lo, hi
        self.jitter = jitter
        self.rng = rng

    def step(self):
        jx = jy = 0.0
        if self.jitter > 0:
            jx, jy = self.rng.normal(0.0, self.jitter, size=2)
        self.x += self.vx + jx
        self.y += self.vy + jy
        for name, v in (("x", "vx"), ("y", "vy")):
            p = getattr(self, name)
            if p < self.lo:
                setattr(self, name, 2 * self.lo - p)
                setattr(self, v, abs(getattr(self, v)))
            elif p > self.hi:
                setattr(self, name, 2 * self.hi - p)
                setattr(self, v, -abs(getattr(self, v)))


def _paste(frame: np.ndarray, tex: np.ndarray, cx: float, cy: float) -> BBox:
    s = tex.shape[0]
    fs = frame.shape[0]
    ix = int(round(cx - s / 2))
    iy = int(round(cy - s / 2))
    ix = min(max(ix, 0), fs - s)
    iy = min(max(iy, 0), fs - s)
    frame[iy:iy + s, ix:ix + s] = tex
    return BBox(cx=ix + (s - 1) / 2.0, cy=iy + (s - 1) / 2.0, w=float(s),
                h=float(s))


def generate_sequence(cfg: SyntheticConfig) -> Sequence:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5E0]))
    fs, ts = cfg.frame_size, cfg.target_size
    background = _smooth_noise(rng, max(4, cfg.texture_cells), fs, BG_LO, BG_HI)

    # texture chain long enough for theta = drift_rate * (length-1)
    n_tex = int(math.floor(cfg.drift_rate * (cfg.length - 1))) + 2
    textures = [_smooth_noise(rng, cfg.texture_cells, ts, TEX_LO, TEX_HI)
                for _ in range(n_tex)]

    margin = ts / 2 + 2
    start = (fs / 2, fs / 2)
    target = _Bouncer(start, cfg.velocity, margin, fs - margin, cfg.jitter, rng)

    dists = []
    for _ in range(cfg.distractors):
        pos = rng.uniform(margin, fs - margin, size=2)
        vel = rng.uniform(-3, 3, size=2)
        a = cfg.distractor_similarity
        tex = a * textures[0] + (1 - a) * _smooth_noise(rng, cfg.texture_cells,
                                                        ts, TEX_LO, TEX_HI)
        dists.append((_Bouncer(pos, vel, margin, fs - margin, cfg.jitter, rng),
                      tex))

    frames, boxes = [], []
    for t in range(cfg.length):
        frame = background.copy()
        for b, tex in dists:
            _paste(frame, tex, b.x, b.y)
        theta = cfg.drift_rate * t
        k = int(math.floor(theta))
        frac = theta - k
        tex_t = (1 - frac) * textures[k] + frac * textures[k + 1]
        gt = _paste(frame, tex_t, target.x, target.y)
        for s0, e0, cov in cfg.occlusions:
            if s0 <= t <= e0 and cov > 0:
                side = int(round(ts * math.sqrt(cov)))
                side = min(max(side, 1), ts)
                occ = np.full((side, side), OCCLUDER_VALUE)
                _paste(frame, occ, gt.cx, gt.cy)
        if cfg.illumination_ramp:
            frame = frame + cfg.illumination_ramp * t
        frames.append(np.clip(np.round(frame), 0, 255).astype(np.uint8))
        boxes.append(gt)
        target.step()
        for b, _ in dists:
            b.step()
    return Sequence(frames=frames, boxes=boxes,
                    meta={"config": cfg.to_dict()})


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def iou(a: BBox, b: BBox) -> float:
    ax1, ay1, ax2, ay2 = a.to_xyxy()
    bx1, by1, bx2, by2 = b.to_xyxy()
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.w * a.h + b.w * b.h - inter
    return float(inter / union)


def center_error(a: BBox, b: BBox) -> float:
    return math.hypot(a.cx - b.cx, a.cy - b.cy)


SUCCESS_THRESHOLDS = np.linspace(0.0, 1.0, 21)
PRECISION_PX = 20.0


def ope_metrics(predicted: Seq, truth: Seq) -> dict:
    """Success AUC over the 21-point IoU grid and precision at 20 px."""
    if len(predicted) != len(truth):
        raise ValueError(f"{len(predicted)} predictions vs {len(truth)} "
                         f"ground-truth boxes")
    if not predicted:
        raise ValueError("need at least one frame")
    ious = np.array([iou(p, t) for p, t in zip(predicted, truth)])
    ces = np.array([center_error(p, t) for p, t in zip(predicted, truth)])
    success = [(ious > thr).mean() for thr in SUCCESS_THRESHOLDS]
    return {"success_auc": float(np.mean(success)),
            "precision_at_20": float((ces <= PRECISION_PX).mean())}


# ---------------------------------------------------------------------------
# Sequence IO: PGM frames, ground-truth text, JSON manifest
# ---------------------------------------------------------------------------

MANIFEST_NAME = "manifest.json"


def write_pgm(path: str, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 2:
        raise ValueError("PGM writer expects a 2-d uint8 array")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(img.tobytes())


def read_pgm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if not m:
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    pixels = data[m.end():]
    if len(pixels) != w * h:
        raise ValueError(f"{path}: expected {w * h} pixels, got {len(pixels)}")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w)


def save_sequence(dirpath: str, seq: Sequence) -> None:
    os.makedirs(dirpath, exist_ok=True)
    names = []
    for i, frame in enumerate(seq.frames):
        name = f"frame_{i:04d}.pgm"
        write_pgm(os.path.join(dirpath, name), frame)
        names.append(name)
    gt_name = "groundtruth.txt"
    with open(os.path.join(dirpath, gt_name), "w") as fh:
        for b in seq.boxes:
            fh.write(f"{b.cx!r},{b.cy!r},{b.w!r},{b.h!r}\n")
    manifest = {"frames": names, "groundtruth": gt_name, "meta": seq.meta}
    with open(os.path.join(dirpath, MANIFEST_NAME), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_groundtruth(path: str) -> List[BBox]:
    boxes = []
    with open(path) as fh:
        for i, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise ValueError(f"{path}:{i + 1}: expected cx,cy,w,h")
            try:
                cx, cy, w, h = (float(p) for p in parts)
            except ValueError:
                raise ValueError(f"{path}:{i + 1}: non-numeric box")
            boxes.append(BBox(cx, cy, w, h))
    if not boxes:
        raise ValueError(f"{path}: no ground-truth boxes")
    return boxes


def load_sequence(dirpath: str) -> Sequence:
    path = os.path.join(dirpath, MANIFEST_NAME)
    try:
        with open(path) as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise ValueError(f"unreadable sequence manifest {path}: {e}")
    for key in ("frames", "groundtruth"):
        if key not in manifest:
            raise ValueError(f"{path}: manifest missing {key!r}")
    frames = [read_pgm(os.path.join(dirpath, n)) for n in manifest["frames"]]
    boxes = read_groundtruth(os.path.join(dirpath, manifest["groundtruth"]))
    if len(boxes) != len(frames):
        raise ValueError(f"{path}: {len(frames)} frames but {len(boxes)} "
                         f"ground-truth boxes")
    return Sequence(frames=frames, boxes=boxes, meta=manifest.get("meta", {}))
