"""Appearance collection and the online update discriminator.

The collection holds one immutable initial template plus up to N temporal
templates in FIFO order.  A candidate template is admitted only when both
gates pass: the confidence score must beat an adaptive threshold
(reliability), and the candidate must be sufficiently dissimilar to the
newest resident template under SSIM (diversity).  Reliability is checked
first; rejected candidates leave the collection untouched.

Collections are immutable values: consider_update returns the successor
collection, so a trace of decisions can be replayed and audited.
"""

import json
import math
import os
from dataclasses import dataclass, field
from typing import Dict, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from . import tensorio
from .numerics import ShapeError

ADMITTED = "admitted"
REJECTED_RELIABILITY = "rejected-reliability"
REJECTED_DIVERSITY = "rejected-diversity"


class StateError(RuntimeError):
    """Raised when the policy is queried out of order (missing warmup)."""


@dataclass(frozen=True)
class SsimConstants:
    c1: float
    c2: float
    L: float

    def __post_init__(self):
        if not (self.c1 > 0 and self.c2 > 0):
            raise ValueError("SSIM stabilizers must be positive")

    @staticmethod
    def from_range(L: float = 255.0) -> "SsimConstants":
        # the original SSIM defaults: k1=0.01, k2=0.03
        return SsimConstants(c1=(0.01 * L) ** 2, c2=(0.03 * L) ** 2, L=L)


@dataclass(frozen=True)
class TemplateEntry:
    """One collection slot: raw patch, cached features, admission context."""

    patch: np.ndarray
    features: np.ndarray
    score: float
    frame_index: int

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValueError("template score must be finite")


@dataclass(frozen=True)
class AppearanceCollection:
    initial: TemplateEntry
    temporal: Tuple[TemplateEntry, ...] = ()
    capacity: int = 3

    def __post_init__(self):
        if self.capacity < 0:
            raise ValueError("capacity must be non-negative")
        if len(self.temporal) > self.capacity:
            raise ValueError(f"{len(self.temporal)} temporal entries exceed "
                             f"capacity {self.capacity}")
        idx = [e.frame_index for e in self.temporal]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError("temporal entries must have ascending frame_index")

    @property
    def n_t(self) -> int:
        return len(self.temporal)

    def temporal_scores(self) -> Tuple[float, ...]:
        return tuple(e.score for e in self.temporal)

    def newest(self) -> TemplateEntry:
        """Diversity reference: most recent temporal entry, else the initial."""
        return self.temporal[-1] if self.temporal else self.initial


@dataclass
class UpdatePolicy:
    """Adaptive-threshold parameters plus the recorded warmup scores."""

    tau0: float = 1.8
    w1: float = 0.95
    w2: float = 0.9
    tau_si: float = 0.42
    warmup_frames: int = 5
    warmup_scores: Dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        if min(self.tau0, self.w1, self.w2, self.tau_si) <= 0:
            raise ValueError("policy parameters must be positive")
        if not 0 < self.tau_si <= 1:
            raise ValueError("tau_si must lie in (0, 1]")
        if self.warmup_frames < 1:
            raise ValueError("warmup_frames must be at least 1")

    def record_warmup(self, t: int, score: float) -> None:
        if 1 <= t <= self.warmup_frames:
            self.warmup_scores[t] = float(score)


def compute_threshold(t: int, policy: UpdatePolicy,
                      collection: AppearanceCollection) -> float:
    """Adaptive admission threshold for frame t.

    tau0 during warmup; afterwards a weighted mean of the warmup scores
    while the collection is filling, and of the resident temporal scores
    once it is full.
    """
    if t <= policy.warmup_frames:
        return policy.tau0
    if len(policy.warmup_scores) < policy.warmup_frames:
        raise StateError(f"frame {t} needs all {policy.warmup_frames} warmup "
                         f"scores, have {len(policy.warmup_scores)}")
    if collection.n_t < collection.capacity:
        first = [policy.warmup_scores[i]
                 for i in range(1, policy.warmup_frames + 1)]
        return policy.w1 * (sum(first) / len(first))
    scores = collection.temporal_scores()
    if not scores:
        raise StateError("full-collection threshold undefined without "
                         "temporal entries (capacity 0)")
    return policy.w2 * (sum(scores) / len(scores))


def ssim(a: np.ndarray, b: np.ndarray, k: SsimConstants) -> float:
    """Whole-patch structural similarity with biased (1/n) moments."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"ssim: shapes {a.shape} and {b.shape} differ")
    if a.size < 2:
        raise ShapeError("ssim needs at least 2 pixels")
    mu_a = a.mean()
    mu_b = b.mean()
    da = a - mu_a
    db = b - mu_b
    var_a = np.mean(da * da)
    var_b = np.mean(db * db)
    cov = np.mean(da * db)
    num = (2.0 * mu_a * mu_b + k.c1) * (2.0 * cov + k.c2)
    den = (mu_a * mu_a + mu_b * mu_b + k.c1) * (var_a + var_b + k.c2)
    return float(num / den)


class UpdateResult(NamedTuple):
    decision: str
    tau: float
    ssim: Optional[float]
    collection: AppearanceCollection


def consider_update(t: int, patch: np.ndarray, features: np.ndarray,
                    score: float, collection: AppearanceCollection,
                    policy: UpdatePolicy,
                    constants: Optional[SsimConstants] = None) -> UpdateResult:
    """Run the dual-constraint gate and return the successor collection.

    Reliability first: a score at or below the threshold rejects without
    evaluating SSIM.  Both inequalities are strict; ties reject.  On
    admission at full capacity the oldest temporal entry is evicted.
    """
    if collection.capacity < 1:
        raise ValueError("zero-capacity collection cannot accept updates")
    if not math.isfinite(score):
        raise ValueError("candidate score must be finite")
    tau = compute_threshold(t, policy, collection)
    if not score > tau:
        return UpdateResult(REJECTED_RELIABILITY, tau, None, collection)
    if constants is None:
        constants = SsimConstants.from_range()
    sv = ssim(patch, collection.newest().patch, constants)
    if not sv < policy.tau_si:
        return UpdateResult(REJECTED_DIVERSITY, tau, sv, collection)
    entry = TemplateEntry(patch=np.array(patch, dtype=np.float64),
                          features=features, score=float(score),
                          frame_index=t)
    temporal = collection.temporal + (entry,)
    if len(temporal) > collection.capacity:
        temporal = temporal[1:]
    nxt = AppearanceCollection(initial=collection.initial, temporal=temporal,
                               capacity=collection.capacity)
    return UpdateResult(ADMITTED, tau, sv, nxt)


def collection_views(collection: AppearanceCollection) -> list:
    """Feature maps for all capacity+1 slots, initial first.

    Unfilled temporal slots replicate the initial features, so grouped
    attention always receives a full complement of inputs.
    """
    views = [collection.initial.features]
    views.extend(e.features for e in collection.temporal)
    fill = collection.capacity - collection.n_t
    views.extend([collection.initial.features] * fill)
    return views


# ---------------------------------------------------------------------------
# Snapshot IO: JSON manifest plus one tensor file per patch / feature map
# ---------------------------------------------------------------------------

SNAPSHOT_NAME = "manifest.json"
SNAPSHOT_FORMAT = "bactrack-collection"
SNAPSHOT_VERSION = 1


def save_snapshot(dirpath: str, collection: AppearanceCollection) -> None:
    os.makedirs(dirpath, exist_ok=True)
    records = []
    for i, entry in enumerate((collection.initial,) + collection.temporal):
        pf = f"entry{i}_patch.bact"
        ff = f"entry{i}_features.bact"
        tensorio.save_tensor(os.path.join(dirpath, pf), entry.patch)
        tensorio.save_tensor(os.path.join(dirpath, ff), entry.features)
        records.append({"frame_index": entry.frame_index,
                        "score": entry.score,
                        "patch-file": pf, "features-file": ff})
    manifest = {"format": SNAPSHOT_FORMAT, "version": SNAPSHOT_VERSION,
                "capacity": collection.capacity, "entries": records}
    with open(os.path.join(dirpath, SNAPSHOT_NAME), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_snapshot(dirpath: str) -> AppearanceCollection:
    path = os.path.join(dirpath, SNAPSHOT_NAME)
    try:
        with open(path) as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise tensorio.FormatError(f"unreadable snapshot manifest {path}: {e}")
    if manifest.get("format") != SNAPSHOT_FORMAT:
        raise tensorio.FormatError(f"not a collection snapshot: {path}")
    if manifest.get("version") != SNAPSHOT_VERSION:
        raise tensorio.FormatError(f"unsupported snapshot version "
                                   f"{manifest.get('version')}")
    entries = []
    for rec in manifest["entries"]:
        entries.append(TemplateEntry(
            patch=tensorio.load_tensor(os.path.join(dirpath, rec["patch-file"])),
            features=tensorio.load_tensor(os.path.join(dirpath,
                                                       rec["features-file"])),
            score=float(rec["score"]),
            frame_index=int(rec["frame_index"])))
    if not entries:
        raise tensorio.FormatError("snapshot has no entries")
    return AppearanceCollection(initial=entries[0], temporal=tuple(entries[1:]),
                                capacity=int(manifest["capacity"]))
