"""Benchmark protocol (view sampling, visibility validation, splits) and metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import rng as rng_mod
from .geometry import BINARY, Mask2D, Mask3D, reproject_mask

HARD_RATIO = 0.05
ACC_THRESHOLDS = (0.25, 0.5)
SPLITS = ("hard", "easy", "unique", "multiple", "overall")
METRICS = ("miou_global", "miou_view", "miou_pos", "miou_neg")


class ProtocolError(ValueError):
    pass


def sample_views_uniform(total_frames: int, n: int) -> list[int]:
    if total_frames < n:
        raise ProtocolError(f"cannot pick {n} frames from {total_frames}")
    return [i * total_frames // n for i in range(n)]


def visibility_validation(selected: Sequence[int], visibility: Sequence[bool], seed: int) -> list[int]:
    """Guarantee one target-visible frame by swapping out one no-target frame if needed."""
    selected = list(selected)
    visibility = list(map(bool, visibility))
    if not any(visibility):
        raise ProtocolError("target is not visible in any frame")
    if any(visibility[i] for i in selected):
        return selected
    gen = rng_mod.stream(seed, "visibility")
    slot = int(gen.integers(len(selected)))
    candidates = [i for i, v in enumerate(visibility) if v]
    selected[slot] = candidates[int(gen.integers(len(candidates)))]
    return selected


def view_ratios(sample) -> list[float]:
    return [float(m.values.sum()) / m.values.size for m in sample.gt_masks2d]


def classify_difficulty(sample) -> str:
    ratios = view_ratios(sample)
    visible = [ratios[i] for i in sample.partition.positives]
    if not visible:
        raise ProtocolError("sample has no target-visible view")
    return "easy" if max(visible) >= HARD_RATIO else "hard"


def classify_uniqueness(sample) -> str:
    shape = sample.target.shape
    same = sum(1 for o in sample.objects if o.shape == shape)
    return "unique" if same == 1 else "multiple"


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """IoU of two binary masks; two empty masks score 1."""
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ProtocolError(f"shape mismatch {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


@dataclass(frozen=True)
class SampleMetrics:
    sample_id: str
    miou_global: float
    miou_view: float
    miou_pos: float
    miou_neg: float | None
    view_ious: tuple[float, ...]


def _as_binary3d(pred, n: int) -> Mask3D:
    if isinstance(pred, Mask3D):
        mask = pred.binarize()
    else:
        arr = np.asarray(pred, dtype=np.float64).reshape(-1)
        mask = Mask3D((arr >= 0.5).astype(np.uint8), BINARY)
    if len(mask) != n:
        raise ProtocolError(f"prediction has {len(mask)} points, cloud has {n}")
    return mask


def evaluate_sample(pred_mask3d, sample) -> SampleMetrics:
    """Global 3D IoU plus per-view IoUs of the reprojected masks."""
    pred = _as_binary3d(pred_mask3d, len(sample.cloud))
    glob = iou(pred.values, sample.gt_mask3d.values)
    ious = []
    for v in sample.views:
        p2 = reproject_mask(pred, sample.cloud, v.intrinsics, v.pose, v.depth, sample.tau)
        g2 = reproject_mask(sample.gt_mask3d, sample.cloud, v.intrinsics, v.pose, v.depth, sample.tau)
        ious.append(iou(p2.values, g2.values))
    pos, neg = sample.partition.positives, sample.partition.negatives
    return SampleMetrics(
        sample.sample_id, glob, float(np.mean(ious)),
        float(np.mean([ious[i] for i in pos])) if pos else 0.0,
        float(np.mean([ious[i] for i in neg])) if neg else None,
        tuple(ious))


def acc_at_threshold(ious: Sequence[float], threshold: float) -> float:
    if len(ious) == 0:
        raise ProtocolError("empty IoU list")
    if not 0 < threshold < 1:
        raise ProtocolError("threshold must lie in (0, 1)")
    return 100.0 * sum(1 for x in ious if x >= threshold) / len(ious)


@dataclass
class SplitReport:
    count: int
    miou_global: float | None
    miou_view: float | None
    miou_pos: float | None
    miou_neg: float | None
    acc_at: dict[float, float | None]

    def as_row(self) -> dict:
        row = {"count": self.count}
        for m in METRICS:
            row[m] = getattr(self, m)
        for t in ACC_THRESHOLDS:
            row[f"acc@{int(round(t * 100))}"] = self.acc_at.get(t)
        return row


@dataclass
class MetricsReport:
    splits: dict[str, SplitReport]
    per_sample: list[SampleMetrics] = field(default_factory=list)

    def __getattr__(self, name):
        if name in METRICS:
            return getattr(self.splits["overall"], name)
        raise AttributeError(name)

    @property
    def acc_at(self) -> dict[float, float | None]:
        return self.splits["overall"].acc_at

    def tallies(self) -> dict[str, int]:
        return {s: r.count for s, r in self.splits.items()}

    def rows(self) -> list[dict]:
        return [{"split": s, **self.splits[s].as_row()} for s in SPLITS]

    def to_csv(self) -> str:
        rows = self.rows()
        cols = list(rows[0].keys())
        lines = [",".join(cols)]
        for r in rows:
            lines.append(",".join(_fmt(r[c]) for c in cols))
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        lines = []
        for r in self.rows():
            parts = [f"{k}={_fmt(v)}" for k, v in r.items() if k != "split"]
            lines.append(f"[{r['split']}] " + " ".join(parts))
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if v is None:
        return "nan"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def _aggregate(items: list[SampleMetrics]) -> SplitReport:
    if not items:
        return SplitReport(0, None, None, None, None, {t: None for t in ACC_THRESHOLDS})
    globs = [m.miou_global for m in items]
    negs = [m.miou_neg for m in items if m.miou_neg is not None]
    return SplitReport(
        len(items),
        100.0 * math.fsum(globs) / len(items),
        100.0 * math.fsum(m.miou_view for m in items) / len(items),
        100.0 * math.fsum(m.miou_pos for m in items) / len(items),
        100.0 * math.fsum(negs) / len(negs) if negs else None,
        {t: acc_at_threshold(globs, t) for t in ACC_THRESHOLDS},
    )


@dataclass(frozen=True)
class BenchmarkSample:
    sample: object
    difficulty: str
    uniqueness: str

    @property
    def sample_id(self) -> str:
        return self.sample.sample_id

    @property
    def selected_views(self) -> tuple[int, ...]:
        return self.sample.frame_indices

    @classmethod
    def wrap(cls, sample) -> "BenchmarkSample":
        if not sample.partition.positives:
            raise ProtocolError(f"sample {sample.sample_id} has no target-visible view")
        return cls(sample, classify_difficulty(sample), classify_uniqueness(sample))


def evaluate_suite(predictions: Mapping[str, np.ndarray], samples: Iterable,
                   metrics_fn=evaluate_sample) -> MetricsReport:
    """Aggregate per-sample metrics into Hard/Easy/Unique/Multiple/Overall splits.

    ``samples`` may be ReferringSamples or BenchmarkSamples; ``predictions`` maps
    sample id to per-point probabilities.
    """
    by_split = {s: [] for s in SPLITS}
    per_sample = []
    for item in samples:
        bench = item if isinstance(item, BenchmarkSample) else BenchmarkSample.wrap(item)
        sid = bench.sample_id
        if sid not in predictions:
            raise ProtocolError(f"missing prediction for sample {sid!r}")
        m = metrics_fn(predictions[sid], bench.sample)
        per_sample.append(m)
        for s in (bench.difficulty, bench.uniqueness, "overall"):
            by_split[s].append(m)
    return MetricsReport({s: _aggregate(by_split[s]) for s in SPLITS}, per_sample)
