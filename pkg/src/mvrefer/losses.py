"""Training objectives with closed-form gradients.

All losses take probabilities ``p`` and return a :class:`LossOutput` carrying the value
and ``dloss/dp``.  Dice uses additive smoothing ``eps`` in numerator and denominator:

    dice = 1 - (2I + eps) / (U + eps),   I = sum p*g,   U = sum p + sum g

whose exact derivative is ``(2(I + eps/2) - 2 g_j (U + eps)) / (U + eps)^2``;
at ``eps = 0`` this is ``2(I - g_j U) / U^2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import rng as rng_mod

DICE_EPS = 1.0
BCE_CLIP = 1e-7


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class DiceTerms:
    I: float
    U: float
    epsilon: float


@dataclass
class LossOutput:
    value: float
    grad: np.ndarray
    terms: DiceTerms | None = None
    view_grads: dict[int, np.ndarray] = field(default_factory=dict)
    components: dict[str, float] = field(default_factory=dict)


@dataclass(frozen=True)
class ViewPartition:
    positives: tuple[int, ...]
    negatives: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "positives", tuple(int(i) for i in self.positives))
        object.__setattr__(self, "negatives", tuple(int(i) for i in self.negatives))
        if set(self.positives) & set(self.negatives):
            raise LossError("a view cannot be both positive and negative")

    @property
    def size(self) -> int:
        return len(self.positives) + len(self.negatives)

    @property
    def rho_t(self) -> float:
        return len(self.positives) / self.size if self.size else 0.0

    @property
    def w_s(self) -> float:
        return 1.0 / len(self.negatives) if self.negatives else 0.0


@dataclass(frozen=True)
class LossWeights:
    lambda_p: float = 1.0
    # weight of a global 3D Dice term; 0 in the PVSO objective, used by the baseline
    lambda_dice3d: float = 0.0

    def __post_init__(self):
        if self.lambda_p < 0 or self.lambda_dice3d < 0:
            raise LossError("loss weights must be non-negative")


def _pair(p, g):
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    g = np.asarray(g).reshape(-1)
    if p.shape != g.shape:
        raise LossError(f"length mismatch: {p.size} predictions vs {g.size} labels")
    return p, g


def dice_loss_with_grad(p, g, epsilon: float = DICE_EPS) -> LossOutput:
    p, g = _pair(p, g)
    if not np.all((g == 0) | (g == 1)):
        raise LossError("ground truth must be binary")
    g = g.astype(np.float64)
    I = float(p @ g)
    U = float(p.sum() + g.sum())
    denom = U + epsilon
    if denom == 0:
        # empty vs empty without smoothing: perfect agreement, flat loss
        return LossOutput(0.0, np.zeros_like(p), DiceTerms(I, U, epsilon))
    value = 1.0 - (2.0 * I + epsilon) / denom
    grad = (2.0 * I + epsilon - 2.0 * g * denom) / denom**2
    return LossOutput(value, grad, DiceTerms(I, U, epsilon))


def bce_loss_with_grad(p, g, clip: float = BCE_CLIP) -> LossOutput:
    """Mean binary cross-entropy on probabilities clipped to ``[clip, 1 - clip]``."""
    p, g = _pair(p, g)
    g = g.astype(np.float64)
    n = p.size
    if n == 0:
        return LossOutput(0.0, np.zeros(0))
    pc = np.clip(p, clip, 1.0 - clip)
    value = -float(np.mean(g * np.log(pc) + (1.0 - g) * np.log1p(-pc)))
    grad = (pc - g) / (pc * (1.0 - pc)) / n
    grad[(p < clip) | (p > 1.0 - clip)] = 0.0
    return LossOutput(value, grad)


def fgd_report(foreground_count: int, total_points: Sequence[int], diffuse_p: float = 0.01) -> list[dict]:
    """Foreground-gradient magnitudes of the Dice loss as the cloud grows.

    For each cloud size ``n`` two rows are produced: the zero-initialised prediction
    ``p = 0`` (``U = k``, closed form ``2/k``) and a diffuse prediction ``p = c``
    (``U = c n + k``, predicted ``~2/U``).  ``empirical_grad`` always comes from
    :func:`dice_loss_with_grad` at ``epsilon = 0``.
    """
    k = int(foreground_count)
    if k < 1:
        raise LossError("need at least one foreground point")
    rows = []
    for n in total_points:
        n = int(n)
        if n < k:
            raise LossError(f"cloud of {n} points cannot hold {k} foreground points")
        g = np.zeros(n)
        g[:k] = 1.0
        for init, c in (("zero", 0.0), ("diffuse", diffuse_p)):
            out = dice_loss_with_grad(np.full(n, c), g, epsilon=0.0)
            U = out.terms.U
            rows.append({"init": init, "n_points": n, "foreground": k, "U": U,
                         "predicted_grad": 2.0 / U, "empirical_grad": float(abs(out.grad[0]))})
    return rows


def loglog_slope(xs, ys) -> float:
    lx, ly = np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float))
    return float(np.polyfit(lx, ly, 1)[0])


def concentration_ratio(gt_mask3d, gt_masks2d, positives, p: float = 0.5,
                        epsilon: float = DICE_EPS) -> dict:
    """Per-view 2D vs global 3D Dice foreground-gradient magnitudes at uniform prediction ``p``.

    ``p = 0.5`` is what a zero-initialised linear decoder emits.
    """
    g3 = np.asarray(gt_mask3d).reshape(-1)
    out3 = dice_loss_with_grad(np.full(g3.size, p), g3, epsilon)
    grad3 = float(abs(out3.grad[np.argmax(g3)]))
    per_view = {}
    for i in positives:
        g2 = np.asarray(gt_masks2d[i]).reshape(-1)
        out2 = dice_loss_with_grad(np.full(g2.size, p), g2, epsilon)
        per_view[int(i)] = float(abs(out2.grad[np.argmax(g2)]))
    ratios = {i: v / grad3 for i, v in per_view.items()}
    return {"grad3d": grad3, "U3d": out3.terms.U, "grad2d": per_view, "ratios": ratios,
            "min_ratio": min(ratios.values()), "mean_ratio": float(np.mean(list(ratios.values())))}


def _ceil(x: float) -> int:
    return int(math.ceil(x - 1e-9))


def pvso_sample_views(partition: ViewPartition, sample_size: int, min_positive_ratio: float,
                      seed: int) -> ViewPartition:
    """Draw ``sample_size`` views with at least ``ceil(ratio * size)`` positives when available."""
    pos, neg = list(partition.positives), list(partition.negatives)
    if not pos:
        raise LossError("no target-visible view to sample")
    if not 0.0 <= min_positive_ratio <= 1.0:
        raise LossError("min_positive_ratio must lie in [0, 1]")
    if sample_size > len(pos) + len(neg):
        raise LossError(f"cannot sample {sample_size} of {len(pos) + len(neg)} views")
    gen = rng_mod.stream(seed, "sampler")
    n_pos = min(len(pos), _ceil(min_positive_ratio * sample_size))
    n_neg = sample_size - n_pos
    if n_neg > len(neg):
        n_pos += n_neg - len(neg)
        n_neg = len(neg)
    take_p = gen.choice(len(pos), size=n_pos, replace=False) if n_pos else []
    take_n = gen.choice(len(neg), size=n_neg, replace=False) if n_neg else []
    return ViewPartition(tuple(sorted(pos[i] for i in take_p)), tuple(sorted(neg[i] for i in take_n)))


def pvso_loss(pred_masks: Mapping[int, np.ndarray], gt_masks: Mapping[int, np.ndarray],
              partition: ViewPartition, epsilon: float = DICE_EPS) -> LossOutput:
    """Per-view Dice on sampled positives plus ``w_s``-normalised suppression of negatives.

    ``pred_masks`` / ``gt_masks`` map view index to arrays; ``view_grads`` of the result
    holds ``dL/dm_i`` for every sampled view, shaped like its prediction.
    """
    scale = 1.0 / (len(partition.positives) + 1)
    w_s = partition.w_s
    total = 0.0
    grads = {}
    for i in sorted(partition.positives):
        pm = np.asarray(pred_masks[i], dtype=np.float64)
        out = dice_loss_with_grad(pm, gt_masks[i], epsilon)
        total += out.value
        grads[i] = (scale * out.grad).reshape(pm.shape)
    neg_total = 0.0
    for j in sorted(partition.negatives):
        pm = np.asarray(pred_masks[j], dtype=np.float64)
        if np.any(np.asarray(gt_masks[j])):
            raise LossError(f"negative view {j} has a non-empty ground-truth mask")
        out = dice_loss_with_grad(pm, np.zeros(pm.size), epsilon)
        neg_total += out.value
        grads[j] = (scale * w_s * out.grad).reshape(pm.shape)
    value = scale * (total + w_s * neg_total)
    return LossOutput(value, np.zeros(0), view_grads=grads,
                      components={"positive": total, "negative": w_s * neg_total})


def total_loss(pred_mask3d, gt_mask3d, pvso: LossOutput | None, weights: LossWeights,
               epsilon: float = DICE_EPS) -> LossOutput:
    """``BCE(3D) + lambda_p * PVSO`` (+ optional 3D Dice); gradients stay per pathway.

    ``grad`` is with respect to the 3D point probabilities, ``view_grads`` with respect
    to the per-view masks fed to :func:`pvso_loss`.
    """
    bce = bce_loss_with_grad(pred_mask3d, gt_mask3d)
    value = bce.value
    grad = bce.grad.copy()
    comps = {"bce": bce.value, "pvso": 0.0, "dice3d": 0.0}
    if weights.lambda_dice3d > 0:
        d3 = dice_loss_with_grad(pred_mask3d, gt_mask3d, epsilon)
        value += weights.lambda_dice3d * d3.value
        grad += weights.lambda_dice3d * d3.grad
        comps["dice3d"] = d3.value
    view_grads = {}
    if pvso is not None and weights.lambda_p > 0:
        value += weights.lambda_p * pvso.value
        view_grads = {i: weights.lambda_p * g for i, g in pvso.view_grads.items()}
        comps["pvso"] = pvso.value
    comps["total"] = value
    return LossOutput(value, grad, view_grads=view_grads, components=comps)
