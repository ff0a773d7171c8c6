"""Training loop, optimizer and gradient checking for the toy model."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import rng as rng_mod
from .losses import LossWeights, ViewPartition, pvso_loss, pvso_sample_views, total_loss
from .model import SampleInputs, ToyModel


PVSO_SOURCES = ("decoder", "lifted")


class NonFiniteLoss(RuntimeError):
    def __init__(self, step: int, components: dict):
        super().__init__(f"non-finite loss at step {step}: {components}")
        self.step = step
        self.components = components


@dataclass(frozen=True)
class SamplerConfig:
    """Per-step view sampling for the per-view objective.

    ``hybrid`` draws ``round(no_target_ratio * sample_size)`` no-target views and fills
    the rest with target-visible views (as many as exist); ``random`` ignores visibility.
    """

    sample_size: int = 4
    no_target_ratio: float = 0.5
    mode: str = "hybrid"

    def __post_init__(self):
        if not 0.0 <= self.no_target_ratio <= 1.0:
            raise ValueError("no_target_ratio must lie in [0, 1]")
        if self.mode not in ("hybrid", "random"):
            raise ValueError("mode is 'hybrid' or 'random'")
        if self.sample_size < 1:
            raise ValueError("sample_size must be positive")


def sample_partition(positives, negatives, sampler: SamplerConfig, seed: int) -> ViewPartition:
    full = ViewPartition(positives, negatives)
    n_views = full.size
    size = min(sampler.sample_size, n_views)
    if sampler.mode == "random":
        gen = rng_mod.stream(seed, "random-views")
        chosen = set(gen.choice(n_views, size=size, replace=False).tolist())
        everything = sorted(full.positives + full.negatives)
        picked = [everything[i] for i in sorted(chosen)]
        pos = tuple(i for i in picked if i in full.positives)
        neg = tuple(i for i in picked if i in full.negatives)
        if not pos:
            # keep at least one positive so the objective stays defined
            pos = (full.positives[int(gen.integers(len(full.positives)))],)
        return ViewPartition(pos, neg)
    n_neg = min(int(round(sampler.no_target_ratio * size)), size - 1, len(full.negatives))
    n_pos = min(len(full.positives), size - n_neg)
    total = n_pos + n_neg
    return pvso_sample_views(full, total, n_pos / total, seed)


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for k in sorted(grads):
            g = grads[k]
            m = self.m.get(k, np.zeros_like(g))
            v = self.v.get(k, np.zeros_like(g))
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            params[k] = params[k] - self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


def loss_and_grads(model: ToyModel, inputs: SampleInputs, weights: LossWeights,
                   partition: ViewPartition | None, F_geo=None, with_grads: bool = True,
                   pvso_source: str = "decoder"):
    """Full forward, lifted 3D loss plus per-view loss, and backward.

    ``pvso_source`` picks the per-view masks: the decoder outputs themselves
    (``decoder``) or reprojections of the lifted 3D probabilities (``lifted``).
    """
    pix, cache = model.forward(inputs, F_geo)
    p3 = model.lift(inputs, pix)
    pvso = None
    if partition is not None and weights.lambda_p > 0:
        views = partition.positives + partition.negatives
        if pvso_source == "decoder":
            pred = {i: pix[i].reshape(-1) for i in views}
        else:
            pred = {i: inputs.reproject[i] @ p3 for i in views}
        gt = {i: inputs.gt2d[i] for i in views}
        pvso = pvso_loss(pred, gt, partition)
    out = total_loss(p3, inputs.gt3d, pvso, weights)
    if not with_grads:
        return out, None
    dp3 = out.grad.copy()
    direct = np.zeros(pix.size)
    if pvso_source == "decoder":
        npix = pix[0].size
        for i, g in out.view_grads.items():
            direct[i * npix:(i + 1) * npix] += g.reshape(-1)
    else:
        for i, g in out.view_grads.items():
            dp3 += inputs.reproject[i].T @ g
    dpix = (inputs.lift.T @ dp3 + direct).reshape(pix.shape)
    return out, model.backward(cache, dpix)


def train_step(model: ToyModel, inputs: SampleInputs, weights: LossWeights, sampler: SamplerConfig,
               opt: Adam, seed: int, step: int = 0, pvso_source: str = "decoder") -> dict:
    """One Adam update on one sample; returns the pre-update loss breakdown."""
    partition = None
    if weights.lambda_p > 0:
        partition = sample_partition(inputs.positives, inputs.negatives, sampler,
                                     int(rng_mod.stream(seed, "sampler", step).integers(2**31)))
    out, grads = loss_and_grads(model, inputs, weights, partition, pvso_source=pvso_source)
    comps = dict(out.components)
    if not all(math.isfinite(v) for v in comps.values()):
        raise NonFiniteLoss(step, comps)
    opt.step(model.params, grads)
    return comps


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    lr: float = 1e-3
    weights: LossWeights = LossWeights()
    sampler: SamplerConfig = SamplerConfig()
    pvso_source: str = "decoder"

    def __post_init__(self):
        if self.pvso_source not in PVSO_SOURCES:
            raise ValueError(f"pvso_source must be one of {PVSO_SOURCES}")
        if self.epochs < 0 or self.lr <= 0:
            raise ValueError("epochs must be >= 0 and lr > 0")


def fit(model: ToyModel, inputs: list[SampleInputs], config: TrainConfig, seed: int,
        log=None) -> list[dict]:
    """Seeded epochs over ``inputs``; returns one record per step."""
    opt = Adam(lr=config.lr)
    history = []
    step = 0
    for epoch in range(config.epochs):
        order = rng_mod.stream(seed, "order", epoch).permutation(len(inputs))
        for idx in order:
            comps = train_step(model, inputs[idx], config.weights, config.sampler, opt, seed, step,
                               config.pvso_source)
            rec = {"step": step, "epoch": epoch, "sample": inputs[idx].sample_id, **comps}
            history.append(rec)
            if log is not None:
                log(rec)
            step += 1
    return history


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_param: str
    per_param: dict[str, float]
    checked: int
    max_abs_error: float = 0.0


def relative_error(a: np.ndarray, n: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def finite_difference_check(model: ToyModel, inputs: SampleInputs, epsilon: float = 1e-4,
                            weights: LossWeights = LossWeights(), sampler: SamplerConfig = SamplerConfig(),
                            seed: int = 0, floor: float = 1e-8,
                            pvso_source: str = "decoder") -> GradCheckResult:
    """Central differences of the scalar total loss against the analytical gradient.

    Only trainable parameters have gradient slots; frozen arrays are never perturbed.
    The default step sits above the roundoff knee: entries with gradients near 1e-6 lose
    digits to cancellation at ``epsilon = 1e-5`` long before truncation matters.
    The relative error denominator is floored at ``floor`` so entries whose gradient is
    numerically zero do not divide by zero.
    """
    partition = None
    if weights.lambda_p > 0:
        partition = sample_partition(inputs.positives, inputs.negatives, sampler, seed)
    def total(with_grads):
        return loss_and_grads(model, inputs, weights, partition, with_grads=with_grads,
                              pvso_source=pvso_source)

    _, grads = total(True)
    per_param = {}
    max_abs = 0.0
    for name in sorted(grads):
        p = model.params[name]
        numeric = np.zeros_like(p)
        flat = p.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + epsilon
            up = total(False)[0].value
            flat[j] = orig - epsilon
            down = total(False)[0].value
            flat[j] = orig
            numeric.reshape(-1)[j] = (up - down) / (2 * epsilon)
        per_param[name] = float(relative_error(grads[name], numeric, floor).max())
        max_abs = max(max_abs, float(np.abs(grads[name] - numeric).max()))
    worst = max(per_param, key=per_param.get)
    return GradCheckResult(per_param[worst], worst, per_param, sum(g.size for g in grads.values()),
                           max_abs)
