"""Glue shared by the CLI and the acceptance suite: suites, training runs, reports."""

from __future__ import annotations

import dataclasses
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Iterable, Sequence

import numpy as np

from . import benchmark, scenes
from .losses import concentration_ratio
from .model import ModelConfig, ToyModel
from .training import TrainConfig, fit

FGD_MIN_POINTS = 100_000
FGD_MAX_FOREGROUND = 0.02


def ordered_map(fn: Callable, items: Iterable, workers: int = 1) -> list:
    """``map`` with an optional process pool; results always come back in input order."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _make_sample(job):
    spec, index, seed = job
    return scenes.dataset_sample(spec, index, seed)


def make_suite(spec: scenes.SceneSpec, count: int, seed: int, workers: int = 1) -> list:
    return ordered_map(_make_sample, [(spec, i, seed) for i in range(count)], workers)


def model_config_for(sample, **overrides) -> ModelConfig:
    base = {"num_views": sample.num_views, "image_size": tuple(sample.views[0].depth.shape)}
    base.update(overrides)
    return ModelConfig(**base)


def train_model(samples: Sequence, train_config: TrainConfig, seed: int,
                model_overrides: dict | None = None, log=None):
    """Fresh model initialised from ``seed`` and fitted on ``samples``."""
    cfg = model_config_for(samples[0], **(model_overrides or {}))
    model = ToyModel(cfg, seed=seed)
    inputs = [model.prepare(s) for s in samples]
    history = fit(model, inputs, train_config, seed, log=log)
    return model, history


def predict_suite(model: ToyModel, samples: Sequence) -> dict[str, np.ndarray]:
    return {s.sample_id: model.predict(model.prepare(s)) for s in samples}


def evaluate_model(model: ToyModel, samples: Sequence) -> benchmark.MetricsReport:
    return benchmark.evaluate_suite(predict_suite(model, samples), samples)


def _ratio_job(job):
    ratio, train, test, base_config, seed, model_overrides = job
    cfg = dataclasses.replace(base_config,
                              sampler=dataclasses.replace(base_config.sampler, no_target_ratio=ratio))
    model, history = train_model(train, cfg, seed, model_overrides)
    return evaluate_model(model, test), history


def ratio_ablation(train: Sequence, test: Sequence, ratios: Sequence[float], base_config: TrainConfig,
                   seed: int, model_overrides: dict | None = None, workers: int = 1):
    """One model per no-target ratio, identical seed and config otherwise."""
    for r in ratios:
        if not 0.0 <= r <= 1.0:
            raise ValueError(f"ratio {r} outside [0, 1]")
    jobs = [(float(r), list(train), list(test), base_config, seed, model_overrides) for r in ratios]
    return ordered_map(_ratio_job, jobs, workers)


def in_fgd_regime(sample) -> bool:
    """At least 1e5 points, target at most 2% of them, peak view ratio in the 10-15% band."""
    n = sample.cloud.points.shape[0]
    frac = float(sample.gt_mask3d.values.mean())
    lo, hi = scenes.FGD_REGIME_BAND
    return n >= FGD_MIN_POINTS and frac <= FGD_MAX_FOREGROUND and lo <= scenes.peak_pixel_ratio(sample) <= hi


def find_fgd_regime_sample(seed: int = 0, limit: int = 50, spec: scenes.SceneSpec | None = None):
    spec = scenes.preset("fgd") if spec is None else spec
    for index in range(limit):
        sample = scenes.dataset_sample(spec, index, seed)
        if in_fgd_regime(sample):
            return sample
    raise scenes.SceneError(f"no FGD-regime sample among the first {limit}")


def concentration_on(sample, p: float = 0.5) -> dict:
    out = concentration_ratio(sample.gt_mask3d.values, [m.values for m in sample.gt_masks2d],
                              sample.partition.positives, p=p)
    out["n_points"] = int(sample.cloud.points.shape[0])
    out["foreground_3d"] = float(sample.gt_mask3d.values.mean())
    out["peak_ratio_2d"] = scenes.peak_pixel_ratio(sample)
    return out
