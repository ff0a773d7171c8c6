"""``mvrefer`` command-line entry point.

Every command takes ``--seed``, ``--config <json>`` and ``--out <dir>``.  Settings
resolve as built-in defaults < config file < explicit flags, and the resolved set is
written to ``<out>/run_config.json``.  Failures write ``<out>/error.json`` and exit 1.
"""

from __future__ import annotations

import argparse
import csv
import io as _stdio
import json
import sys
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, benchmark, experiment, scenes
from . import io as fio
from .losses import LossWeights, fgd_report, loglog_slope
from .model import ModelConfig, ToyModel
from .training import NonFiniteLoss, SamplerConfig, TrainConfig, fit

DEFAULT_RATIOS = (0.0, 0.25, 0.5, 0.75)
DEFAULT_SIZES = (100, 10_000, 1_000_000)
DEFAULT_CLOUD_SIZES = (10_000, 100_000, 1_000_000)

TRAIN_DEFAULTS = {
    "epochs": 30, "lr": 1e-3, "lambda_p": 1.0, "lambda_dice3d": 0.0,
    "sample_size": 4, "no_target_ratio": 0.5, "sampler_mode": "hybrid", "pvso_source": "decoder",
}


class CLIError(Exception):
    pass


@dataclass
class RunConfig:
    command: str
    seed: int
    params: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"format": "mvrefer-run-config", "version": fio.VERSION, "mvrefer_version": __version__,
                "command": self.command, "seed": self.seed, "params": self.params}


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CLIError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise CLIError("config file must hold a JSON object")
    return cfg


def _pick(flag, cfg: dict, key: str, default):
    if flag is not None:
        return flag
    return cfg.get(key, default)


def _train_settings(args, cfg: dict) -> dict:
    section = dict(TRAIN_DEFAULTS)
    section.update(cfg.get("train", {}))
    unknown = set(section) - set(TRAIN_DEFAULTS)
    if unknown:
        raise CLIError(f"unknown train settings {sorted(unknown)}")
    for key in TRAIN_DEFAULTS:
        flag = getattr(args, key, None)
        if flag is not None:
            section[key] = flag
    return section


def _train_config(t: dict) -> TrainConfig:
    return TrainConfig(epochs=int(t["epochs"]), lr=float(t["lr"]),
                       weights=LossWeights(float(t["lambda_p"]), float(t["lambda_dice3d"])),
                       sampler=SamplerConfig(int(t["sample_size"]), float(t["no_target_ratio"]),
                                             t["sampler_mode"]),
                       pvso_source=t["pvso_source"])


def _scene_spec(args, cfg: dict) -> scenes.SceneSpec:
    name = _pick(getattr(args, "preset", None), cfg, "preset", "standard")
    spec = scenes.preset(name)
    overrides = cfg.get("scene", {})
    if overrides:
        merged = spec.to_dict()
        unknown = set(overrides) - set(merged)
        if unknown:
            raise CLIError(f"unknown scene settings {sorted(unknown)}")
        merged.update(overrides)
        spec = scenes.SceneSpec.from_dict(merged)
    return spec


def _csv(rows: list[dict], columns: list[str] | None = None) -> str:
    buf = _stdio.StringIO()
    columns = columns or list(rows[0].keys())
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("nan" if r.get(k) is None else repr(r[k]) if isinstance(r.get(k), float) else r[k])
                    for k in columns})
    return buf.getvalue()


def _write(out: Path, name: str, text: str) -> None:
    (out / name).write_text(text, encoding="utf-8")


def _load_dataset(path):
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise CLIError(f"dataset manifest {path} not found")
    return fio.load_dataset(path)


# generate-dataset ---------------------------------------------------------------

def cmd_generate_dataset(args, cfg: dict, out: Path) -> RunConfig:
    spec = _scene_spec(args, cfg)
    count = int(_pick(args.count, cfg, "count", 50))
    if count < 1:
        raise CLIError("count must be positive")
    samples = experiment.make_suite(spec, count, args.seed, args.workers)
    (out / "samples").mkdir(exist_ok=True)
    records = []
    for s in samples:
        bench = benchmark.BenchmarkSample.wrap(s)
        labels = {"difficulty": bench.difficulty, "uniqueness": bench.uniqueness}
        rel = f"samples/{s.sample_id}.json"
        fio.save_sample(out / rel, s, labels)
        records.append({"sample_id": s.sample_id, "file": rel, **labels,
                        "num_positive": len(s.partition.positives), "num_points": len(s.cloud),
                        "peak_ratio": scenes.peak_pixel_ratio(s)})
    hard = sum(r["difficulty"] == "hard" for r in records)
    fio.write_json(out / "manifest.json", {
        "format": fio.MANIFEST_FORMAT, "version": fio.VERSION, "seed": args.seed,
        "spec": spec.to_dict(), "count": count, "samples": records,
        "tallies": {"hard": hard, "easy": count - hard,
                    "unique": sum(r["uniqueness"] == "unique" for r in records),
                    "multiple": sum(r["uniqueness"] == "multiple" for r in records)}})
    return RunConfig("generate-dataset", args.seed, {"spec": spec.to_dict(), "count": count})


# train --------------------------------------------------------------------------

LOSS_COLUMNS = ["step", "epoch", "sample_id", "bce", "pvso", "dice3d", "total"]


def _history_rows(history):
    return [{"step": h["step"], "epoch": h["epoch"], "sample_id": h["sample"], "bce": h["bce"],
             "pvso": h["pvso"], "dice3d": h["dice3d"], "total": h["total"]} for h in history]


def cmd_train(args, cfg: dict, out: Path) -> RunConfig:
    manifest, samples = _load_dataset(args.dataset)
    t = _train_settings(args, cfg)
    model_kw = dict(cfg.get("model", {}))
    model_cfg = experiment.model_config_for(samples[0], **model_kw)
    model = ToyModel(model_cfg, seed=args.seed)
    inputs = [model.prepare(s) for s in samples]
    history: list[dict] = []
    try:
        fit(model, inputs, _train_config(t), args.seed, log=history.append)
    finally:
        if history:
            _write(out, "loss_curve.csv", _csv(_history_rows(history), LOSS_COLUMNS))
    if not history:
        _write(out, "loss_curve.csv", ",".join(LOSS_COLUMNS) + "\n")
    fio.save_checkpoint(out / "checkpoint.json", model_cfg, model.params,
                        extra={"steps": len(history), "seed": args.seed})
    return RunConfig("train", args.seed, {"dataset": str(args.dataset), "train": t,
                                          "model": model_cfg.to_dict()})


# evaluate -----------------------------------------------------------------------

SAMPLE_COLUMNS = ["sample_id", "miou_global", "miou_view", "miou_pos", "miou_neg"]


def cmd_evaluate(args, cfg: dict, out: Path) -> RunConfig:
    _, samples = _load_dataset(args.dataset)
    if (args.checkpoint is None) == (args.predictions is None):
        raise CLIError("give exactly one of --checkpoint or --predictions")
    if args.checkpoint is not None:
        model_cfg, params = fio.load_checkpoint(args.checkpoint)
        model = ToyModel(model_cfg, params=params)
        preds = experiment.predict_suite(model, samples)
        fio.save_predictions(out / "predictions.json", preds)
        source = {"checkpoint": str(args.checkpoint)}
    else:
        preds = fio.load_predictions(args.predictions)
        source = {"predictions": str(args.predictions)}
    report = benchmark.evaluate_suite(preds, samples)
    _write(out, "report.csv", report.to_csv())
    _write(out, "report.txt", report.to_text())
    rows = [{"sample_id": s.sample_id, **{k: getattr(m, k) for k in SAMPLE_COLUMNS[1:]}}
            for s, m in zip(samples, report.per_sample)]
    _write(out, "per_sample.csv", _csv(rows, SAMPLE_COLUMNS))
    return RunConfig("evaluate", args.seed, {"dataset": str(args.dataset), **source})


# fgd-demo -----------------------------------------------------------------------

def cmd_fgd_demo(args, cfg: dict, out: Path) -> RunConfig:
    sizes = [int(float(x)) for x in _pick(args.sizes, cfg, "sizes", DEFAULT_SIZES)]
    clouds = [int(float(x)) for x in _pick(args.cloud_sizes, cfg, "cloud_sizes", DEFAULT_CLOUD_SIZES)]
    frac = float(_pick(args.foreground_fraction, cfg, "foreground_fraction", 0.02))
    diffuse = float(_pick(args.diffuse_p, cfg, "diffuse_p", 0.01))
    preset_name = _pick(args.preset, cfg, "preset", "fgd")
    # zero-init law: U equals the foreground count, the cloud size is irrelevant
    rows = [r for k in sizes for r in fgd_report(k, [k], diffuse) if r["init"] == "zero"]
    rows += [r for n in clouds for r in fgd_report(max(1, int(round(frac * n))), [n], diffuse)
             if r["init"] == "diffuse"]
    columns = ["init", "n_points", "foreground", "U", "predicted_grad", "empirical_grad"]
    _write(out, "fgd.csv", _csv(rows, columns))
    zero = [r for r in rows if r["init"] == "zero"]
    diff = [r for r in rows if r["init"] == "diffuse"]
    slope_zero = loglog_slope([r["U"] for r in zero], [r["empirical_grad"] for r in zero]) if len(zero) > 1 else None
    slope_diff = loglog_slope([r["U"] for r in diff], [r["empirical_grad"] for r in diff]) if len(diff) > 1 else None
    sample = experiment.find_fgd_regime_sample(args.seed, spec=_scene_spec(argparse.Namespace(preset=preset_name), cfg))
    conc = experiment.concentration_on(sample)
    _write(out, "concentration.csv", _csv(
        [{"view": i, "grad2d": conc["grad2d"][i], "grad3d": conc["grad3d"], "ratio": conc["ratios"][i]}
         for i in sorted(conc["ratios"])], ["view", "grad2d", "grad3d", "ratio"]))
    lines = [
        "zero-init foreground gradient |grad| * U:",
        *[f"  U={r['U']:.0f}  |grad|={r['empirical_grad']:.6g}  |grad|*U={r['empirical_grad'] * r['U']:.12g}" for r in zero],
        f"log-log slope (zero init): {slope_zero:.6f}" if slope_zero is not None else "log-log slope (zero init): n/a",
        f"log-log slope (diffuse p={diffuse}): {slope_diff:.6f}" if slope_diff is not None else "log-log slope (diffuse): n/a",
        f"concentration sample {sample.sample_id}: {conc['n_points']} points, "
        f"3D foreground {100 * conc['foreground_3d']:.2f}%, peak 2D foreground {100 * conc['peak_ratio_2d']:.2f}%",
        f"measured 2D/3D foreground-gradient ratio: min {conc['min_ratio']:.2f}, mean {conc['mean_ratio']:.2f} "
        f"over {len(conc['ratios'])} target-visible views",
    ]
    _write(out, "summary.txt", "\n".join(lines) + "\n")
    return RunConfig("fgd-demo", args.seed, {"sizes": sizes, "cloud_sizes": clouds, "foreground_fraction": frac,
                                             "diffuse_p": diffuse, "preset": preset_name,
                                             "concentration_sample": sample.sample_id})


# ablate-ratio -------------------------------------------------------------------

def cmd_ablate_ratio(args, cfg: dict, out: Path) -> RunConfig:
    ratios = [float(r) for r in _pick(args.ratios, cfg, "ratios", DEFAULT_RATIOS)]
    for r in ratios:
        if not 0.0 <= r <= 1.0:
            raise CLIError(f"ratio {r} outside [0, 1]")
    _, train = _load_dataset(args.dataset)
    test = _load_dataset(args.eval_dataset)[1] if args.eval_dataset else train
    t = _train_settings(args, cfg)
    model_kw = dict(cfg.get("model", {}))
    results = experiment.ratio_ablation(train, test, ratios, _train_config(t), args.seed, model_kw, args.workers)
    rows = []
    for r, (report, history) in zip(ratios, results):
        tag = f"ratio_{r:g}"
        _write(out, f"{tag}_report.csv", report.to_csv())
        _write(out, f"{tag}_loss_curve.csv", _csv(_history_rows(history), LOSS_COLUMNS))
        rows.append({"ratio": r, **report.splits["overall"].as_row()})
    _write(out, "ablation.csv", _csv(rows))
    t_out = dict(t)
    t_out.pop("no_target_ratio")
    return RunConfig("ablate-ratio", args.seed, {"dataset": str(args.dataset), "eval_dataset":
                                                 str(args.eval_dataset) if args.eval_dataset else None,
                                                 "ratios": ratios, "train": t_out, "model": model_kw})


# parser -------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", type=Path, default=None, help="JSON settings file")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--workers", type=int, default=1, help="process pool size (1 = serial)")


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda-p", dest="lambda_p", type=float)
    p.add_argument("--lambda-dice3d", dest="lambda_dice3d", type=float)
    p.add_argument("--sample-size", dest="sample_size", type=int)
    p.add_argument("--sampler-mode", dest="sampler_mode", choices=("hybrid", "random"))
    p.add_argument("--pvso-source", dest="pvso_source", choices=("decoder", "lifted"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mvrefer", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-dataset", help="render a seeded synthetic suite")
    _common(g)
    g.add_argument("--preset", choices=sorted(scenes.PRESETS))
    g.add_argument("--count", type=int)
    g.set_defaults(fn=cmd_generate_dataset)

    t = sub.add_parser("train", help="fit the toy model and write a checkpoint")
    _common(t)
    t.add_argument("--dataset", type=Path, required=True)
    t.add_argument("--ratio", dest="no_target_ratio", type=float, help="no-target view ratio")
    _train_flags(t)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("evaluate", help="score a checkpoint or a prediction file")
    _common(e)
    e.add_argument("--dataset", type=Path, required=True)
    e.add_argument("--checkpoint", type=Path)
    e.add_argument("--predictions", type=Path)
    e.set_defaults(fn=cmd_evaluate)

    f = sub.add_parser("fgd-demo", help="Dice foreground-gradient scaling and 2D/3D concentration")
    _common(f)
    f.add_argument("--sizes", type=float, nargs="+", help="zero-init union sizes")
    f.add_argument("--cloud-sizes", dest="cloud_sizes", type=float, nargs="+")
    f.add_argument("--foreground-fraction", dest="foreground_fraction", type=float)
    f.add_argument("--diffuse-p", dest="diffuse_p", type=float)
    f.add_argument("--preset", choices=sorted(scenes.PRESETS))
    f.set_defaults(fn=cmd_fgd_demo)

    a = sub.add_parser("ablate-ratio", help="sweep the no-target view ratio")
    _common(a)
    a.add_argument("--dataset", type=Path, required=True)
    a.add_argument("--eval-dataset", dest="eval_dataset", type=Path)
    a.add_argument("--ratios", type=float, nargs="+")
    _train_flags(a)
    a.set_defaults(fn=cmd_ablate_ratio)
    return parser


def _error_record(command: str, exc: BaseException) -> dict:
    rec = {"format": "mvrefer-error", "version": fio.VERSION, "command": command,
           "error_type": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, NonFiniteLoss):
        rec["step"] = exc.step
        rec["components"] = {k: (v if np.isfinite(v) else repr(v)) for k, v in exc.components.items()}
    return rec


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out: Path = args.out
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(json.dumps(_error_record(args.command, exc), sort_keys=True), file=sys.stderr)
        return 1
    try:
        cfg = _load_config(args.config)
        run = args.fn(args, cfg, out)
        fio.write_json(out / "run_config.json", run.to_dict())
    except Exception as exc:  # every failure leaves a machine-readable record
        rec = _error_record(args.command, exc)
        fio.write_json(out / "error.json", rec)
        print(f"mvrefer {args.command}: {rec['error_type']}: {rec['message']}", file=sys.stderr)
        if not isinstance(exc, (CLIError, fio.FormatError, scenes.SceneError, NonFiniteLoss, ValueError, OSError)):
            traceback.print_exc()
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
