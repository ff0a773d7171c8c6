"""File formats: scene samples, dataset manifests, checkpoints and prediction files.

Every file is a UTF-8 JSON document with sorted keys and a ``format``/``version``
header.  Arrays are stored as ``{"dtype", "shape", "data"}`` where ``data`` is the
base64 of the little-endian, C-ordered buffer (``<f8`` for floats, ``<i8`` for ids,
``|u1`` for masks).  Scalar floats are written as shortest round-trip decimals.  The
same inputs therefore always produce the same bytes.  The layouts are described in the README.
"""

from __future__ import annotations

import base64
import json
from pathlib import Path

import numpy as np

from .geometry import CameraIntrinsics, CameraPose, DepthMap, View
from .model import ModelConfig, init_params
from .scenes import BoxObject, ReferringSample, build_sample

SAMPLE_FORMAT = "mvrefer-sample"
MANIFEST_FORMAT = "mvrefer-manifest"
CHECKPOINT_FORMAT = "mvrefer-checkpoint"
PREDICTIONS_FORMAT = "mvrefer-predictions"
VERSION = 1

_DTYPES = {"f": "<f8", "i": "<i8", "u": "|u1", "b": "|u1"}


class FormatError(ValueError):
    pass


def encode_array(a) -> dict:
    a = np.asarray(a)
    dtype = _DTYPES.get(a.dtype.kind)
    if dtype is None:
        raise FormatError(f"unsupported dtype {a.dtype}")
    buf = np.ascontiguousarray(a, dtype=np.dtype(dtype)).tobytes()
    return {"dtype": dtype, "shape": list(a.shape), "data": base64.b64encode(buf).decode("ascii")}


def decode_array(d: dict) -> np.ndarray:
    try:
        raw = base64.b64decode(d["data"])
        arr = np.frombuffer(raw, dtype=np.dtype(d["dtype"])).reshape(d["shape"])
    except (KeyError, ValueError, TypeError) as exc:
        raise FormatError(f"bad array record: {exc}") from exc
    return arr.astype(arr.dtype.newbyteorder("="))


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False) + "\n"


def write_json(path, obj) -> None:
    Path(path).write_text(dumps(obj), encoding="utf-8")


def read_json(path, expected_format: str | None = None) -> dict:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    if expected_format is not None and obj.get("format") != expected_format:
        raise FormatError(f"{path}: expected format {expected_format!r}, got {obj.get('format')!r}")
    if obj.get("version") != VERSION:
        raise FormatError(f"{path}: unsupported version {obj.get('version')!r}")
    return obj


def _view_to_dict(v: View) -> dict:
    k = v.intrinsics
    return {
        "frame_index": int(v.frame_index),
        "intrinsics": {"fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy,
                       "width": k.width, "height": k.height},
        "pose": {"rotation": v.pose.rotation.reshape(-1).tolist(),
                 "translation": v.pose.translation.tolist()},
        "depth": encode_array(v.depth.values),
        "valid": encode_array(v.depth.valid),
        "instance_ids": encode_array(v.instance_ids),
    }


def _view_from_dict(d: dict) -> View:
    k = d["intrinsics"]
    intr = CameraIntrinsics(float(k["fx"]), float(k["fy"]), float(k["cx"]), float(k["cy"]),
                            int(k["width"]), int(k["height"]))
    pose = CameraPose(np.asarray(d["pose"]["rotation"], float).reshape(3, 3),
                      np.asarray(d["pose"]["translation"], float))
    depth = DepthMap(decode_array(d["depth"]), decode_array(d["valid"]).astype(bool))
    return View(intr, pose, depth, decode_array(d["instance_ids"]).astype(np.int64), int(d["frame_index"]))


def sample_to_dict(sample: ReferringSample, labels: dict | None = None) -> dict:
    return {
        "format": SAMPLE_FORMAT,
        "version": VERSION,
        "sample_id": sample.sample_id,
        "room_extent": list(sample.room_extent),
        "objects": [o.to_dict() for o in sample.objects],
        "target_id": sample.target_id,
        "tokens": list(sample.tokens),
        "words": list(sample.words),
        "frame_indices": list(sample.frame_indices),
        "views": [_view_to_dict(v) for v in sample.views],
        "gt_masks2d": [encode_array(m.values) for m in sample.gt_masks2d],
        "positives": list(sample.partition.positives),
        "negatives": list(sample.partition.negatives),
        "labels": dict(labels or {}),
        "meta": sample.meta,
    }


def sample_from_dict(d: dict) -> ReferringSample:
    objects = [BoxObject.from_dict(o) for o in d["objects"]]
    views = [_view_from_dict(v) for v in d["views"]]
    sample = build_sample(objects, d["room_extent"], int(d["target_id"]), views, d["frame_indices"],
                          sample_id=d["sample_id"], meta=d.get("meta", {}))
    if list(sample.tokens) != list(d["tokens"]):
        raise FormatError(f"{d['sample_id']}: stored tokens disagree with the objects")
    for stored, rebuilt in zip(d["gt_masks2d"], sample.gt_masks2d):
        if not np.array_equal(decode_array(stored), rebuilt.values):
            raise FormatError(f"{d['sample_id']}: stored 2D masks disagree with instance ids")
    return sample


def save_sample(path, sample: ReferringSample, labels: dict | None = None) -> None:
    write_json(path, sample_to_dict(sample, labels))


def load_sample(path) -> ReferringSample:
    return sample_from_dict(read_json(path, SAMPLE_FORMAT))


def load_manifest(path) -> dict:
    return read_json(path, MANIFEST_FORMAT)


def load_dataset(manifest_path) -> tuple[dict, list[ReferringSample]]:
    manifest_path = Path(manifest_path)
    manifest = load_manifest(manifest_path)
    root = manifest_path.parent
    return manifest, [load_sample(root / rec["file"]) for rec in manifest["samples"]]


def save_checkpoint(path, config: ModelConfig, params: dict, extra: dict | None = None) -> None:
    write_json(path, {"format": CHECKPOINT_FORMAT, "version": VERSION, "config": config.to_dict(),
                      "arrays": {k: encode_array(np.asarray(v, np.float64)) for k, v in params.items()},
                      "extra": dict(extra or {})})


def load_checkpoint(path) -> tuple[ModelConfig, dict]:
    obj = read_json(path, CHECKPOINT_FORMAT)
    config = ModelConfig.from_dict(obj["config"])
    expected = init_params(config, 0)
    arrays = {k: decode_array(v).astype(np.float64) for k, v in obj["arrays"].items()}
    if set(arrays) != set(expected):
        raise FormatError(f"checkpoint parameters {sorted(set(arrays) ^ set(expected))} do not match config")
    for k, v in expected.items():
        if arrays[k].shape != v.shape:
            raise FormatError(f"parameter {k} has shape {arrays[k].shape}, config needs {v.shape}")
    return config, arrays


def save_predictions(path, predictions: dict[str, np.ndarray]) -> None:
    write_json(path, {"format": PREDICTIONS_FORMAT, "version": VERSION,
                      "predictions": {k: encode_array(np.asarray(v, np.float64)) for k, v in predictions.items()}})


def load_predictions(path) -> dict[str, np.ndarray]:
    obj = read_json(path, PREDICTIONS_FORMAT)
    return {k: decode_array(v).astype(np.float64) for k, v in obj["predictions"].items()}
