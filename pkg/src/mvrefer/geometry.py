"""Pinhole camera geometry and mask transfer between views and point clouds.

Conventions
-----------
* ``CameraPose`` maps camera coordinates to world coordinates:
  ``X_world = R @ X_cam + t``.
* Depth maps store camera-space ``z`` (distance along the optical axis).
* Integer pixel ``(r, c)`` covers the unit square ``[c, c+1) x [r, r+1)`` in
  continuous image coordinates, so its center sits at ``(u, v) = (c+0.5, r+0.5)``.
  Projected points are assigned to pixels by flooring ``(u, v)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

BINARY = "binary"
PROBABILISTIC = "probabilistic"

DEFAULT_TAU_FRACTION = 0.01


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError("principal point outside the image")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @classmethod
    def from_fov(cls, width: int, height: int, hfov_deg: float) -> "CameraIntrinsics":
        f = 0.5 * width / np.tan(np.deg2rad(hfov_deg) / 2.0)
        return cls(fx=float(f), fy=float(f), cx=width / 2.0, cy=height / 2.0,
                   width=width, height=height)


@dataclass(frozen=True)
class CameraPose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise GeometryError("rotation must be a proper orthonormal matrix")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "CameraPose":
        return cls(np.eye(3), np.zeros(3))

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return (points - self.translation) @ self.rotation

    def camera_to_world(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation


@dataclass(frozen=True)
class DepthMap:
    values: np.ndarray
    valid: np.ndarray = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        valid = np.isfinite(values) & (values > 0) if self.valid is None else np.asarray(self.valid, bool)
        if valid.shape != values.shape:
            raise GeometryError("depth values and validity mask differ in shape")
        v = values[valid]
        if v.size and not (np.all(np.isfinite(v)) and np.all(v > 0)):
            raise GeometryError("valid depths must be finite and positive")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "valid", valid)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    source_view: np.ndarray
    source_pixel: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise GeometryError("point cloud contains non-finite points")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "source_view", np.asarray(self.source_view, dtype=np.int64).reshape(-1))
        object.__setattr__(self, "source_pixel", np.asarray(self.source_pixel, dtype=np.int64).reshape(-1, 2))

    def __len__(self) -> int:
        return self.points.shape[0]

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 3)), np.zeros(0, np.int64), np.zeros((0, 2), np.int64))

    def diagonal(self) -> float:
        if len(self) == 0:
            return 0.0
        return float(np.linalg.norm(self.points.max(axis=0) - self.points.min(axis=0)))


def _check_mask_values(values: np.ndarray, kind: str) -> np.ndarray:
    if kind == BINARY:
        if not np.all((values == 0) | (values == 1)):
            raise GeometryError("binary mask must contain only 0/1")
        return values.astype(np.uint8)
    if kind == PROBABILISTIC:
        values = values.astype(np.float64)
        if not np.all((values >= 0) & (values <= 1)):
            raise GeometryError("probabilistic mask must lie in [0, 1]")
        return values
    raise GeometryError(f"unknown mask kind {kind!r}")


@dataclass(frozen=True)
class Mask3D:
    values: np.ndarray
    kind: str = BINARY

    def __post_init__(self):
        vals = np.asarray(self.values).reshape(-1)
        object.__setattr__(self, "values", _check_mask_values(vals, self.kind))

    def __len__(self) -> int:
        return self.values.shape[0]

    def binarize(self, threshold: float = 0.5) -> "Mask3D":
        if self.kind == BINARY:
            return self
        return Mask3D((self.values >= threshold).astype(np.uint8), BINARY)


@dataclass(frozen=True)
class Mask2D:
    values: np.ndarray
    kind: str = BINARY

    def __post_init__(self):
        vals = np.asarray(self.values)
        if vals.ndim != 2:
            raise GeometryError("2D mask must be a height x width array")
        object.__setattr__(self, "values", _check_mask_values(vals, self.kind))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def binarize(self, threshold: float = 0.5) -> "Mask2D":
        if self.kind == BINARY:
            return self
        return Mask2D((self.values >= threshold).astype(np.uint8), BINARY)


def project_points(points: np.ndarray, intr: CameraIntrinsics, pose: CameraPose):
    """Project world points through a pinhole camera.

    Returns
    -------
    uv : (K, 2) continuous pixel coordinates ``(u, v)``
    depth : (K,) camera-space z
    visible : (K,) bool, ``z > 0`` and ``(u, v)`` inside the image
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cam = pose.world_to_camera(points)
    z = cam[:, 2]
    in_front = z > 0
    safe_z = np.where(in_front, z, 1.0)
    u = intr.fx * cam[:, 0] / safe_z + intr.cx
    v = intr.fy * cam[:, 1] / safe_z + intr.cy
    visible = in_front & (u >= 0) & (u < intr.width) & (v >= 0) & (v < intr.height)
    return np.stack([u, v], axis=1), z, visible


def pixel_centers(rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    return np.stack([np.asarray(cols) + 0.5, np.asarray(rows) + 0.5], axis=-1).astype(np.float64)


def back_project_pixels(rows, cols, depths, intr: CameraIntrinsics, pose: CameraPose) -> np.ndarray:
    uv = pixel_centers(rows, cols)
    z = np.asarray(depths, dtype=np.float64)
    cam = np.stack([(uv[..., 0] - intr.cx) / intr.fx * z,
                    (uv[..., 1] - intr.cy) / intr.fy * z,
                    z], axis=-1)
    return pose.camera_to_world(cam)


def back_project_depth(depth: DepthMap, intr: CameraIntrinsics, pose: CameraPose,
                       view_index: int = 0) -> PointCloud:
    if depth.shape != intr.shape:
        raise GeometryError(f"depth shape {depth.shape} disagrees with intrinsics {intr.shape}")
    rows, cols = np.nonzero(depth.valid)
    if rows.size == 0:
        return PointCloud.empty()
    pts = back_project_pixels(rows, cols, depth.values[rows, cols], intr, pose)
    return PointCloud(pts, np.full(rows.size, view_index, dtype=np.int64),
                      np.stack([rows, cols], axis=1))


def assemble_scene_cloud(depths: Sequence[DepthMap], intrs: Sequence[CameraIntrinsics],
                         poses: Sequence[CameraPose]) -> PointCloud:
    """Concatenate per-view back-projections ordered by (view, row, col)."""
    if not (len(depths) == len(intrs) == len(poses)):
        raise GeometryError("need one depth, intrinsics and pose per view")
    parts = [back_project_depth(d, k, p, i) for i, (d, k, p) in enumerate(zip(depths, intrs, poses))]
    parts = [c for c in parts if len(c)]
    if not parts:
        return PointCloud.empty()
    return PointCloud(np.concatenate([c.points for c in parts]),
                      np.concatenate([c.source_view for c in parts]),
                      np.concatenate([c.source_pixel for c in parts]))


def default_tau(cloud: PointCloud) -> float:
    return DEFAULT_TAU_FRACTION * cloud.diagonal()


def view_correspondences(cloud: PointCloud, intr: CameraIntrinsics, pose: CameraPose,
                         depth: DepthMap, tau: float | None = None):
    """Points of ``cloud`` that land in a valid pixel of this view and pass the depth test.

    Returns ``(point_index, flat_pixel_index)`` arrays.
    """
    if depth.shape != intr.shape:
        raise GeometryError("depth shape disagrees with intrinsics")
    if tau is None:
        tau = default_tau(cloud)
    uv, z, vis = project_points(cloud.points, intr, pose)
    idx = np.nonzero(vis)[0]
    cols = np.floor(uv[idx, 0]).astype(np.int64)
    rows = np.floor(uv[idx, 1]).astype(np.int64)
    ok = depth.valid[rows, cols] & (np.abs(z[idx] - depth.values[rows, cols]) <= tau)
    return idx[ok], rows[ok] * intr.width + cols[ok]


def reproject_mask(mask3d: Mask3D, cloud: PointCloud, intr: CameraIntrinsics, pose: CameraPose,
                   depth: DepthMap, tau: float | None = None) -> Mask2D:
    """Metric-path projection ``P_i(M)``: per-pixel max over depth-consistent points."""
    if len(mask3d) != len(cloud):
        raise GeometryError("mask length differs from cloud size")
    pt, pix = view_correspondences(cloud, intr, pose, depth, tau)
    out = np.zeros(intr.width * intr.height, dtype=np.float64)
    vals = mask3d.values[pt].astype(np.float64)
    fg = vals > 0
    np.maximum.at(out, pix[fg], vals[fg])
    return Mask2D(out.reshape(intr.shape), mask3d.kind)


def reprojection_matrix(cloud: PointCloud, intr: CameraIntrinsics, pose: CameraPose,
                        depth: DepthMap, tau: float | None = None) -> sp.csr_matrix:
    """Training-path projection as a sparse ``(H*W, K)`` matrix: per-pixel mean of its points."""
    pt, pix = view_correspondences(cloud, intr, pose, depth, tau)
    counts = np.bincount(pix, minlength=intr.width * intr.height).astype(np.float64)
    w = 1.0 / counts[pix] if pix.size else np.zeros(0)
    return sp.csr_matrix((w, (pix, pt)), shape=(intr.width * intr.height, len(cloud)))


def lifting_matrix(cloud: PointCloud, depths: Sequence[DepthMap], intrs: Sequence[CameraIntrinsics],
                   poses: Sequence[CameraPose], tau: float | None = None) -> sp.csr_matrix:
    """Sparse ``(K, N*H*W)`` map from stacked per-view pixel probabilities to point probabilities.

    Each point averages the pixels it lands in over all views where it is visible and
    depth-consistent; a point seen by no view gets an all-zero row.
    """
    if not (len(depths) == len(intrs) == len(poses)):
        raise GeometryError("need one depth, intrinsics and pose per view")
    if tau is None:
        tau = default_tau(cloud)
    rows, cols, offset = [], [], 0
    for d, k, p in zip(depths, intrs, poses):
        pt, pix = view_correspondences(cloud, k, p, d, tau)
        rows.append(pt)
        cols.append(pix + offset)
        offset += k.width * k.height
    rows = np.concatenate(rows) if rows else np.zeros(0, np.int64)
    cols = np.concatenate(cols) if cols else np.zeros(0, np.int64)
    counts = np.bincount(rows, minlength=len(cloud)).astype(np.float64)
    w = 1.0 / counts[rows] if rows.size else np.zeros(0)
    return sp.csr_matrix((w, (rows, cols)), shape=(len(cloud), offset))


def lift_view_masks(masks: Sequence[Mask2D], cloud: PointCloud, depths: Sequence[DepthMap],
                    intrs: Sequence[CameraIntrinsics], poses: Sequence[CameraPose],
                    tau: float | None = None) -> Mask3D:
    if not (len(masks) == len(depths) == len(intrs) == len(poses)):
        raise GeometryError("need one mask, depth, intrinsics and pose per view")
    A = lifting_matrix(cloud, depths, intrs, poses, tau)
    stacked = np.concatenate([np.asarray(m.values, dtype=np.float64).reshape(-1) for m in masks])
    lifted = np.clip(A @ stacked, 0.0, 1.0)
    return Mask3D(lifted, PROBABILISTIC)


@dataclass(frozen=True)
class View:
    """One camera observation: calibration, ground-truth depth and instance ids."""

    intrinsics: CameraIntrinsics
    pose: CameraPose
    depth: DepthMap
    instance_ids: np.ndarray = field(default=None)
    frame_index: int = 0
