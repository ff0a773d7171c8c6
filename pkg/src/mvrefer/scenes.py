"""Procedural multi-view scenes with exact ground truth and templated referring expressions.

A scene is a closed room (floor, four walls, ceiling) holding axis-aligned boxes that
hover at a small clearance above the floor.  Cameras sit near the room center on a small
ring and look outward with a slight downward pitch, so each object is seen by only a
few frames.  Every camera ray hits some surface, which makes every depth pixel valid.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import rng as rng_mod
from .geometry import (
    BINARY,
    CameraIntrinsics,
    CameraPose,
    DepthMap,
    Mask2D,
    Mask3D,
    PointCloud,
    View,
    assemble_scene_cloud,
)

COLORS = ("red", "green", "blue", "yellow", "purple", "orange", "white", "black")
SHAPES = ("cube", "pillar", "slab", "bench", "crate", "plank", "pebble", "panel")
RELATIONS = ("east", "northeast", "north", "northwest", "west", "southwest", "south", "southeast")
VOCABULARY = COLORS + SHAPES + RELATIONS

# base (x, y, z) extents in meters
SHAPE_DIMS = {
    "cube": (0.6, 0.6, 0.6),
    "pillar": (0.3, 0.3, 1.2),
    "slab": (1.0, 0.8, 0.2),
    "bench": (1.2, 0.4, 0.45),
    "crate": (0.85, 0.85, 0.75),
    "plank": (1.3, 0.2, 0.15),
    "pebble": (0.3, 0.3, 0.25),
    "panel": (0.9, 0.12, 0.9),
}

ROOM_ID = -1


class SceneError(ValueError):
    pass


class NoUniqueDescription(SceneError):
    pass


def word_id(word: str) -> int:
    return VOCABULARY.index(word)


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    num_objects: int = 5
    room_extent: tuple[float, float, float] = (6.0, 6.0, 3.0)
    num_views: int = 8
    total_frames: int = 24
    image_size: tuple[int, int] = (64, 64)
    # optional (lo, hi) band on the target's peak per-view pixel ratio
    target_fraction_goal: tuple[float, float] | None = None
    hfov_deg: float = 60.0
    camera_radius: float = 0.4
    camera_height: float = 1.4
    camera_pitch_deg: float = 12.0
    yaw_jitter_deg: float = 3.0
    clearance: tuple[float, float] = (0.3, 0.6)
    object_gap: float = 0.45
    wall_margin: float = 0.45
    min_center_radius: float = 1.4
    size_scale: float = 0.7

    def __post_init__(self):
        if self.num_objects < 2:
            raise SceneError("referring needs at least two objects")
        if self.num_views < 2:
            raise SceneError("need at least two views")
        if self.total_frames < self.num_views:
            raise SceneError("total_frames must be >= num_views")
        if min(self.room_extent) <= 0:
            raise SceneError("room extent must be positive")

    def replace(self, **kw) -> "SceneSpec":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        kw = {}
        for f in dataclasses.fields(cls):
            if f.name in d:
                v = d[f.name]
                kw[f.name] = tuple(v) if isinstance(v, list) else v
        return cls(**kw)


PRESETS = {
    "standard": SceneSpec(),
    "smoke": SceneSpec(num_objects=4),
    # FGD regime: 32 views of 64x64 -> 131072 points, target seen by a handful of views
    "fgd": SceneSpec(num_views=32, total_frames=32),
}

FGD_REGIME_BAND = (0.10, 0.15)


def preset(name: str) -> SceneSpec:
    try:
        return PRESETS[name]
    except KeyError:
        raise SceneError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


@dataclass(frozen=True)
class BoxObject:
    instance_id: int
    lo: np.ndarray
    hi: np.ndarray
    color: str
    shape: str
    relation: str

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    @property
    def words(self) -> tuple[str, str, str]:
        return (self.color, self.shape, self.relation)

    def to_dict(self) -> dict:
        return {"instance_id": self.instance_id, "lo": self.lo.tolist(), "hi": self.hi.tolist(),
                "color": self.color, "shape": self.shape, "relation": self.relation}

    @classmethod
    def from_dict(cls, d: dict) -> "BoxObject":
        return cls(int(d["instance_id"]), np.asarray(d["lo"], float), np.asarray(d["hi"], float),
                   d["color"], d["shape"], d["relation"])


@dataclass(frozen=True)
class Scene:
    spec: SceneSpec
    objects: tuple[BoxObject, ...]
    frames: tuple[View, ...]

    @property
    def room_lo(self) -> np.ndarray:
        ex = np.asarray(self.spec.room_extent, float)
        return np.array([-ex[0] / 2, -ex[1] / 2, 0.0])

    @property
    def room_hi(self) -> np.ndarray:
        ex = np.asarray(self.spec.room_extent, float)
        return np.array([ex[0] / 2, ex[1] / 2, ex[2]])

    def object(self, instance_id: int) -> BoxObject:
        for o in self.objects:
            if o.instance_id == instance_id:
                return o
        raise SceneError(f"no object with id {instance_id}")


def tau_depth(room_extent) -> float:
    """Depth-consistency tolerance: 1% of the room diagonal."""
    return 0.01 * float(np.linalg.norm(np.asarray(room_extent, float)))


def relation_word(center: np.ndarray) -> str:
    angle = np.arctan2(center[1], center[0])
    return RELATIONS[int(np.round(angle / (np.pi / 4))) % 8]


def _camera_pose(yaw: float, pitch: float, radius: float, height: float) -> CameraPose:
    fwd = np.array([np.cos(yaw) * np.cos(pitch), np.sin(yaw) * np.cos(pitch), -np.sin(pitch)])
    right = np.cross(fwd, [0.0, 0.0, 1.0])
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd], axis=1)
    # re-orthonormalize to keep the pose invariant tight
    u, _, vt = np.linalg.svd(R)
    R = u @ vt
    return CameraPose(R, np.array([radius * np.cos(yaw), radius * np.sin(yaw), height]))


def camera_rays(intr: CameraIntrinsics, pose: CameraPose):
    """World-space ray directions scaled so the camera-space z component is 1."""
    rows, cols = np.mgrid[0:intr.height, 0:intr.width]
    d_cam = np.stack([(cols + 0.5 - intr.cx) / intr.fx, (rows + 0.5 - intr.cy) / intr.fy,
                      np.ones(rows.shape)], axis=-1)
    return pose.translation, d_cam @ pose.rotation.T


def _ray_box(origin, dirs, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo - origin) * inv
        t2 = (hi - origin) * inv
    tmin = np.nanmax(np.minimum(t1, t2), axis=-1)
    tmax = np.nanmin(np.maximum(t1, t2), axis=-1)
    hit = (tmin <= tmax) & (tmin > 0)
    return np.where(hit, tmin, np.inf)


def _ray_room(origin, dirs, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo - origin) * inv
        t2 = (hi - origin) * inv
    return np.nanmin(np.maximum(t1, t2), axis=-1)


def render_view(objects, room_lo, room_hi, intr: CameraIntrinsics, pose: CameraPose,
                frame_index: int = 0) -> View:
    origin, dirs = camera_rays(intr, pose)
    depth = _ray_room(origin, dirs, room_lo, room_hi)
    ids = np.full(depth.shape, ROOM_ID, dtype=np.int64)
    for o in objects:
        t = _ray_box(origin, dirs, o.lo, o.hi)
        closer = t < depth
        depth = np.where(closer, t, depth)
        ids[closer] = o.instance_id
    return View(intr, pose, DepthMap(depth), ids, frame_index)


def _place_objects(spec: SceneSpec, gen: np.random.Generator) -> list[BoxObject]:
    ex = np.asarray(spec.room_extent, float)
    half = ex[:2] / 2 - spec.wall_margin
    placed: list[tuple[np.ndarray, np.ndarray]] = []
    shapes = []
    for _ in range(spec.num_objects):
        for _attempt in range(200):
            shape = SHAPES[gen.integers(len(SHAPES))]
            dims = np.asarray(SHAPE_DIMS[shape]) * spec.size_scale * gen.uniform(0.85, 1.15, 3)
            if gen.random() < 0.5:
                dims[[0, 1]] = dims[[1, 0]]
            lo_xy = -half + dims[:2] / 2
            hi_xy = half - dims[:2] / 2
            if np.any(lo_xy >= hi_xy):
                continue
            c = gen.uniform(lo_xy, hi_xy)
            if np.linalg.norm(c) < spec.min_center_radius:
                continue
            z0 = gen.uniform(*spec.clearance)
            lo = np.array([c[0] - dims[0] / 2, c[1] - dims[1] / 2, z0])
            hi = np.array([c[0] + dims[0] / 2, c[1] + dims[1] / 2, z0 + dims[2]])
            if hi[2] > ex[2] - spec.wall_margin:
                continue
            clash = False
            for plo, phi in placed:
                gap = np.maximum(plo[:2] - hi[:2], lo[:2] - phi[:2]).max()
                if gap < spec.object_gap:
                    clash = True
                    break
            if not clash:
                placed.append((lo, hi))
                shapes.append(shape)
                break
        else:
            raise SceneError("objects cannot fit the room")
    colors = [COLORS[i] for i in gen.integers(len(COLORS), size=len(placed))]
    rels = [relation_word(0.5 * (lo + hi)) for lo, hi in placed]
    # resample colors until every (color, shape, relation) triple is unique
    for _ in range(100):
        triples = list(zip(colors, shapes, rels))
        dup = [i for i, t in enumerate(triples) if triples.index(t) != i]
        if not dup:
            break
        for i in dup:
            colors[i] = COLORS[gen.integers(len(COLORS))]
    return [BoxObject(i, lo, hi, colors[i], shapes[i], rels[i]) for i, (lo, hi) in enumerate(placed)]


def generate_scene(spec: SceneSpec) -> Scene:
    """Deterministic scene for ``spec``; every object is visible in at least one frame."""
    gen = rng_mod.stream(spec.seed, "scene")
    h, w = spec.image_size
    intr = CameraIntrinsics.from_fov(w, h, spec.hfov_deg)
    ex = np.asarray(spec.room_extent, float)
    room_lo = np.array([-ex[0] / 2, -ex[1] / 2, 0.0])
    room_hi = np.array([ex[0] / 2, ex[1] / 2, ex[2]])
    for _attempt in range(50):
        objects = _place_objects(spec, gen)
        phase = gen.uniform(0, 2 * np.pi)
        jitter = np.deg2rad(spec.yaw_jitter_deg) * gen.uniform(-1, 1, spec.total_frames)
        frames = []
        for k in range(spec.total_frames):
            yaw = phase + 2 * np.pi * k / spec.total_frames + jitter[k]
            pose = _camera_pose(yaw, np.deg2rad(spec.camera_pitch_deg), spec.camera_radius,
                                spec.camera_height)
            frames.append(render_view(objects, room_lo, room_hi, intr, pose, k))
        seen = set()
        for f in frames:
            seen.update(np.unique(f.instance_ids).tolist())
        if all(o.instance_id in seen for o in objects):
            return Scene(spec, tuple(objects), tuple(frames))
    raise SceneError("could not place objects visible from the camera ring")


def describe(objects, target_id: int) -> tuple[str, ...]:
    """Template ``<color> <shape> <relation>``; raises if a distractor shares all three."""
    target = next(o for o in objects if o.instance_id == target_id)
    for o in objects:
        if o.instance_id != target_id and o.words == target.words:
            raise NoUniqueDescription(f"object {target_id} is indistinguishable from {o.instance_id}")
    return target.words


def color_channels(view: View, objects) -> np.ndarray:
    """Per-pixel color one-hot (H, W, len(COLORS)); room surfaces are all-zero."""
    out = np.zeros(view.instance_ids.shape + (len(COLORS),))
    for o in objects:
        out[view.instance_ids == o.instance_id, COLORS.index(o.color)] = 1.0
    return out


@dataclass(frozen=True)
class ViewSplit:
    positives: tuple[int, ...]
    negatives: tuple[int, ...]


@dataclass
class ReferringSample:
    objects: tuple[BoxObject, ...]
    room_extent: tuple[float, float, float]
    target_id: int
    tokens: tuple[int, ...]
    frame_indices: tuple[int, ...]
    views: tuple[View, ...]
    cloud: PointCloud
    gt_mask3d: Mask3D
    gt_masks2d: tuple[Mask2D, ...]
    partition: ViewSplit
    sample_id: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def num_views(self) -> int:
        return len(self.views)

    @property
    def tau(self) -> float:
        return tau_depth(self.room_extent)

    @property
    def words(self) -> tuple[str, ...]:
        return tuple(VOCABULARY[t] for t in self.tokens)

    @property
    def target(self) -> BoxObject:
        return next(o for o in self.objects if o.instance_id == self.target_id)


def build_sample(objects, room_extent, target_id: int, views, frame_indices,
                 sample_id: str = "", meta: dict | None = None) -> ReferringSample:
    """Assemble cloud and ground truth for a fixed set of views."""
    if not any(o.instance_id == target_id for o in objects):
        raise SceneError(f"no object with id {target_id}")
    tokens = tuple(word_id(w) for w in describe(objects, target_id))
    views = tuple(views)
    cloud = assemble_scene_cloud([v.depth for v in views], [v.intrinsics for v in views],
                                 [v.pose for v in views])
    masks = tuple(Mask2D((v.instance_ids == target_id).astype(np.uint8), BINARY) for v in views)
    ids_at_points = np.concatenate([v.instance_ids[v.depth.valid] for v in views])
    mask3d = Mask3D((ids_at_points == target_id).astype(np.uint8), BINARY)
    pos = tuple(i for i, m in enumerate(masks) if m.values.any())
    neg = tuple(i for i, m in enumerate(masks) if not m.values.any())
    return ReferringSample(tuple(objects), tuple(float(x) for x in room_extent), int(target_id),
                           tokens, tuple(int(i) for i in frame_indices), views, cloud, mask3d,
                           masks, ViewSplit(pos, neg), sample_id, dict(meta or {}))


def make_referring_sample(scene: Scene, target_id: int, seed: int,
                          frames=None, sample_id: str = "") -> ReferringSample:
    """Select views with the benchmark protocol (unless ``frames`` is given) and build the sample."""
    from .benchmark import sample_views_uniform, visibility_validation

    scene.object(target_id)
    if frames is None:
        visible = [bool((f.instance_ids == target_id).any()) for f in scene.frames]
        frames = sample_views_uniform(len(scene.frames), scene.spec.num_views)
        frames = visibility_validation(frames, visible, seed)
    views = [scene.frames[i] for i in frames]
    return build_sample(scene.objects, scene.spec.room_extent, target_id, views, frames,
                        sample_id=sample_id, meta={"scene_seed": scene.spec.seed})


def target_pixel_ratio(sample: ReferringSample, view_index: int) -> float:
    m = sample.gt_masks2d[view_index].values
    return float(m.sum()) / m.size


def peak_pixel_ratio(sample: ReferringSample) -> float:
    return max(target_pixel_ratio(sample, i) for i in range(sample.num_views))


def dataset_sample(spec: SceneSpec, index: int, seed: int, max_attempts: int = 100) -> ReferringSample:
    """The ``index``-th sample of a seeded dataset: fresh scene, random target.

    Retries with new scenes when the target has no unique description or misses
    ``spec.target_fraction_goal``.
    """
    from .benchmark import ProtocolError

    for attempt in range(max_attempts):
        gen = rng_mod.stream(seed, "dataset", index, attempt)
        scene_seed = int(gen.integers(2**31))
        scene = generate_scene(spec.replace(seed=scene_seed))
        target = int(scene.objects[gen.integers(len(scene.objects))].instance_id)
        try:
            sample = make_referring_sample(scene, target, int(gen.integers(2**31)),
                                           sample_id=f"s{index:05d}")
        except (NoUniqueDescription, ProtocolError):
            continue
        band = spec.target_fraction_goal
        if band is not None and not (band[0] <= peak_pixel_ratio(sample) <= band[1]):
            continue
        return sample
    raise SceneError(f"no valid sample after {max_attempts} attempts")
