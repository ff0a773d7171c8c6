"""Desk-scale dual-branch model.

The frozen branch is emulated: patch geometry comes from ground-truth depth and poses,
visual tokens from patch-averaged attribute channels, language tokens from a fixed
embedding table.  The trainable multimodal branch stacks ``L/3`` blocks of

    geometric injection  ->  visual self-attention  ->  language cross-attention

followed by a linear per-patch mask decoder.  Everything from the decoder output to
the loss on lifted 3D points is linear or elementwise, so the backward pass is exact.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import rng as rng_mod
from .attention import (
    AttentionParams,
    cross_attention_backward,
    cross_attention_forward,
    self_attention_backward,
    self_attention_forward,
)
from .geometry import back_project_pixels, lifting_matrix, reprojection_matrix
from .scenes import COLORS, VOCABULARY, ReferringSample, color_channels

NUM_FREQS = 4
FUSION_STAGES = ("early", "middle", "late")


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    D: int = 32
    patch: int = 8
    image_size: tuple[int, int] = (64, 64)
    W: int = 8
    L: int = 6
    num_views: int = 8
    attention_scope: str = "view"
    fusion_stage: str = "late"
    frozen_seed: int = 0
    init_scale: float = 1.0

    def __post_init__(self):
        h, w = self.image_size
        if self.L % 3:
            raise ModelError("L must be divisible by 3")
        if h % self.patch or w % self.patch:
            raise ModelError("image size must be a multiple of the patch size")
        if self.attention_scope not in ("view", "global"):
            raise ModelError("attention_scope is 'view' or 'global'")
        if self.fusion_stage not in FUSION_STAGES:
            raise ModelError(f"fusion_stage must be one of {FUSION_STAGES}")

    @property
    def L_multi(self) -> int:
        return self.L // 3

    @property
    def P(self) -> int:
        h, w = self.image_size
        return (h // self.patch) * (w // self.patch)

    @property
    def grid(self) -> tuple[int, int]:
        h, w = self.image_size
        return (h // self.patch, w // self.patch)

    def geo_layer(self, block: int) -> int:
        """1-based reconstruction layer feeding 1-based multimodal ``block``."""
        if not 1 <= block <= self.L_multi:
            raise ModelError(f"block {block} outside 1..{self.L_multi}")
        offset = {"late": self.L - self.L_multi, "middle": self.L_multi, "early": 0}[self.fusion_stage]
        return offset + block

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        kw = {k: v for k, v in d.items() if k in names}
        if "image_size" in kw:
            kw["image_size"] = tuple(kw["image_size"])
        return cls(**kw)


def geometric_layer_for_block(L: int, L_multi: int, block: int) -> int:
    return (L - L_multi) + block


def sinusoidal_encoding(xyz: np.ndarray, num_freqs: int = NUM_FREQS) -> np.ndarray:
    freqs = (np.pi / 4.0) * 2.0 ** np.arange(num_freqs)
    ang = xyz[..., :, None] * freqs
    enc = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)
    return enc.reshape(xyz.shape[:-1] + (-1,))


def _orthogonal(gen: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(gen.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def make_frozen(config: ModelConfig) -> dict[str, np.ndarray]:
    """Fixed seeded stand-ins for the pretrained encoders; never updated."""
    D = config.D
    gen = rng_mod.stream(config.frozen_seed, "frozen")
    n_chan = len(COLORS) + 2
    enc_dim = 3 * 2 * NUM_FREQS
    frozen = {"vis_proj": gen.standard_normal((n_chan, D)) / np.sqrt(n_chan) * 2.0,
              "geo_proj.1": gen.standard_normal((enc_dim, D)) / np.sqrt(enc_dim)}
    for layer in range(2, config.L + 1):
        frozen[f"geo_proj.{layer}"] = _orthogonal(gen, D)
    emb = gen.standard_normal((len(VOCABULARY), D))
    frozen["embeddings"] = emb / np.linalg.norm(emb, axis=1, keepdims=True)
    return frozen


def init_params(config: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    D = config.D
    gen = rng_mod.stream(seed, "init")
    s = config.init_scale / np.sqrt(D)
    params = {}
    for b in range(1, config.L_multi + 1):
        params[f"block{b}.Z"] = np.zeros((D, D))
        for att in ("self", "cross"):
            for m in ("W_Q", "W_K", "W_V"):
                params[f"block{b}.{att}.{m}"] = s * gen.standard_normal((D, D))
    params["decoder.w"] = 0.1 * s * gen.standard_normal(D)
    params["decoder.b"] = np.zeros(1)
    return params


def patch_mean(x: np.ndarray, patch: int) -> np.ndarray:
    """(N, H, W, C) -> (N, P, C) in row-major patch order."""
    n, h, w, c = x.shape
    gh, gw = h // patch, w // patch
    return x.reshape(n, gh, patch, gw, patch, c).mean(axis=(2, 4)).reshape(n, gh * gw, c)


def upsample(patch_values: np.ndarray, config: ModelConfig) -> np.ndarray:
    """(N, P) -> (N, H, W) by nearest-neighbour replication."""
    gh, gw = config.grid
    x = patch_values.reshape(-1, gh, gw)
    return np.repeat(np.repeat(x, config.patch, axis=1), config.patch, axis=2)


def patch_sum(pixel_values: np.ndarray, config: ModelConfig) -> np.ndarray:
    """Adjoint of :func:`upsample`: (N, H, W) -> (N, P)."""
    n = pixel_values.shape[0]
    gh, gw = config.grid
    p = config.patch
    return pixel_values.reshape(n, gh, p, gw, p).sum(axis=(2, 4)).reshape(n, gh * gw)


@dataclass
class SampleInputs:
    """Everything a training step needs from one sample, precomputed once."""

    sample_id: str
    F_vis: np.ndarray                # (N, P, D)
    F_geo: np.ndarray                # (L, N, P, D), index 0 = layer 1
    F_lang: np.ndarray               # (W_used, D)
    lift: sp.csr_matrix              # (K, N*H*W)
    reproject: list[sp.csr_matrix]   # per view (H*W, K)
    gt3d: np.ndarray                 # (K,)
    gt2d: np.ndarray                 # (N, H*W)
    positives: tuple[int, ...]
    negatives: tuple[int, ...]


def frozen_geo_features(sample: ReferringSample, config: ModelConfig,
                        frozen: dict[str, np.ndarray] | None = None) -> np.ndarray:
    """(L, N, P, D) features from each patch's mean back-projected 3D coordinate."""
    frozen = make_frozen(config) if frozen is None else frozen
    coords = []
    for v in sample.views:
        h, w = v.depth.shape
        rows, cols = np.mgrid[0:h, 0:w]
        pts = back_project_pixels(rows, cols, np.where(v.depth.valid, v.depth.values, 0.0),
                                  v.intrinsics, v.pose)
        coords.append(pts)
    coords = patch_mean(np.stack(coords), config.patch)
    x = sinusoidal_encoding(coords) @ frozen["geo_proj.1"]
    layers = [x]
    for layer in range(2, config.L + 1):
        x = x @ frozen[f"geo_proj.{layer}"]
        layers.append(x)
    return np.stack(layers)


def visual_tokens(sample: ReferringSample, config: ModelConfig,
                  frozen: dict[str, np.ndarray]) -> np.ndarray:
    diag = float(np.linalg.norm(sample.room_extent))
    chans = []
    for v in sample.views:
        c = color_channels(v, sample.objects)
        d = (v.depth.values / diag)[..., None]
        chans.append(np.concatenate([c, d, np.ones_like(d)], axis=-1))
    return patch_mean(np.stack(chans), config.patch) @ frozen["vis_proj"]


def language_tokens(tokens, config: ModelConfig, frozen: dict[str, np.ndarray]) -> np.ndarray:
    tokens = list(tokens)[: config.W]
    if not tokens:
        raise ModelError("need at least one language token")
    return frozen["embeddings"][tokens]


def prepare_inputs(sample: ReferringSample, config: ModelConfig,
                   frozen: dict[str, np.ndarray]) -> SampleInputs:
    if sample.num_views != config.num_views:
        raise ModelError(f"model expects {config.num_views} views, sample has {sample.num_views}")
    if tuple(sample.views[0].depth.shape) != tuple(config.image_size):
        raise ModelError("sample image size disagrees with the model config")
    views = sample.views
    depths = [v.depth for v in views]
    intrs = [v.intrinsics for v in views]
    poses = [v.pose for v in views]
    lift = lifting_matrix(sample.cloud, depths, intrs, poses, sample.tau)
    reproj = [reprojection_matrix(sample.cloud, v.intrinsics, v.pose, v.depth, sample.tau) for v in views]
    return SampleInputs(
        sample.sample_id,
        visual_tokens(sample, config, frozen),
        frozen_geo_features(sample, config, frozen),
        language_tokens(sample.tokens, config, frozen),
        lift, reproj,
        sample.gt_mask3d.values.astype(np.float64),
        np.stack([m.values.reshape(-1) for m in sample.gt_masks2d]).astype(np.float64),
        tuple(sample.partition.positives), tuple(sample.partition.negatives))


def _att(params, prefix) -> AttentionParams:
    return AttentionParams(params[prefix + ".W_Q"], params[prefix + ".W_K"], params[prefix + ".W_V"])


def geometric_injection(F_prev_out: np.ndarray, F_geo_l: np.ndarray, Z: np.ndarray) -> np.ndarray:
    """``F_prev_out + F_geo_l Z``: a 1x1 convolution applied token-wise."""
    if F_prev_out.shape != F_geo_l.shape or Z.shape != (F_geo_l.shape[-1], F_prev_out.shape[-1]):
        raise ModelError("injection shapes disagree")
    return F_prev_out + F_geo_l @ Z


def multimodal_block_forward(F_prev_out, F_geo_l, F_lang, params: dict, block: int,
                             scope: str = "view"):
    if F_prev_out.shape != F_geo_l.shape:
        raise ModelError("block input and geometric features differ in shape")
    Z = params[f"block{block}.Z"]
    x_in = geometric_injection(F_prev_out, F_geo_l, Z)
    shape = x_in.shape
    x_sa = x_in.reshape(1, -1, shape[-1]) if scope == "global" else x_in
    x_vis, sa_cache = self_attention_forward(x_sa, _att(params, f"block{block}.self"))
    x_vis = x_vis.reshape(shape)
    out, ca_cache = cross_attention_forward(x_vis, F_lang, _att(params, f"block{block}.cross"))
    return out, {"geo": F_geo_l, "sa": sa_cache, "ca": ca_cache, "shape": shape}


def multimodal_block_backward(cache: dict, dout: np.ndarray, block: int, grads: dict) -> np.ndarray:
    dvis, dq, dk, dv = cross_attention_backward(cache["ca"], dout)
    pre = f"block{block}.cross"
    grads[pre + ".W_Q"], grads[pre + ".W_K"], grads[pre + ".W_V"] = dq, dk, dv
    shape = cache["shape"]
    dsa = dvis.reshape(cache["sa"].xq.shape)
    din, dq, dk, dv = self_attention_backward(cache["sa"], dsa)
    pre = f"block{block}.self"
    grads[pre + ".W_Q"], grads[pre + ".W_K"], grads[pre + ".W_V"] = dq, dk, dv
    din = din.reshape(shape)
    d = shape[-1]
    grads[f"block{block}.Z"] = cache["geo"].reshape(-1, d).T @ din.reshape(-1, d)
    return din


def mask_decoder(F_final: np.ndarray, params: dict, config: ModelConfig):
    """Per-patch logits -> sigmoid -> per-pixel probabilities ``(N, H, W)``."""
    logits = F_final @ params["decoder.w"] + params["decoder.b"][0]
    probs = 0.5 * (1.0 + np.tanh(0.5 * logits))
    return upsample(probs, config), probs


class ToyModel:
    """Frozen feature generators plus trainable multimodal blocks and decoder."""

    def __init__(self, config: ModelConfig, seed: int = 0, params: dict | None = None):
        self.config = config
        self.frozen = make_frozen(config)
        self.params = init_params(config, seed) if params is None else {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def prepare(self, sample: ReferringSample) -> SampleInputs:
        return prepare_inputs(sample, self.config, self.frozen)

    def forward(self, inputs: SampleInputs, F_geo: np.ndarray | None = None):
        """Returns ``(pixel_probs (N,H,W), cache)``."""
        cfg = self.config
        F_geo = inputs.F_geo if F_geo is None else F_geo
        x = inputs.F_vis
        caches = []
        for b in range(1, cfg.L_multi + 1):
            x, c = multimodal_block_forward(x, F_geo[cfg.geo_layer(b) - 1], inputs.F_lang, self.params,
                                            b, cfg.attention_scope)
            caches.append(c)
        pix, patch_probs = mask_decoder(x, self.params, cfg)
        return pix, {"blocks": caches, "final": x, "patch_probs": patch_probs}

    def backward(self, cache: dict, dpix: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients of all trainable parameters given ``dloss/dpixel_probs``."""
        cfg = self.config
        s = cache["patch_probs"]
        dlogit = patch_sum(dpix, cfg) * s * (1.0 - s)
        x = cache["final"]
        d = x.shape[-1]
        grads = {"decoder.w": x.reshape(-1, d).T @ dlogit.reshape(-1),
                 "decoder.b": np.array([dlogit.sum()])}
        dx = dlogit[..., None] * self.params["decoder.w"]
        for b in range(cfg.L_multi, 0, -1):
            dx = multimodal_block_backward(cache["blocks"][b - 1], dx, b, grads)
        return grads

    def lift(self, inputs: SampleInputs, pix: np.ndarray) -> np.ndarray:
        return np.clip(inputs.lift @ pix.reshape(-1), 0.0, 1.0)

    def predict(self, inputs: SampleInputs) -> np.ndarray:
        pix, _ = self.forward(inputs)
        return self.lift(inputs, pix)
