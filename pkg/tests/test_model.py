import dataclasses

import numpy as np
import pytest

from mvrefer import model as M
from mvrefer.losses import LossWeights
from mvrefer.model import ModelConfig, ToyModel
from mvrefer.training import Adam, SamplerConfig, finite_difference_check, train_step

TOY = dict(D=8, patch=16, W=3)


def test_config_invariants():
    cfg = ModelConfig()
    assert (cfg.L_multi, cfg.P) == (2, 64)
    with pytest.raises(M.ModelError):
        ModelConfig(L=7)
    with pytest.raises(M.ModelError):
        ModelConfig(patch=7)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_layer_mapping():
    assert M.geometric_layer_for_block(36, 12, 1) == 25
    assert [ModelConfig().geo_layer(b) for b in (1, 2)] == [5, 6]
    for L in (3, 6, 9, 36):
        cfg = ModelConfig(L=L)
        for b in range(1, cfg.L_multi + 1):
            assert cfg.geo_layer(b) == M.geometric_layer_for_block(L, L // 3, b)
    assert ModelConfig(fusion_stage="early").geo_layer(1) == 1
    assert ModelConfig(fusion_stage="middle").geo_layer(1) == 3
    with pytest.raises(M.ModelError):
        ModelConfig().geo_layer(3)


def test_frozen_geo_features(sample):
    cfg = ModelConfig()
    a = M.frozen_geo_features(sample, cfg)
    b = M.frozen_geo_features(sample, cfg)
    assert a.shape == (6, 8, 64, 32) and a.tobytes() == b.tobytes()
    # identical coordinates give identical layer-1 features
    frozen = M.make_frozen(cfg)
    xyz = np.array([[0.3, -1.0, 1.2], [0.3, -1.0, 1.2], [1.0, 0.0, 0.5]])
    f = M.sinusoidal_encoding(xyz) @ frozen["geo_proj.1"]
    np.testing.assert_array_equal(f[0], f[1])
    assert not np.allclose(f[0], f[2])
    # the encoding is absolute: translating the scene changes the features
    shifted = dataclasses.replace(sample, views=tuple(
        dataclasses.replace(v, pose=M.back_project_pixels.__globals__["CameraPose"](
            v.pose.rotation, v.pose.translation + 0.7)) for v in sample.views))
    assert not np.allclose(M.frozen_geo_features(shifted, cfg), a)


def test_language_rows_unit_norm(sample):
    frozen = M.make_frozen(ModelConfig())
    F = M.language_tokens(sample.tokens, ModelConfig(), frozen)
    np.testing.assert_allclose(np.linalg.norm(F, axis=1), 1.0, atol=1e-15)
    with pytest.raises(M.ModelError):
        M.language_tokens([], ModelConfig(), frozen)


def test_injection():
    gen = np.random.default_rng(0)
    x, g = gen.standard_normal((2, 4, 8)), gen.standard_normal((2, 4, 8))
    assert M.geometric_injection(x, g, np.zeros((8, 8))).tobytes() == x.tobytes()
    Z = gen.standard_normal((8, 8))
    np.testing.assert_allclose(M.geometric_injection(x, g, Z), x + g @ Z)
    with pytest.raises(M.ModelError):
        M.geometric_injection(x, g[:, :3], Z)


def test_decoder_examples():
    cfg = ModelConfig(num_views=2)
    params = {"decoder.w": np.zeros(32), "decoder.b": np.zeros(1)}
    pix, patch = M.mask_decoder(np.random.default_rng(0).standard_normal((2, 64, 32)), params, cfg)
    assert np.all(pix == 0.5)
    gen = np.random.default_rng(1)
    params = {"decoder.w": gen.standard_normal(32), "decoder.b": np.array([0.3])}
    F = gen.standard_normal((2, 64, 32))
    pix, patch = M.mask_decoder(F, params, cfg)
    for n in range(2):
        for p in range(64):
            r, c = divmod(p, 8)
            assert np.all(pix[n, r * 8:(r + 1) * 8, c * 8:(c + 1) * 8] == patch[n, p])
    # raising one patch logit never lowers its pixels
    F2 = F.copy()
    F2[0, 5] += 0.5 * params["decoder.w"]
    pix2, _ = M.mask_decoder(F2, params, cfg)
    assert np.all(pix2[0, 0:8, 40:48] >= pix[0, 0:8, 40:48])


def test_zero_init_identity_bitwise(sample):
    model = ToyModel(ModelConfig(), seed=3)
    inputs = model.prepare(sample)
    real, _ = model.forward(inputs)
    zeroed, _ = model.forward(inputs, np.zeros_like(inputs.F_geo))
    assert real.tobytes() == zeroed.tobytes()
    model.params["block1.Z"] += 0.1
    assert model.forward(inputs)[0].tobytes() != zeroed.tobytes()


def test_block_backward_finite_differences():
    gen = np.random.default_rng(2)
    D = 8
    params = {f"block1.{a}.{m}": gen.standard_normal((D, D)) / np.sqrt(D)
              for a in ("self", "cross") for m in ("W_Q", "W_K", "W_V")}
    params["block1.Z"] = 0.3 * gen.standard_normal((D, D))
    x, geo, lang = gen.standard_normal((2, 4, D)), gen.standard_normal((2, 4, D)), gen.standard_normal((3, D))
    for scope in ("view", "global"):
        out, cache = M.multimodal_block_forward(x, geo, lang, params, 1, scope)
        up = gen.standard_normal(out.shape)
        grads = {}
        dx = M.multimodal_block_backward(cache, up, 1, grads)
        f = lambda: float((M.multimodal_block_forward(x, geo, lang, params, 1, scope)[0] * up).sum())
        for name, arr in [("x", x)] + [(k, params[k]) for k in sorted(params)]:
            g = dx if name == "x" else grads[name]
            num = np.zeros_like(arr)
            for j in range(arr.size):
                o = arr.flat[j]
                arr.flat[j] = o + 1e-6
                f1 = f()
                arr.flat[j] = o - 1e-6
                f0 = f()
                arr.flat[j] = o
                num.flat[j] = (f1 - f0) / 2e-6
            assert (np.abs(g - num) / np.maximum(np.abs(g) + np.abs(num), 1e-10)).max() < 1e-5, (scope, name)


def test_block_at_init_ignores_geometry():
    gen = np.random.default_rng(3)
    params = {k: v for k, v in M.init_params(ModelConfig(D=8), 0).items() if k.startswith("block1")}
    x, lang = gen.standard_normal((2, 4, 8)), gen.standard_normal((3, 8))
    a, _ = M.multimodal_block_forward(x, gen.standard_normal((2, 4, 8)), lang, params, 1)
    b, _ = M.multimodal_block_forward(x, gen.standard_normal((2, 4, 8)), lang, params, 1)
    assert a.tobytes() == b.tobytes()


def test_model_gradient_check_toy_dims(sample):
    model = ToyModel(ModelConfig(**TOY), seed=1)
    inputs = model.prepare(sample)
    opt = Adam(lr=1e-2)
    for k in range(3):  # move Z off zero so every path carries gradient
        train_step(model, inputs, LossWeights(), SamplerConfig(), opt, 0, k)
    res = finite_difference_check(model, inputs)
    assert res.max_rel_error < 1e-4
    assert set(res.per_param) == set(model.params)
    assert not set(res.per_param) & set(model.frozen)


def test_epsilon_sweep_is_v_shaped(sample):
    model = ToyModel(ModelConfig(**TOY), seed=1)
    inputs = model.prepare(sample)
    opt = Adam(lr=1e-2)
    for k in range(3):
        train_step(model, inputs, LossWeights(), SamplerConfig(), opt, 0, k)
    eps = [1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8]
    err = [finite_difference_check(model, inputs, e).max_abs_error for e in eps]
    best = int(np.argmin(err))
    assert 0 < best < len(eps) - 1
    # truncation side falls roughly quadratically, roundoff side rises again
    assert err[0] / err[1] > 30
    assert err[-1] > err[best] * 10
