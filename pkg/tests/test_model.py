"""Assembled-model tests: feature ablations, gradient flow, determinism."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from rostfine.encoder import ModelConfig
from rostfine.model import RoSTFine
from rostfine.objectives import LossConfig, head_loss, mse, total_loss
from rostfine.tensor import grad_check_sampled, zero_grad


def small_cfg(**kw):
    base = dict(frames=2, height=8, width=8, patch=4, embed_dim=8, depth=2,
                heads=2, top_k=2, seed=0)
    base.update(kw)
    return ModelConfig(**base)


def random_clip(cfg, seed=0):
    return np.random.default_rng(seed).random((cfg.frames, cfg.height, cfg.width, 3))


def test_final_prediction_is_mean_of_heads():
    cfg = small_cfg()
    model = RoSTFine(cfg)
    out = model.forward_clip(random_clip(cfg))
    stacked = np.stack([out.predictions[k].data for k in ("g", "s", "t")])
    assert_allclose(out.final.data, stacked.mean(axis=0), atol=1e-12)
    assert np.all(out.final.data >= 0)
    assert abs(out.final.data.sum() - 1.0) < 1e-12


def test_each_head_is_on_the_simplex():
    cfg = small_cfg(seed=3)
    out = RoSTFine(cfg).forward_clip(random_clip(cfg, 1))
    for name in ("g", "s", "t"):
        y = out.predictions[name].data
        assert np.all(y >= 0)
        assert abs(y.sum() - 1.0) < 1e-9


def test_feature_subset_removes_heads_from_loss_and_inference():
    cfg = small_cfg(features=("g", "s"))
    model = RoSTFine(cfg)
    out = model.forward_clip(random_clip(cfg))
    assert sorted(out.predictions) == ["g", "s"]
    assert sorted(out.embeddings) == ["g", "s"]
    assert_allclose(
        out.final.data,
        (out.predictions["g"].data + out.predictions["s"].data) / 2.0,
        atol=1e-12,
    )
    y = np.array([0.1, 0.2, 0.4, 0.2, 0.1])
    expected = (mse(out.predictions["g"], y).item() + mse(out.predictions["s"], y).item()) / 2.0
    assert_allclose(head_loss(out.predictions, y, "mse").item(), expected, atol=1e-15)


def test_global_only_model_is_bare_encoder_plus_head():
    cfg = small_cfg(features=("g",))
    model = RoSTFine(cfg)
    out = model.forward_clip(random_clip(cfg))
    assert sorted(out.predictions) == ["g"]
    assert out.selected is None
    assert_allclose(out.final.data, out.predictions["g"].data)


def test_global_only_parameters_are_strict_shape_subset():
    full = RoSTFine(small_cfg(seed=7)).parameters()
    sub = RoSTFine(small_cfg(seed=7, features=("g",))).parameters()
    assert set(sub) < set(full)
    for name, tensor in sub.items():
        assert tensor.shape == full[name].shape
    missing = set(full) - set(sub)
    assert all(n.startswith(("fgs.", "fgt.", "head.s", "head.t")) for n in missing)


def test_gradient_reaches_encoder_through_each_head():
    cfg = small_cfg(seed=5)
    model = RoSTFine(cfg)
    params = model.parameters()
    y = np.array([0.0, 0.5, 0.5, 0.0, 0.0])
    for name in ("g", "s", "t"):
        out = model.forward_clip(random_clip(cfg, 2))
        zero_grad(params.values())
        mse(out.predictions[name], y).backward()
        grad = params["embed.projection"].grad
        assert np.abs(grad).max() > 0, f"no encoder gradient through head {name}"


def test_sum_and_concat_strategies_forward():
    for strategy in ("sum", "concat"):
        cfg = small_cfg(aggregation=strategy)
        model = RoSTFine(cfg)
        out = model.forward_clip(random_clip(cfg))
        assert out.predictions == {}
        assert abs(out.final.data.sum() - 1.0) < 1e-12
        loss = total_loss(out, np.array([0.2] * 5), LossConfig())
        zero_grad(model.parameters().values())
        loss.backward()
        assert np.abs(model.parameters()["embed.projection"].grad).max() > 0


def test_model_is_deterministic_per_seed():
    cfg = small_cfg(seed=11)
    clip = random_clip(cfg, 4)
    a = RoSTFine(cfg).forward_clip(clip)
    b = RoSTFine(cfg).forward_clip(clip)
    assert np.array_equal(a.final.data, b.final.data)
    for name in a.predictions:
        assert np.array_equal(a.predictions[name].data, b.predictions[name].data)


def test_cosines_reports_three_pairs():
    cfg = small_cfg()
    out = RoSTFine(cfg).forward_clip(random_clip(cfg))
    cos = out.cosines()
    assert sorted(cos) == ["gs", "gt", "st"]
    assert all(0.0 <= v <= 1.0 + 1e-12 for v in cos.values())


def test_sampled_grad_check_on_small_model():
    cfg = small_cfg(seed=13)
    model = RoSTFine(cfg)
    params = model.parameters()
    patches = np.random.default_rng(3).random((cfg.frames * cfg.patches_per_frame, 3 * cfg.patch ** 2))
    y = np.array([0.1, 0.2, 0.4, 0.2, 0.1])
    lcfg = LossConfig(loss_kind="js", alpha=0.5)

    def f():
        return total_loss(model.forward(patches), y, lcfg)

    names = sorted(params)
    err, checked = grad_check_sampled(f, [params[n] for n in names], h=1e-5, per_tensor=2, seed=0)
    assert checked >= len(names) * 2 - 5
    assert err < 1e-4


def test_strict_equations_mode_runs():
    cfg = small_cfg(strict_equations=True)
    out = RoSTFine(cfg).forward_clip(random_clip(cfg))
    assert abs(out.final.data.sum() - 1.0) < 1e-9
