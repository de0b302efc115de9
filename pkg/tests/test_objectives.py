"""Loss-function laws: anchors, bounds, symmetry, gradient checks."""

from types import SimpleNamespace

import numpy as np
import pytest
from numpy.testing import assert_allclose

from rostfine.objectives import (
    LossConfig,
    diversity,
    diversity_loss,
    head_loss,
    js,
    kl,
    mse,
    total_loss,
)
from rostfine.tensor import Tensor, grad_check, softmax

LN2 = np.log(2.0)


def rand_simplex(rng):
    raw = rng.random(5) + 1e-9
    return raw / raw.sum()


# -- mse --------------------------------------------------------------------


def test_mse_identical_is_zero():
    p = [0.2, 0.2, 0.2, 0.2, 0.2]
    assert mse(p, p).item() == 0.0


def test_mse_disjoint_one_hots_is_exactly_point_four():
    assert mse([1, 0, 0, 0, 0], [0, 1, 0, 0, 0]).item() == 0.4


def test_mse_rejects_wrong_length():
    with pytest.raises(ValueError, match="length 5"):
        mse([0.5, 0.5], [0.5, 0.5])


def test_head_loss_three_identical_heads_equals_single():
    rng = np.random.default_rng(0)
    p, y = rand_simplex(rng), rand_simplex(rng)
    pt = Tensor(p)
    triple = {"g": pt, "s": pt, "t": pt}
    assert_allclose(head_loss(triple, y, "mse").item(), mse(p, y).item(), atol=1e-15)


# -- kl ------------------------------------------------------------------------


def test_kl_identical_is_near_zero():
    p = [0.3, 0.3, 0.2, 0.1, 0.1]
    assert abs(kl(p, p).item()) < 1e-12


def test_kl_one_hot_vs_half_half_is_ln2():
    got = kl([1, 0, 0, 0, 0], [0.5, 0.5, 0, 0, 0]).item()
    assert abs(got - LN2) < 1e-6


def test_kl_is_asymmetric():
    p = [0.7, 0.1, 0.1, 0.05, 0.05]
    q = [0.1, 0.4, 0.3, 0.1, 0.1]
    assert abs(kl(p, q).item() - kl(q, p).item()) > 1e-3


def test_kl_rejects_negative_entries():
    with pytest.raises(ValueError, match="non-negative"):
        kl([1.1, -0.1, 0, 0, 0], [0.2] * 5)


def test_kl_nonnegative_on_random_pairs():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        assert kl(rand_simplex(rng), rand_simplex(rng)).item() >= 0.0


# -- js ------------------------------------------------------------------------


def test_js_identical_is_near_zero():
    p = [0.25, 0.25, 0.25, 0.125, 0.125]
    assert abs(js(p, p).item()) < 1e-12


def test_js_disjoint_one_hots_is_ln2():
    got = js([1, 0, 0, 0, 0], [0, 0, 0, 0, 1]).item()
    assert abs(got - LN2) < 1e-6


def test_js_symmetric_and_bounded():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        p, q = rand_simplex(rng), rand_simplex(rng)
        a, b = js(p, q).item(), js(q, p).item()
        assert abs(a - b) < 1e-12
        assert -1e-12 <= a <= LN2 + 1e-6


# -- diversity -------------------------------------------------------------------


def test_diversity_orthogonal_is_zero():
    assert diversity(Tensor([1.0, 0.0]), Tensor([0.0, 3.0])).item() == 0.0


def test_diversity_identical_is_one():
    v = Tensor([0.3, -0.4, 1.2])
    assert abs(diversity(v, v).item() - 1.0) < 1e-12


def test_diversity_antiparallel_is_one():
    v = np.array([0.5, 2.0, -1.0])
    assert abs(diversity(Tensor(v), Tensor(-v)).item() - 1.0) < 1e-12


def test_diversity_zero_vector_errors():
    with pytest.raises(ValueError, match="zero vector"):
        diversity(Tensor([0.0, 0.0]), Tensor([1.0, 0.0]))


def test_diversity_loss_averages_three_pairs():
    rng = np.random.default_rng(3)
    emb = {k: Tensor(rng.standard_normal(6)) for k in ("g", "s", "t")}
    expected = (
        diversity(emb["g"], emb["s"]).item()
        + diversity(emb["g"], emb["t"]).item()
        + diversity(emb["s"], emb["t"]).item()
    ) / 3.0
    assert_allclose(diversity_loss(emb).item(), expected, atol=1e-15)


def test_diversity_loss_single_feature_is_none():
    assert diversity_loss({"g": Tensor(np.ones(4))}) is None


# -- total loss ----------------------------------------------------------------------


def _fake_output(rng, with_embeddings=True):
    preds = {k: Tensor(rand_simplex(rng)) for k in ("g", "s", "t")}
    emb = {k: Tensor(rng.standard_normal(8)) for k in ("g", "s", "t")} if with_embeddings else {}
    final = preds["g"]
    return SimpleNamespace(predictions=preds, embeddings=emb, final=final)


def test_total_loss_alpha_zero_is_base_exactly():
    rng = np.random.default_rng(4)
    out = _fake_output(rng)
    y = rand_simplex(rng)
    total = total_loss(out, y, LossConfig(loss_kind="mse", alpha=0.0))
    base = head_loss(out.predictions, y, "mse")
    assert total.item() == base.item()


def test_total_loss_is_base_plus_alpha_diversity():
    rng = np.random.default_rng(5)
    out = _fake_output(rng)
    y = rand_simplex(rng)
    cfg = LossConfig(loss_kind="js", alpha=1.0)
    total = total_loss(out, y, cfg).item()
    base = head_loss(out.predictions, y, "js", cfg.kl_epsilon).item()
    div = diversity_loss(out.embeddings).item()
    assert_allclose(total, base + 1.0 * div, atol=1e-15)


def test_alpha_sweep_grid_is_accepted():
    for a in (0.0, 0.01, 0.05, 0.1, 0.5, 1.0, 1.5):
        assert LossConfig(alpha=a).alpha == a


def test_total_loss_monotone_in_alpha():
    rng = np.random.default_rng(6)
    out = _fake_output(rng)
    y = rand_simplex(rng)
    values = [
        total_loss(out, y, LossConfig(alpha=a)).item()
        for a in (0.0, 0.01, 0.05, 0.1, 0.5, 1.0, 1.5)
    ]
    assert all(b >= a for a, b in zip(values, values[1:]))


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(loss_kind="l1")
    with pytest.raises(ValueError):
        LossConfig(alpha=-0.1)
    with pytest.raises(ValueError):
        LossConfig(kl_epsilon=0.0)
    with pytest.raises(ValueError):
        LossConfig(kl_epsilon=0.01)


# -- gradients ------------------------------------------------------------------------


@pytest.mark.parametrize("kind", ["mse", "js"])
def test_loss_gradients_match_finite_differences(kind):
    rng = np.random.default_rng(7)
    target = rand_simplex(rng)
    logits = Tensor(rng.standard_normal(5), requires_grad=True, name="logits")
    fn = {"mse": lambda p: mse(p, target), "js": lambda p: js(p, target)}[kind]

    def f():
        return fn(softmax(logits))

    assert grad_check(f, [logits], h=1e-5) < 1e-5


def test_diversity_gradient_matches_finite_differences():
    rng = np.random.default_rng(8)
    a = Tensor(rng.standard_normal(6), requires_grad=True, name="a")
    b = Tensor(rng.standard_normal(6), requires_grad=True, name="b")

    def f():
        return diversity(a, b)

    assert grad_check(f, [a, b], h=1e-5) < 1e-6
