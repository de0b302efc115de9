"""Attention rollout and PGM heatmap export."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from rostfine.netpbm import read_pgm
from rostfine.rollout import (
    DegenerateHeatmapError,
    RolloutError,
    attention_rollout,
    export_heatmap,
    heatmap_to_image,
)


def stochastic(rng, size):
    raw = rng.random((size, size)) + 1e-3
    return raw / raw.sum(axis=-1, keepdims=True)


def test_identity_attention_is_degenerate():
    layers = [np.eye(5), np.eye(5)]
    with pytest.raises(DegenerateHeatmapError):
        attention_rollout(layers)


def test_uniform_attention_gives_uniform_heatmap():
    n = 4
    layers = [np.full((1 + n, 1 + n), 1.0 / (1 + n))] * 3
    heat = attention_rollout(layers)
    assert_allclose(heat, 1.0 / n, atol=1e-12)


def test_two_random_layers_match_matrix_product_oracle():
    rng = np.random.default_rng(0)
    size = 6
    a1, a2 = stochastic(rng, size), stochastic(rng, size)
    heat = attention_rollout([a1, a2])

    eye = np.eye(size)
    t1 = 0.5 * a1 + 0.5 * eye
    t1 /= t1.sum(axis=-1, keepdims=True)
    t2 = 0.5 * a2 + 0.5 * eye
    t2 /= t2.sum(axis=-1, keepdims=True)
    product = t2 @ t1
    expected = product[0, 1:] / product[0, 1:].sum()
    assert_allclose(heat, expected, atol=1e-12)


def test_rollout_stages_remain_stochastic():
    rng = np.random.default_rng(1)
    for _ in range(100):
        layers = [stochastic(rng, 5) for _ in range(3)]
        rollout = None
        for a in layers:
            adj = 0.5 * a + 0.5 * np.eye(5)
            adj /= adj.sum(axis=-1, keepdims=True)
            rollout = adj if rollout is None else adj @ rollout
            assert_allclose(rollout.sum(axis=-1), 1.0, atol=1e-6)
        heat = attention_rollout(layers)
        assert_allclose(heat.sum(), 1.0, atol=1e-12)
        assert np.all(heat >= 0)


def test_rollout_rejects_non_stochastic_rows():
    bad = np.full((4, 4), 0.3)
    with pytest.raises(RolloutError, match="stochastic"):
        attention_rollout([bad])


def test_rollout_rejects_mismatched_shapes():
    with pytest.raises(RolloutError, match="shape"):
        attention_rollout([np.eye(4), np.eye(5)])


# -- export -------------------------------------------------------------------


def test_constant_heatmap_exports_constant_gray(tmp_path):
    path = tmp_path / "heat.pgm"
    export_heatmap(np.full(16, 0.0625), grid=(4, 4), patch=8, path=path)
    image = read_pgm(path)
    assert image.shape == (32, 32)
    assert np.all(image == 128)


def test_single_hot_patch_is_one_bright_block(tmp_path):
    heat = np.zeros(16)
    heat[5] = 1.0  # grid row 1, col 1
    path = tmp_path / "hot.pgm"
    export_heatmap(heat, grid=(4, 4), patch=4, path=path)
    image = read_pgm(path)
    assert image.shape == (16, 16)
    assert np.all(image[4:8, 4:8] == 255)
    mask = np.ones((16, 16), bool)
    mask[4:8, 4:8] = False
    assert np.all(image[mask] == 0)


def test_export_is_byte_deterministic(tmp_path):
    rng = np.random.default_rng(2)
    heat = rng.random(16)
    a, b = tmp_path / "a.pgm", tmp_path / "b.pgm"
    export_heatmap(heat, grid=(4, 4), patch=8, path=a)
    export_heatmap(heat, grid=(4, 4), patch=8, path=b)
    assert a.read_bytes() == b.read_bytes()


def test_heatmap_grid_mismatch_errors():
    with pytest.raises(ValueError, match="grid"):
        heatmap_to_image(np.ones(10), grid=(4, 4), patch=8)
