import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from voxedit import repaint as rp
from voxedit.flow import AnalyticPointMass, Condition, MlpModel, cfg_velocity
from voxedit.latent import feather
from voxedit.repaint import RepaintConfig

B_COND = Condition(label="b")


def _features(rng, R=4, F=3):
    return rng.standard_normal((R, R, R, F))


def _mlp(R=4, F=3, seed=0):
    model = MlpModel((R, R, R, F), cond_dim=2, hidden=6, cond_hidden=3, n_freq=2, seed=seed)
    model.params["w_out"] = 0.5 * np.random.default_rng(seed).standard_normal(model.params["w_out"].shape)
    return model


def test_feature_mask_edge_cases(rng):
    active = (rng.random((4, 4, 4)) > 0.4).astype(float)
    hard, soft = rp.build_feature_mask(np.zeros((8, 8, 8)), active, 1.0)
    assert not hard.any() and not soft.any()
    hard, soft = rp.build_feature_mask(np.ones((8, 8, 8)), active, 1.0)
    assert np.array_equal(hard, active) and np.array_equal(soft, active)


def test_feature_mask_impulse_is_the_restricted_gaussian(rng):
    active = (rng.random((9, 9, 9)) > 0.3).astype(float)
    mesh = np.zeros((9, 9, 9))
    mesh[4, 4, 4] = 1.0
    _, soft = rp.build_feature_mask(mesh, active, 1.0, dilation=0)
    # direct 3D kernel sum; the impulse sits far enough from the border
    w = np.array([math.exp(-0.5 * d * d) for d in range(-3, 4)])
    w /= w.sum()
    ref = np.zeros((9, 9, 9))
    ref[1:8, 1:8, 1:8] = w[:, None, None] * w[None, :, None] * w[None, None, :]
    np.testing.assert_allclose(soft, ref * active, atol=1e-15)


def test_step_with_zero_mask_is_pure_replay(rng):
    z, src, eps = _features(rng), _features(rng), _features(rng)
    out = rp.repaint_step(z, 0.6, 0.4, np.zeros(z.shape[:3]), src, _mlp(), Condition(raster=np.ones(2)), eps)
    assert np.array_equal(out, (1 - 0.4) * src + 0.4 * eps)


def test_step_with_full_mask_is_the_euler_step(rng):
    model, cond = _mlp(), Condition(raster=np.ones(2))
    z, src, eps = _features(rng), _features(rng), _features(rng)
    out = rp.repaint_step(z, 0.6, 0.4, np.ones(z.shape[:3]), src, model, cond, eps, cfg=3.0)
    assert np.array_equal(out, z + (0.4 - 0.6) * cfg_velocity(model, z, 0.6, cond, 3.0))


def test_half_mask_averages_the_branches(rng):
    model, cond = _mlp(), Condition(raster=np.ones(2))
    z, src, eps = _features(rng), _features(rng), _features(rng)
    out = rp.repaint_step(z, 0.6, 0.4, np.full(z.shape[:3], 0.5), src, model, cond, eps)
    gen = z - 0.2 * model.velocity(z, 0.6, cond)
    rep = 0.6 * src + 0.4 * eps
    np.testing.assert_allclose(out, 0.5 * (gen + rep), atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_blend_stays_between_branches(seed):
    r = np.random.default_rng(seed)
    model, cond = _mlp(seed=seed % 3), Condition(raster=r.standard_normal(2))
    z, src, eps = r.standard_normal((3, 4, 4, 4, 3))
    mask = r.random((4, 4, 4))
    out = rp.repaint_step(z, 0.8, 0.6, mask, src, model, cond, eps)
    gen = z - 0.2 * model.velocity(z, 0.8, cond)
    rep = 0.4 * src + 0.6 * eps
    lo, hi = np.minimum(gen, rep), np.maximum(gen, rep)
    assert np.all(out >= lo - 1e-12) and np.all(out <= hi + 1e-12)


def test_run_with_zero_mask_returns_source_bits(rng):
    src = _features(rng)
    field = rp.repaint_run(src, np.zeros(src.shape[:3]), _mlp(), Condition(raster=np.ones(2)), RepaintConfig(steps=5))
    assert field.features.tobytes() == src.tobytes()


def test_run_with_full_mask_reaches_point_mass(rng):
    src, b = _features(rng), _features(rng)
    model = AnalyticPointMass({"b": b})
    field = rp.repaint_run(src, np.ones(src.shape[:3]), model, B_COND, RepaintConfig(steps=7))
    assert np.max(np.abs(field.features - b)) < 1e-6


@pytest.mark.parametrize("soft", [False, True])
def test_masked_run_composes_source_and_target(rng, soft):
    src, b = _features(rng, R=6), _features(rng, R=6)
    hard = np.zeros((6, 6, 6))
    hard[2:4, 1:5, :] = 1.0
    mask = feather(hard, 1.0) if soft else hard
    field = rp.repaint_run(src, mask, AnalyticPointMass({"b": b}), B_COND, RepaintConfig(steps=9, seed=4))
    expected = mask[..., None] * b + (1 - mask[..., None]) * src
    assert np.max(np.abs(field.features - expected)) < 1e-6
    if not soft:
        out = mask == 0
        assert field.features[out].tobytes() == src[out].tobytes()


def test_runs_are_seed_deterministic(rng):
    src = _features(rng)
    mask = rng.random(src.shape[:3])
    args = (src, mask, _mlp(), Condition(raster=np.ones(2)), RepaintConfig(steps=4, seed=2))
    assert rp.repaint_run(*args).features.tobytes() == rp.repaint_run(*args).features.tobytes()


def test_callback_and_activity(rng):
    src = _features(rng)
    seen = []
    active = np.zeros(src.shape[:3])
    active[0] = 1
    field = rp.repaint_run(
        src, np.zeros(src.shape[:3]), _mlp(), Condition(raster=np.ones(2)), RepaintConfig(steps=3),
        activity=active, callback=lambda k, t, z: seen.append(k),
    )
    assert seen == [2, 1, 0]
    assert np.array_equal(field.activity, active)
    assert field.resolution == 4
    assert field.colors().min() >= 0 and field.colors().max() <= 1


def test_validation(rng):
    z = _features(rng)
    with pytest.raises(ValueError):
        rp.repaint_step(z, 0.5, 0.4, np.ones((3, 3, 3)), z, _mlp(), Condition(raster=np.ones(2)), z)
    with pytest.raises(ValueError):
        rp.repaint_step(z, 0.5, 0.4, np.ones(z.shape[:3]), z[..., :2], _mlp(), Condition(raster=np.ones(2)), z)
    with pytest.raises(ValueError):
        RepaintConfig(sigma_b=0.0)
    with pytest.raises(ValueError):
        rp.SlatField(np.zeros((4, 4, 4, 2)), np.zeros((3, 3, 3)))
