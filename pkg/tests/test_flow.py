import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import multivariate_normal

from voxedit import flow
from voxedit.flow import (
    NULL,
    AnalyticMixture,
    AnalyticPointMass,
    Condition,
    MlpModel,
    TimeGrid,
    TrainConfig,
    TrainingError,
)


def test_linear_path_endpoints_and_midpoint():
    x0 = np.array([1.0, -2.0, 3.5])
    x1 = np.array([0.3, 0.7, -1.1])
    assert np.array_equal(flow.linear_path(x0, x1, 0), x0)
    assert np.array_equal(flow.linear_path(x0, x1, 1), x1)
    np.testing.assert_allclose(flow.linear_path(np.zeros(2), np.ones(2), 0.25), [0.25, 0.25], atol=1e-15)
    with pytest.raises(ValueError):
        flow.linear_path(np.zeros(2), np.zeros(3), 0.5)


def test_pointmass_velocity():
    a = np.array([1.0, 2.0])
    assert np.array_equal(flow.analytic_velocity_pointmass(a, 0.3, a), np.zeros(2))
    np.testing.assert_allclose(
        flow.analytic_velocity_pointmass(np.array([2.0, 0.0]), 0.5, np.zeros(2)), [4.0, 0.0], atol=1e-15
    )
    with pytest.raises(ValueError):
        flow.analytic_velocity_pointmass(a, 0.0, a)


def test_mixture_with_one_anchor_is_the_point_mass(rng):
    a = rng.standard_normal(5)
    x = rng.standard_normal(5)
    v = flow.analytic_velocity_mixture(x, 0.4, a[None], np.array([1.0]))
    np.testing.assert_allclose(v, flow.analytic_velocity_pointmass(x, 0.4, a), atol=1e-12)


def test_symmetric_mixture_has_zero_velocity_at_origin():
    a = np.array([1.0, -0.5, 2.0])
    v = flow.analytic_velocity_mixture(np.zeros(3), 0.6, np.stack([a, -a]), np.array([0.5, 0.5]))
    np.testing.assert_allclose(v, 0.0, atol=1e-15)


def test_mixture_posterior_matches_explicit_densities(rng):
    # independent route: plain Gaussian pdfs, no log-sum-exp
    J, d, t = 4, 3, 0.7
    anchors = rng.standard_normal((J, d))
    weights = rng.dirichlet(np.ones(J))
    x = rng.standard_normal(d)
    dens = np.array([w * multivariate_normal(mean=(1 - t) * a, cov=t * t * np.eye(d)).pdf(x) for a, w in zip(anchors, weights)])
    post = dens / dens.sum()
    expected = (x - post @ anchors) / t
    np.testing.assert_allclose(flow.analytic_velocity_mixture(x, t, anchors, weights), expected, rtol=1e-6)


def test_mixture_rejects_empty_anchor_set():
    with pytest.raises(ValueError):
        flow.analytic_velocity_mixture(np.zeros(2), 0.5, np.zeros((0, 2)), np.zeros(0))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 2), st.floats(0.05, 1.0))
def test_mixture_with_all_weight_on_one_anchor(seed, j, t):
    r = np.random.default_rng(seed)
    anchors = r.standard_normal((3, 4))
    weights = np.zeros(3)
    weights[j] = 1.0
    x = r.standard_normal(4)
    v = flow.analytic_velocity_mixture(x, t, anchors, weights)
    np.testing.assert_allclose(v, (x - anchors[j]) / t, atol=1e-10)


def _small_model(output, seed=0):
    model = MlpModel((2, 2, 2), cond_dim=3, hidden=5, cond_hidden=4, n_freq=2, output=output, in_scale=0.5, seed=seed)
    r = np.random.default_rng(seed + 1)
    for name in flow.PARAM_NAMES:
        model.params[name] = 0.5 * r.standard_normal(model.params[name].shape)
    return model


@pytest.mark.parametrize("output", ["clean", "velocity"])
@pytest.mark.parametrize("weighting", ["velocity", "clean"])
def test_backprop_matches_central_differences(output, weighting):
    model = _small_model(output)
    r = np.random.default_rng(7)
    x0 = r.standard_normal((6, 8))
    c = r.standard_normal((6, 3))

    def loss():
        return flow.flow_matching_loss(model, x0, c, seed=3, cond_dropout=0.3, t_min=0.1, weighting=weighting)[0]

    _, grads = flow.flow_matching_loss(model, x0, c, seed=3, cond_dropout=0.3, t_min=0.1, weighting=weighting)
    h = 1e-4
    for name in flow.PARAM_NAMES:
        p = model.params[name]
        for flat in r.choice(p.size, size=min(4, p.size), replace=False):
            idx = np.unravel_index(flat, p.shape)
            old = p[idx]
            p[idx] = old + h
            up = loss()
            p[idx] = old - h
            down = loss()
            p[idx] = old
            fd = (up - down) / (2 * h)
            an = grads[name][idx]
            assert abs(fd - an) <= 1e-4 * max(abs(fd), abs(an), 1e-6), (name, idx, fd, an)


def test_zero_output_loss_is_chi_square_mean():
    # v = 0 and x0 = 0 leave ||x1||^2 with x1 ~ N(0, I_d): mean d
    model = MlpModel((2, 2, 2), cond_dim=1, hidden=3, cond_hidden=2, n_freq=1, output="velocity")
    for p in model.params.values():
        p[...] = 0.0
    n, d = 10_000, 8
    loss, _ = flow.flow_matching_loss(model, np.zeros((n, d)), np.zeros((n, 1)), seed=0)
    assert abs(loss - d) < 0.05 * d


class _Exact(MlpModel):
    """Returns a stored target regardless of input."""

    def __init__(self, target):
        super().__init__((2, 2, 2), cond_dim=1, hidden=3, cond_hidden=2, n_freq=1, output="velocity")
        self.target = target

    def forward(self, x, t, c):
        return self.target, None

    def backward(self, d_out, cache):
        return {k: np.zeros_like(v) for k, v in self.params.items()}


def test_loss_vanishes_for_the_exact_velocity(rng):
    x0 = rng.standard_normal((5, 8))
    c = np.zeros((5, 1))
    x1, *_ = flow.draw_training_batch(x0, c, np.random.default_rng(11))
    loss, _ = flow.flow_matching_loss(_Exact(x1 - x0), x0, c, seed=11)
    assert loss == 0.0
    assert flow.velocity_loss(x1 - x0, x0, x1) == 0.0


def test_loss_refuses_analytic_models():
    with pytest.raises(ValueError):
        flow.flow_matching_loss(AnalyticPointMass({"a": np.zeros(2)}), np.zeros((1, 2)), np.zeros((1, 1)))


def test_cfg_endpoints_are_exact_and_linear_between():
    model = _small_model("clean")
    x = np.random.default_rng(0).standard_normal((2, 2, 2))
    cond = Condition(raster=np.array([0.3, -1.0, 2.0]))
    v_c = model.velocity(x, 0.5, cond)
    v_0 = model.velocity(x, 0.5, NULL)
    assert np.array_equal(flow.cfg_velocity(model, x, 0.5, cond, 1.0), v_c)
    assert np.array_equal(flow.cfg_velocity(model, x, 0.5, cond, 0.0), v_0)
    np.testing.assert_allclose(flow.cfg_velocity(model, x, 0.5, cond, 2.0), 2 * v_c - v_0, atol=1e-12)
    with pytest.raises(ValueError):
        flow.cfg_velocity(model, x, 0.5, cond, -1.0)


def test_time_grid():
    np.testing.assert_array_equal(TimeGrid(4).knots, [1.0, 0.75, 0.5, 0.25, 0.0])
    with pytest.raises(ValueError):
        TimeGrid(0)


@pytest.mark.parametrize("steps", [1, 5, 25])
@pytest.mark.parametrize("seed", range(4))
def test_euler_sampler_lands_on_point_mass(steps, seed):
    b = np.random.default_rng(100 + seed).standard_normal((3, 3, 3))
    model = AnalyticPointMass({"b": b})
    x = flow.sample_euler(model, Condition(label="b"), b.shape, steps=steps, seed=seed)
    assert np.max(np.abs(x - b)) < 1e-6


def test_euler_sampler_is_deterministic():
    model = _small_model("clean")
    cond = Condition(raster=np.ones(3))
    a = flow.sample_euler(model, cond, (2, 2, 2), steps=7, cfg=3.0, seed=5)
    b = flow.sample_euler(model, cond, (2, 2, 2), steps=7, cfg=3.0, seed=5)
    assert a.tobytes() == b.tobytes()


def test_training_is_deterministic_and_lowers_loss(rng):
    x0 = rng.standard_normal((8, 8))
    c = rng.standard_normal((8, 3))
    cfg = TrainConfig(lr=3e-3, steps=150, batch_size=8, optimizer="adam", weighting="clean")
    m1, m2 = _small_model("clean"), _small_model("clean")
    before = flow.evaluate_loss(m1, x0, c, weighting="clean")
    flow.train(m1, x0, c, cfg)
    flow.train(m2, x0, c, cfg)
    for name in flow.PARAM_NAMES:
        assert m1.params[name].tobytes() == m2.params[name].tobytes()
    assert flow.evaluate_loss(m1, x0, c, weighting="clean") < before


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_training_raises_on_divergence():
    x0 = np.full((4, 8), np.inf)
    with pytest.raises(TrainingError):
        flow.train(_small_model("velocity"), x0, np.zeros((4, 3)), TrainConfig(steps=3, batch_size=2))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(optimizer="lbfgs")
    with pytest.raises(ValueError):
        TrainConfig(cond_dropout=1.0)
    with pytest.raises(ValueError):
        flow.draw_training_batch(np.zeros((2, 2)), np.zeros((2, 1)), np.random.default_rng(0), weighting="importance")


def test_importance_weights_keep_the_velocity_objective_unbiased():
    # E[w * f(t)] under the importance draw equals E[f(t)] under the uniform draw
    r = np.random.default_rng(0)
    t_min = 0.05
    _, t, w, _ = flow.draw_training_batch(np.zeros((200_000, 1)), np.zeros((200_000, 1)), r, t_min=t_min, weighting="importance")
    assert t.min() >= t_min and t.max() <= 1.0
    est = np.mean(w / t**2)
    exact = (1 / t_min - 1) / (1 - t_min)
    assert est == pytest.approx(exact, rel=0.02)


def test_resampled_model_on_point_masses_matches_coarse_anchor():
    # a coarse point mass seen through the resampler drives fine detail to zero
    coarse_anchor = np.random.default_rng(3).standard_normal((2, 2, 2))
    model = flow.ResampledModel(AnalyticPointMass({"a": coarse_anchor}), 2)
    x = flow.sample_euler(model, Condition(label="a"), (4, 4, 4), steps=10, seed=1)
    from voxedit.latent import upsample_trilinear

    np.testing.assert_allclose(x, upsample_trilinear(coarse_anchor, 2), atol=1e-9)


def test_model_velocity_shape_checks():
    model = _small_model("clean")
    with pytest.raises(ValueError):
        model.velocity(np.zeros((3, 3, 3)), 0.5, NULL)
    with pytest.raises(ValueError):
        model.velocity(np.zeros((2, 2, 2)), 0.5, Condition(raster=np.zeros(4)))
    with pytest.raises(ValueError):
        AnalyticMixture({"a": (np.zeros((2, 2)), np.array([0.7, 0.7]))})
