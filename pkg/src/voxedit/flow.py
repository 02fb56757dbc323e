"""Rectified-flow velocity fields, guidance and the Euler sampler.

Time runs from noise at ``t = 1`` to data at ``t = 0`` along the linear path
``x(t) = (1 - t) x0 + t x1``. Velocities are never evaluated at ``t = 0``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logsumexp

from .latent import downsample_avg, upsample_trilinear


@dataclass(frozen=True)
class Condition:
    """Conditioning signal.

    ``raster`` feeds trainable models, ``label`` selects the anchor of an
    analytic model. A null condition is the unconditional CFG branch.
    """

    raster: np.ndarray | None = None
    label: str | None = None
    null: bool = False

    @property
    def key(self) -> str:
        return "null" if self.null else str(self.label)


NULL = Condition(null=True)


def _check_time(t: float) -> float:
    t = float(t)
    if not 0.0 < t <= 1.0:
        raise ValueError(f"velocity evaluated at t={t}; need t in (0, 1]")
    return t


def linear_path(x0: np.ndarray, x1: np.ndarray, t: float) -> np.ndarray:
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise ValueError(f"shape mismatch {x0.shape} vs {x1.shape}")
    if t == 0:
        return x0.copy()
    if t == 1:
        return x1.copy()
    return (1.0 - t) * x0 + t * x1


def analytic_velocity_pointmass(x: np.ndarray, t: float, x0: np.ndarray) -> np.ndarray:
    """Exact velocity of the flow whose data distribution is a point mass at ``x0``."""
    t = _check_time(t)
    return (np.asarray(x, dtype=np.float64) - x0) / t


def analytic_velocity_mixture(x, t, anchors, weights) -> np.ndarray:
    """Exact velocity for a weighted mixture of point masses.

    ``anchors`` has shape ``(J, *x.shape)``. Posterior weights come from the
    Gaussian likelihood ``N(x; (1 - t) a_j, t^2 I)`` and are normalised with
    log-sum-exp.
    """
    t = _check_time(t)
    anchors = np.asarray(anchors, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if anchors.shape[0] == 0:
        raise ValueError("empty anchor set")
    x = np.asarray(x, dtype=np.float64)
    diff = x[None] - (1.0 - t) * anchors
    sq = np.sum(diff.reshape(len(anchors), -1) ** 2, axis=1)
    with np.errstate(divide="ignore"):
        logw = np.log(weights) - sq / (2.0 * t * t)
    post = np.exp(logw - logsumexp(logw))
    mean_anchor = np.tensordot(post, anchors, axes=1)
    return (x - mean_anchor) / t


class VelocityModel:
    """Base class: ``velocity(x, t, cond)`` returns an array shaped like ``x``."""

    trainable = False

    def velocity(self, x: np.ndarray, t: float, cond: Condition) -> np.ndarray:
        raise NotImplementedError


class AnalyticPointMass(VelocityModel):
    def __init__(self, anchors: dict[str, np.ndarray]):
        self.anchors = {k: np.asarray(v, dtype=np.float64) for k, v in anchors.items()}

    def velocity(self, x, t, cond):
        return analytic_velocity_pointmass(x, t, self.anchors[cond.key])


class AnalyticMixture(VelocityModel):
    def __init__(self, components: dict[str, tuple[np.ndarray, np.ndarray]]):
        self.components = {}
        for key, (anchors, weights) in components.items():
            weights = np.asarray(weights, dtype=np.float64)
            if np.any(weights < 0) or not np.isclose(weights.sum(), 1.0):
                raise ValueError("mixture weights must be non-negative and sum to 1")
            self.components[key] = (np.asarray(anchors, dtype=np.float64), weights)

    def velocity(self, x, t, cond):
        anchors, weights = self.components[cond.key]
        return analytic_velocity_mixture(x, t, anchors, weights)


def _silu(a):
    return a * expit(a)


def _silu_grad(a):
    s = expit(a)
    return s * (1.0 + a * (1.0 - s))


PARAM_NAMES = ("cond_w", "cond_b", "w1", "b1", "w2", "b2", "w3", "b3", "w_out", "b_out")


class MlpModel(VelocityModel):
    """Conditional MLP velocity field.

    Input is the flattened latent (times ``in_scale``), a sinusoidal time
    embedding and a one-layer embedding of the condition raster; three SiLU
    hidden layers follow. With ``output="clean"`` the network predicts the
    clean latent and the velocity is ``(x - x_hat) / t``; with
    ``output="velocity"`` the network output is the velocity itself.
    """

    trainable = True

    def __init__(
        self,
        latent_shape: tuple[int, ...],
        cond_dim: int,
        hidden: int = 256,
        cond_hidden: int = 64,
        n_freq: int = 8,
        output: str = "clean",
        in_scale: float = 0.125,
        seed: int = 0,
        params: dict[str, np.ndarray] | None = None,
    ):
        if output not in ("clean", "velocity"):
            raise ValueError(f"unknown output parametrisation {output!r}")
        self.latent_shape = tuple(int(s) for s in latent_shape)
        self.n_latent = int(np.prod(self.latent_shape))
        self.cond_dim = int(cond_dim)
        self.hidden = int(hidden)
        self.cond_hidden = int(cond_hidden)
        self.n_freq = int(n_freq)
        self.output = output
        self.in_scale = float(in_scale)
        self.freqs = np.pi * 2.0 ** np.arange(self.n_freq)
        self.params = params if params is not None else self._init_params(seed)
        for name in PARAM_NAMES:
            if self.params[name].shape != self.param_shapes()[name]:
                raise ValueError(f"parameter {name} has shape {self.params[name].shape}")

    @property
    def n_in(self) -> int:
        return self.n_latent + 2 * self.n_freq + self.cond_hidden

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        h, ch = self.hidden, self.cond_hidden
        return {
            "cond_w": (self.cond_dim, ch),
            "cond_b": (ch,),
            "w1": (self.n_in, h),
            "b1": (h,),
            "w2": (h, h),
            "b2": (h,),
            "w3": (h, h),
            "b3": (h,),
            "w_out": (h, self.n_latent),
            "b_out": (self.n_latent,),
        }

    def _init_params(self, seed: int) -> dict[str, np.ndarray]:
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in self.param_shapes().items():
            if name.startswith("b") or name == "cond_b" or name == "w_out":
                params[name] = np.zeros(shape)
            else:
                params[name] = rng.standard_normal(shape) / np.sqrt(shape[0])
        return params

    def time_embedding(self, t: np.ndarray) -> np.ndarray:
        ang = np.asarray(t, dtype=np.float64)[:, None] * self.freqs[None, :]
        return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)

    def cond_input(self, cond: Condition) -> np.ndarray:
        if cond.null or cond.raster is None:
            return np.zeros(self.cond_dim)
        flat = np.asarray(cond.raster, dtype=np.float64).ravel()
        if flat.size != self.cond_dim:
            raise ValueError(f"condition has {flat.size} values, model expects {self.cond_dim}")
        return flat

    def forward(self, x: np.ndarray, t: np.ndarray, c: np.ndarray):
        """Batched forward pass on flat inputs; returns (raw output, cache)."""
        p = self.params
        ce_pre = c @ p["cond_w"] + p["cond_b"]
        ce = _silu(ce_pre)
        h0 = np.concatenate([x * self.in_scale, self.time_embedding(t), ce], axis=1)
        a1 = h0 @ p["w1"] + p["b1"]
        h1 = _silu(a1)
        a2 = h1 @ p["w2"] + p["b2"]
        h2 = _silu(a2)
        a3 = h2 @ p["w3"] + p["b3"]
        h3 = _silu(a3)
        out = h3 @ p["w_out"] + p["b_out"]
        cache = (c, ce_pre, h0, a1, h1, a2, h2, a3, h3)
        return out, cache

    def backward(self, d_out: np.ndarray, cache) -> dict[str, np.ndarray]:
        p = self.params
        c, ce_pre, h0, a1, h1, a2, h2, a3, h3 = cache
        g = {"w_out": h3.T @ d_out, "b_out": d_out.sum(axis=0)}
        da3 = (d_out @ p["w_out"].T) * _silu_grad(a3)
        g["w3"], g["b3"] = h2.T @ da3, da3.sum(axis=0)
        da2 = (da3 @ p["w3"].T) * _silu_grad(a2)
        g["w2"], g["b2"] = h1.T @ da2, da2.sum(axis=0)
        da1 = (da2 @ p["w2"].T) * _silu_grad(a1)
        g["w1"], g["b1"] = h0.T @ da1, da1.sum(axis=0)
        dce = da1 @ p["w1"][self.n_in - self.cond_hidden :].T
        dce_pre = dce * _silu_grad(ce_pre)
        g["cond_w"], g["cond_b"] = c.T @ dce_pre, dce_pre.sum(axis=0)
        return g

    def predict(self, x: np.ndarray, t: np.ndarray, c: np.ndarray) -> np.ndarray:
        """Batched velocities for flat latents ``x`` (B, n) at times ``t`` (B,)."""
        out, _ = self.forward(x, t, c)
        if self.output == "velocity":
            return out
        return (x - out) / np.asarray(t)[:, None]

    def velocity(self, x, t, cond):
        t = _check_time(t)
        x = np.asarray(x, dtype=np.float64)
        if x.shape != self.latent_shape:
            raise ValueError(f"latent shape {x.shape} != model shape {self.latent_shape}")
        v = self.predict(x.reshape(1, -1), np.array([t]), self.cond_input(cond)[None])
        return v.reshape(self.latent_shape)


class ResampledModel(VelocityModel):
    """Run a coarse model on a finer latent.

    The coarse clean estimate is upsampled, so detail that the coarse grid
    cannot represent is driven to zero like a point-mass flow:
    ``v = up(v_c(down x)) + (x - up(down x)) / t``.
    """

    def __init__(self, inner: VelocityModel, factor: int):
        self.inner = inner
        self.factor = int(factor)

    def velocity(self, x, t, cond):
        t = _check_time(t)
        coarse = downsample_avg(x, self.factor)
        v = upsample_trilinear(self.inner.velocity(coarse, t, cond), self.factor)
        residual = np.asarray(x, dtype=np.float64) - upsample_trilinear(coarse, self.factor)
        return v + residual / t


def cfg_velocity(model: VelocityModel, x, t, cond: Condition, scale: float) -> np.ndarray:
    """Classifier-free guidance ``v_null + s (v_c - v_null)``; exact at s = 0 and s = 1."""
    if scale < 0:
        raise ValueError("guidance scale must be non-negative")
    if scale == 1.0:
        return model.velocity(x, t, cond)
    v_null = model.velocity(x, t, NULL)
    if scale == 0.0:
        return v_null
    return v_null + scale * (model.velocity(x, t, cond) - v_null)


@dataclass(frozen=True)
class TimeGrid:
    steps: int = 25

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("need at least one step")

    @property
    def knots(self) -> np.ndarray:
        """``t_i = i / T`` for ``i = T .. 0`` (descending)."""
        return np.arange(self.steps, -1, -1) / self.steps


def sample_euler(model, cond, shape, steps: int = 25, cfg: float = 1.0, seed: int = 0):
    """Integrate from standard-normal noise at ``t = 1`` down to ``t = 0``."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape)
    knots = TimeGrid(steps).knots
    for t_i, t_prev in zip(knots[:-1], knots[1:]):
        x = x + (t_prev - t_i) * cfg_velocity(model, x, t_i, cond, cfg)
    return x


@dataclass
class TrainConfig:
    lr: float = 1e-3
    steps: int = 2000
    batch_size: int = 32
    cond_dropout: float = 0.1
    seed: int = 0
    momentum: float = 0.9
    clip_norm: float = 1.0
    t_min: float = 0.0
    weighting: str = "velocity"
    optimizer: str = "sgd"
    beta2: float = 0.999

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.lr <= 0 or self.steps < 1 or self.batch_size < 1:
            raise ValueError("lr, steps and batch_size must be positive")
        if not 0.0 <= self.cond_dropout < 1.0:
            raise ValueError("cond_dropout must be in [0, 1)")
        if not 0.0 <= self.t_min < 1.0:
            raise ValueError("t_min must be in [0, 1)")


class TrainingError(RuntimeError):
    pass


WEIGHTINGS = ("velocity", "importance", "clean")


def draw_training_batch(x0, c, rng, cond_dropout=0.0, t_min=0.0, weighting="velocity"):
    """Noise, times, per-sample loss weights and (possibly dropped) conditions.

    ``velocity``: t uniform on ``(t_min, 1]``, unit weights (the plain
    rectified-flow objective). ``importance``: t drawn with density
    proportional to ``1 / t^2`` and weighted so the estimate of the
    ``velocity`` objective stays unbiased. ``clean``: t uniform, weight
    ``t^2``, i.e. squared error of the implied clean estimate.
    """
    if weighting not in WEIGHTINGS:
        raise ValueError(f"unknown loss weighting {weighting!r}")
    B = x0.shape[0]
    x1 = rng.standard_normal(x0.shape)
    # 1 - U[0, 1) lies in (0, 1]
    u = 1.0 - rng.random(B)
    if weighting == "importance":
        if t_min <= 0:
            raise ValueError("importance sampling of t needs t_min > 0")
        t = 1.0 / (1.0 / t_min - u * (1.0 / t_min - 1.0))
        w = t * t / t_min
    else:
        t = t_min + (1.0 - t_min) * u
        w = t * t if weighting == "clean" else np.ones(B)
    keep = rng.random(B) >= cond_dropout
    return x1, t, w, c * keep[:, None]


def velocity_loss(v_pred: np.ndarray, x0: np.ndarray, x1: np.ndarray) -> float:
    """Batch mean of ``||v - (x1 - x0)||^2``."""
    diff = v_pred - (x1 - x0)
    return float(np.sum(diff * diff) / x0.shape[0])


def flow_matching_loss(model, x0, c, seed=0, cond_dropout=0.0, t_min=0.0, weighting="velocity", rng=None):
    """Rectified-flow loss on a batch of flat latents and its parameter gradients.

    ``x0`` is ``(B, n)`` clean latents, ``c`` is ``(B, cond_dim)`` rasters.
    Returns ``(loss, grads)``.
    """
    if not getattr(model, "trainable", False):
        raise ValueError("flow_matching_loss needs a trainable model")
    x0 = np.asarray(x0, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    rng = rng if rng is not None else np.random.default_rng(seed)
    x1, t, w, c = draw_training_batch(x0, c, rng, cond_dropout, t_min, weighting)
    xt = (1.0 - t)[:, None] * x0 + t[:, None] * x1
    out, cache = model.forward(xt, t, c)
    if model.output == "velocity":
        v = out
    else:
        v = (xt - out) / t[:, None]
    diff = v - (x1 - x0)
    B = x0.shape[0]
    loss = float(np.sum(w[:, None] * diff * diff) / B)
    d_v = 2.0 * w[:, None] * diff / B
    d_out = d_v if model.output == "velocity" else -d_v / t[:, None]
    return loss, model.backward(d_out, cache)


def evaluate_loss(model, x0, c, seed=0, draws=4, t_min=0.0, weighting="velocity") -> float:
    """Weighted loss over fixed noise draws, no condition dropout.

    ``importance`` is evaluated as ``velocity``, the objective it estimates.
    """
    if weighting == "importance":
        weighting = "velocity"
    x0 = np.asarray(x0, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    rng = np.random.default_rng(seed)
    total = 0.0
    for _ in range(draws):
        x1, t, w, cc = draw_training_batch(x0, c, rng, 0.0, t_min, weighting)
        xt = (1.0 - t)[:, None] * x0 + t[:, None] * x1
        diff = model.predict(xt, t, cc) - (x1 - x0)
        total += float(np.sum(w[:, None] * diff * diff) / len(x0))
    return total / draws


@dataclass
class TrainState:
    losses: list[float] = field(default_factory=list)


def train(model: MlpModel, x0: np.ndarray, c: np.ndarray, config: TrainConfig, log=None) -> TrainState:
    """Minibatch training with global-norm clipping; mutates ``model.params``.

    ``sgd`` is heavy-ball momentum. ``adam`` reuses ``momentum`` as the first
    moment decay and ``beta2`` for the second, with bias correction.
    """
    if not getattr(model, "trainable", False):
        raise ValueError("model is not trainable")
    x0 = np.asarray(x0, dtype=np.float64).reshape(len(x0), -1)
    c = np.asarray(c, dtype=np.float64).reshape(len(c), -1)
    if len(x0) == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(config.seed)
    m1 = {name: np.zeros_like(p) for name, p in model.params.items()}
    m2 = {name: np.zeros_like(p) for name, p in model.params.items()}
    b1, b2 = config.momentum, config.beta2
    state = TrainState()
    for step in range(config.steps):
        idx = rng.integers(0, len(x0), size=config.batch_size)
        loss, grads = flow_matching_loss(
            model, x0[idx], c[idx], cond_dropout=config.cond_dropout,
            t_min=config.t_min, weighting=config.weighting, rng=rng,
        )
        if not np.isfinite(loss):
            raise TrainingError(f"loss diverged at step {step}")
        norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        scale = min(1.0, config.clip_norm / norm) if norm > 0 else 1.0
        for name in PARAM_NAMES:
            g = scale * grads[name]
            if config.optimizer == "sgd":
                m1[name] = b1 * m1[name] - config.lr * g
                model.params[name] += m1[name]
            else:
                m1[name] = b1 * m1[name] + (1 - b1) * g
                m2[name] = b2 * m2[name] + (1 - b2) * g * g
                m_hat = m1[name] / (1 - b1 ** (step + 1))
                v_hat = m2[name] / (1 - b2 ** (step + 1))
                model.params[name] -= config.lr * m_hat / (np.sqrt(v_hat) + 1e-8)
        state.losses.append(loss)
        if log is not None and (step % 200 == 0 or step == config.steps - 1):
            log(step, loss)
    return state
