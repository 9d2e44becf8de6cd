"""Gaussian diffusion math: schedules, forward noising, posterior, steppers.

Everything here is a pure function of its inputs (plus an explicitly passed
numpy Generator for the samplers), so it is safe to share across threads.
Schedule tables are precomputed in float64; array arguments may be numpy
arrays or torch tensors since only scalar coefficients are applied.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

COSINE_OFFSET = 0.008
BETA_MIN = 1e-8
BETA_MAX = 0.999


class ConfigurationError(ValueError):
    """A schedule or sampler was built from invalid settings."""


@dataclass(frozen=True)
class DiffusionSchedule:
    """Precomputed beta/alpha tables for T timesteps (t is 1-based)."""

    kind: str
    T: int
    range: tuple[float, float]
    beta: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    alpha_bar: np.ndarray = field(repr=False)
    posterior_var: np.ndarray = field(repr=False)

    def alpha_bar_at(self, t: int) -> float:
        """alpha_bar for 0 <= t <= T, with the alpha_bar_0 = 1 convention."""
        if t == 0:
            return 1.0
        return float(self.alpha_bar[t - 1])

    def alpha_at(self, t: int) -> float:
        return float(self.alpha[t - 1])

    def posterior_var_at(self, t: int) -> float:
        return float(self.posterior_var[t - 1])

    def to_dict(self) -> dict:
        return {"kind": self.kind, "T": self.T, "range": list(self.range)}


@dataclass(frozen=True)
class PerturbSpec:
    """A standardized noise family scaled so tau is the standard deviation."""

    dist: str = "gaussian"
    tau: float = 0.0

    def __post_init__(self):
        if self.dist not in ("gaussian", "uniform", "laplace", "poisson"):
            raise ConfigurationError(f"unknown perturbation dist: {self.dist!r}")
        if self.tau < 0:
            raise ConfigurationError(f"tau must be >= 0, got {self.tau}")


def make_schedule(kind: str, T: int, range_: tuple[float, float]) -> DiffusionSchedule:
    if T < 1:
        raise ConfigurationError(f"T must be >= 1, got {T}")
    lo, hi = float(range_[0]), float(range_[1])
    if kind == "linear":
        if lo <= 0 or hi <= 0:
            raise ConfigurationError(f"linear schedule endpoints must be positive, got {range_}")
        if lo > hi:
            # Some published configs list the range high-to-low; normalize.
            log.warning("linear schedule range %s is descending; normalizing to ascending", range_)
            lo, hi = hi, lo
        if hi >= 1.0:
            raise ConfigurationError(f"linear schedule endpoint must be < 1, got {hi}")
        beta = np.linspace(lo, hi, T, dtype=np.float64)
    elif kind == "cosine":
        s = COSINE_OFFSET
        steps = np.arange(T + 1, dtype=np.float64)
        f = np.cos((steps / T + s) / (1 + s) * math.pi / 2) ** 2
        abar = f / f[0]
        beta = np.clip(1.0 - abar[1:] / abar[:-1], BETA_MIN, BETA_MAX)
    else:
        raise ConfigurationError(f"unknown schedule kind: {kind!r}")

    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    alpha_bar_prev = np.concatenate(([1.0], alpha_bar[:-1]))
    posterior_var = (1.0 - alpha_bar_prev) / (1.0 - alpha_bar) * (1.0 - alpha)
    return DiffusionSchedule(
        kind=kind, T=T, range=(lo, hi), beta=beta, alpha=alpha,
        alpha_bar=alpha_bar, posterior_var=posterior_var,
    )


def _check_t(t: int, sched: DiffusionSchedule) -> None:
    if not 1 <= t <= sched.T:
        raise IndexError(f"timestep t={t} out of range [1, {sched.T}]")


def _check_shapes(a, b, what: str) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"shape mismatch in {what}: {tuple(a.shape)} vs {tuple(b.shape)}")


def q_sample(x0, t: int, eps, sched: DiffusionSchedule):
    """Forward noising: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    _check_t(t, sched)
    _check_shapes(x0, eps, "q_sample")
    abar = sched.alpha_bar_at(t)
    return math.sqrt(abar) * x0 + math.sqrt(1.0 - abar) * eps


def predict_x0_from_eps(x_t, eps, t: int, sched: DiffusionSchedule):
    """Invert q_sample given the noise: (x_t - sqrt(1-abar) eps) / sqrt(abar)."""
    _check_t(t, sched)
    _check_shapes(x_t, eps, "predict_x0_from_eps")
    abar = sched.alpha_bar_at(t)
    return (x_t - math.sqrt(1.0 - abar) * eps) / math.sqrt(abar)


def posterior_params(x_t, x0, t: int, sched: DiffusionSchedule):
    """Mean and variance of q(x_{t-1} | x_t, x0)."""
    _check_t(t, sched)
    _check_shapes(x_t, x0, "posterior_params")
    a = sched.alpha_at(t)
    abar = sched.alpha_bar_at(t)
    abar_prev = sched.alpha_bar_at(t - 1)
    coef_xt = math.sqrt(a) * (1.0 - abar_prev) / (1.0 - abar)
    coef_x0 = math.sqrt(abar_prev) * (1.0 - a) / (1.0 - abar)
    return coef_xt * x_t + coef_x0 * x0, sched.posterior_var_at(t)


def posterior_mean_from_eps(x_t, eps, t: int, sched: DiffusionSchedule):
    """Posterior mean with x0 substituted by its eps-based estimate."""
    _check_t(t, sched)
    _check_shapes(x_t, eps, "posterior_mean_from_eps")
    a = sched.alpha_at(t)
    abar = sched.alpha_bar_at(t)
    return (x_t - (1.0 - a) / math.sqrt(1.0 - abar) * eps) / math.sqrt(a)


def score_from_eps(eps_pred, t: int, sched: DiffusionSchedule):
    """Predicted noise -> score of the data distribution at level t."""
    _check_t(t, sched)
    return -eps_pred / math.sqrt(1.0 - sched.alpha_bar_at(t))


def eps_from_score(score, t: int, sched: DiffusionSchedule):
    _check_t(t, sched)
    return -score * math.sqrt(1.0 - sched.alpha_bar_at(t))


def ddpm_step(x_t, eps_pred, t: int, z, sched: DiffusionSchedule):
    """One ancestral sampling step; z must be zeros when t == 1."""
    _check_t(t, sched)
    mean = posterior_mean_from_eps(x_t, eps_pred, t, sched)
    if t == 1:
        return mean
    return mean + math.sqrt(sched.posterior_var_at(t)) * z


def ddim_step(x_t, eps_pred, t: int, t_prev: int, sched: DiffusionSchedule):
    """Deterministic (eta = 0) skip step from t down to t_prev (0 allowed)."""
    _check_t(t, sched)
    if not 0 <= t_prev < t:
        raise ValueError(f"t_prev={t_prev} must satisfy 0 <= t_prev < t={t}")
    x0_hat = predict_x0_from_eps(x_t, eps_pred, t, sched)
    abar_prev = sched.alpha_bar_at(t_prev)
    return math.sqrt(abar_prev) * x0_hat + math.sqrt(1.0 - abar_prev) * eps_pred


def ddim_timesteps(T: int, steps: int) -> list[int]:
    """Evenly spaced descending timestep ladder including T and 1."""
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if steps == 1:
        return [T]
    ts = np.unique(np.round(np.linspace(1, T, steps)).astype(int))
    return [int(t) for t in ts[::-1]]


def sample_perturbation(spec: PerturbSpec, shape, rng: np.random.Generator) -> np.ndarray:
    """Zero-mean noise with std exactly spec.tau from the chosen family."""
    if spec.tau == 0.0:
        return np.zeros(shape, dtype=np.float64)
    if spec.dist == "gaussian":
        z = rng.standard_normal(shape)
    elif spec.dist == "uniform":
        z = rng.uniform(-math.sqrt(3.0), math.sqrt(3.0), shape)
    elif spec.dist == "laplace":
        z = rng.laplace(0.0, 1.0 / math.sqrt(2.0), shape)
    elif spec.dist == "poisson":
        z = rng.poisson(1.0, shape).astype(np.float64) - 1.0
    else:  # pragma: no cover - rejected in PerturbSpec
        raise ConfigurationError(f"unknown perturbation dist: {spec.dist!r}")
    return spec.tau * z
