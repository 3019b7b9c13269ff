"""Mean-reverting score SDE with terminal law N(mu, I).

Forward process (``beta`` linear in t):

    dx = 0.5 * beta(t) * (mu - x) dt + sqrt(beta(t)) dw

so x_t | x_0 is Gaussian with mean ``mu + (x0 - mu) * exp(-B(t)/2)`` and
standard deviation ``sqrt(1 - exp(-B(t)))`` where ``B`` integrates ``beta``.
The decoder estimates the score of that marginal; sampling runs the reverse SDE
backwards from t = 1 with Euler-Maruyama.

Functions accept numpy arrays or torch tensors unless the name says otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

BETA_MIN = 0.1
BETA_MAX = 20.0
T_EPS = 0.03
INFERENCE_STEPS = 30


def _exp(x):
    return torch.exp(x) if torch.is_tensor(x) else np.exp(x)


def _sqrt(x):
    return torch.sqrt(x) if torch.is_tensor(x) else np.sqrt(x)


@dataclass(frozen=True)
class NoiseSchedule:
    beta_min: float = BETA_MIN
    beta_max: float = BETA_MAX
    t_eps: float = T_EPS

    def __post_init__(self):
        if not 0 < self.beta_min <= self.beta_max:
            raise ValueError("need 0 < beta_min <= beta_max")
        if not 0 < self.t_eps < 1:
            raise ValueError("t_eps must lie in (0, 1)")

    def beta(self, t):
        return self.beta_min + (self.beta_max - self.beta_min) * t

    def cumulative(self, t):
        """B(t) = int_0^t beta(u) du."""
        return self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t

    def mean_coef(self, t):
        return _exp(-0.5 * self.cumulative(t))

    def std(self, t):
        return _sqrt(1.0 - _exp(-self.cumulative(t)))

    @property
    def terminal_mean_coef(self) -> float:
        return math.exp(-0.5 * self.cumulative(1.0))


@dataclass(frozen=True)
class DiffusionState:
    x_t: np.ndarray
    t: float
    mu: np.ndarray

    def __post_init__(self):
        if np.shape(self.x_t) != np.shape(self.mu):
            raise ValueError("x_t and mu must have the same shape")


def _check_t(t):
    lo, hi = (float(t.min()), float(t.max())) if torch.is_tensor(t) or isinstance(t, np.ndarray) else (t, t)
    if lo < 0.0 or hi > 1.0:
        raise ValueError(f"diffusion time must lie in [0, 1], got {t}")


def _bcast(coef, x):
    # per-example times (B,) against (B, T) signals
    if torch.is_tensor(coef) and coef.dim() == 1 and torch.is_tensor(x) and x.dim() > 1:
        return coef.view(-1, *([1] * (x.dim() - 1)))
    return coef


def forward_marginal(x0, mu, t, schedule: NoiseSchedule = NoiseSchedule()):
    """Mean and std of x_t given x_0 under the forward SDE."""
    _check_t(t)
    coef = _bcast(schedule.mean_coef(t), x0)
    mean = mu + (x0 - mu) * coef
    return mean, schedule.std(t)


def sample_xt(x0, mu, t: float, rng: np.random.Generator,
              schedule: NoiseSchedule = NoiseSchedule()) -> DiffusionState:
    x0 = np.asarray(x0, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    mean, std = forward_marginal(x0, mu, t, schedule)
    x_t = mean + std * rng.standard_normal(x0.shape) if std > 0 else mean.copy()
    return DiffusionState(x_t, float(t), mu)


def dsm_loss(decoder, x0: torch.Tensor, mu: torch.Tensor, s: torch.Tensor, n: torch.Tensor,
             generator: torch.Generator | None = None, schedule: NoiseSchedule = NoiseSchedule()):
    """Denoising score matching, E ||std(t) * score(x_t) + eps||^2 averaged per sample.

    ``decoder(x_t, mu, s, n, t)`` returns the score; inputs are (B, T) tensors and
    one t ~ U(t_eps, 1) is drawn per example.
    """
    batch = x0.shape[0]
    t = schedule.t_eps + (1.0 - schedule.t_eps) * torch.rand(batch, generator=generator, dtype=x0.dtype)
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    mean, std = forward_marginal(x0, mu, t, schedule)
    std = _bcast(std, x0)
    x_t = mean + std * eps
    score = decoder(x_t, mu, s, n, t)
    return (std * score + eps).pow(2).mean()


def reverse_sample(decoder, mu: torch.Tensor, s: torch.Tensor, n: torch.Tensor, n_steps: int = INFERENCE_STEPS,
                   schedule: NoiseSchedule = NoiseSchedule(), generator: torch.Generator | None = None,
                   denoise: bool = False, x_init: torch.Tensor | None = None) -> torch.Tensor:
    """Euler-Maruyama integration of the reverse SDE from t = 1 down to t_eps.

    Gradients flow through the decoder unless the caller disables them; the
    Gaussian increments are drawn up front so they act as fixed reparameterised
    noise. With ``denoise`` the last state is replaced by the posterior-mean
    estimate of x_0 implied by the final score (no residual noise at t_eps).
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    x = mu + torch.randn(mu.shape, generator=generator, dtype=mu.dtype) if x_init is None else x_init
    dt = (1.0 - schedule.t_eps) / n_steps
    noise = torch.randn((n_steps, *mu.shape), generator=generator, dtype=mu.dtype)
    batch = mu.shape[0] if mu.dim() > 1 else 1
    for k in range(n_steps):
        t = 1.0 - k * dt
        beta = schedule.beta(t)
        tt = torch.full((batch,), t, dtype=mu.dtype)
        score = decoder(x, mu, s, n, tt)
        drift = 0.5 * beta * (mu - x) - beta * score
        x = x - drift * dt + math.sqrt(beta * dt) * noise[k]
        if not torch.isfinite(x).all():
            raise FloatingPointError(
                f"reverse diffusion produced non-finite values at step {k + 1}/{n_steps} (t={t:.4f})")
    if denoise:
        t = schedule.t_eps
        tt = torch.full((batch,), t, dtype=mu.dtype)
        score = decoder(x, mu, s, n, tt)
        std = schedule.std(t)
        # Tweedie: E[x0 | x_t] = mu + (x_t + std^2 * score - mu) / mean_coef
        x = mu + (x + std ** 2 * score - mu) / schedule.mean_coef(t)
    return x


def gaussian_toy_score(m0: float, s0: float, mu: float, schedule: NoiseSchedule = NoiseSchedule()):
    """Exact score of the forward marginal when x_0 ~ N(m0, s0^2) (s0 = 0 gives a point mass)."""

    def score(x, _mu, _s, _n, t):
        coef = _bcast(schedule.mean_coef(t), x)
        var = coef ** 2 * s0 ** 2 + _bcast(schedule.std(t), x) ** 2
        mean = mu + (m0 - mu) * coef
        return -(x - mean) / var

    return score
