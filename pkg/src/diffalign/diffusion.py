"""Closed-form diffusion math: noise schedule, forward draws, DDIM stepping.

Everything here is pure tensor algebra. Randomness is always injected by the
caller (``eps`` / ``noise`` arguments), never drawn internally, so all
operations are deterministic and safe to use concurrently.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import torch

from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step noise variances and their cumulative products.

    ``beta[i]`` is the variance added at timestep ``i + 1`` (timesteps are
    1-based; index 0 of each array belongs to t=1). ``alpha_bar_at(0)`` is
    defined as 1 so a reverse step targeting t=0 returns the clean estimate.
    """

    T: int
    kind: str
    beta_start: float
    beta_end: float
    beta: torch.Tensor
    alpha: torch.Tensor
    alpha_bar: torch.Tensor

    def alpha_bar_at(self, t: int | torch.Tensor) -> torch.Tensor:
        """Cumulative product at timestep ``t`` (int or integer tensor), with t=0 -> 1."""
        if isinstance(t, torch.Tensor):
            if (t < 0).any() or (t > self.T).any():
                raise ConfigError(f"timestep out of [0, {self.T}]")
            idx = (t - 1).clamp(min=0)
            ab = self.alpha_bar[idx]
            return torch.where(t == 0, torch.ones_like(ab), ab)
        if not 0 <= t <= self.T:
            raise ConfigError(f"timestep {t} out of [0, {self.T}]")
        if t == 0:
            return torch.tensor(1.0, dtype=self.alpha_bar.dtype)
        return self.alpha_bar[t - 1]

    def to_json(self) -> str:
        return json.dumps(
            {"T": self.T, "kind": self.kind,
             "beta_start": self.beta_start, "beta_end": self.beta_end},
            sort_keys=True,
        )

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]

    @staticmethod
    def from_json(text: str) -> "NoiseSchedule":
        d = json.loads(text)
        return make_schedule(d["T"], d["kind"], d["beta_start"], d["beta_end"])


def make_schedule(T: int, kind: str = "linear",
                  beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Build a noise schedule. Only the linear beta ramp is supported."""
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    if kind != "linear":
        raise ConfigError(f"unknown schedule kind {kind!r}")
    beta = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    alpha = 1.0 - beta
    alpha_bar = torch.cumprod(alpha, dim=0)
    return NoiseSchedule(T=T, kind=kind, beta_start=float(beta_start),
                         beta_end=float(beta_end), beta=beta, alpha=alpha,
                         alpha_bar=alpha_bar)


def _broadcast_ab(ab: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    # per-sample timesteps broadcast over trailing (C, H, W) dims
    if ab.ndim == 1 and like.ndim > 1:
        ab = ab.view(-1, *([1] * (like.ndim - 1)))
    return ab.to(like.dtype)


def q_sample(x0: torch.Tensor, t: int | torch.Tensor, eps: torch.Tensor,
             schedule: NoiseSchedule) -> torch.Tensor:
    """Diffuse ``x0`` to timestep ``t``: sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps."""
    if eps.shape != x0.shape:
        raise ShapeError(f"eps shape {tuple(eps.shape)} != x0 shape {tuple(x0.shape)}")
    if isinstance(t, int) and not 1 <= t <= schedule.T:
        raise ConfigError(f"timestep {t} out of [1, {schedule.T}]")
    ab = _broadcast_ab(schedule.alpha_bar_at(t), x0)
    return torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * eps


def eps_from_x0(x_t: torch.Tensor, x0_hat: torch.Tensor, t: int | torch.Tensor,
                schedule: NoiseSchedule) -> torch.Tensor:
    """Noise implied by a clean estimate: (x_t - sqrt(ab_t) * x0_hat) / sqrt(1 - ab_t)."""
    if x0_hat.shape != x_t.shape:
        raise ShapeError(
            f"x0_hat shape {tuple(x0_hat.shape)} != x_t shape {tuple(x_t.shape)}")
    ab = _broadcast_ab(schedule.alpha_bar_at(t), x_t)
    if (ab >= 1.0).any():
        raise ZeroDivisionError("alpha_bar at t is 1; noise is undefined")
    return (x_t - torch.sqrt(ab) * x0_hat) / torch.sqrt(1.0 - ab)


def x0_from_eps(x_t: torch.Tensor, eps_hat: torch.Tensor, t: int | torch.Tensor,
                schedule: NoiseSchedule) -> torch.Tensor:
    """Clean estimate implied by a noise estimate (inverse of the forward draw)."""
    if eps_hat.shape != x_t.shape:
        raise ShapeError(
            f"eps_hat shape {tuple(eps_hat.shape)} != x_t shape {tuple(x_t.shape)}")
    ab = _broadcast_ab(schedule.alpha_bar_at(t), x_t)
    return (x_t - torch.sqrt(1.0 - ab) * eps_hat) / torch.sqrt(ab)


def ddim_step(x_t: torch.Tensor, x0_hat: torch.Tensor, t: int, t_prev: int,
              sigma_t: float, schedule: NoiseSchedule,
              noise: torch.Tensor | None = None) -> torch.Tensor:
    """One strided reverse step from timestep ``t`` to ``t_prev``.

    x_prev = sqrt(ab_prev) * x0_hat + sqrt(1 - ab_prev - sigma^2) * eps_hat
             + sigma * noise,
    with eps_hat recovered from (x_t, x0_hat). ``noise`` must be a standard
    normal draw supplied by the caller and is only consumed when sigma > 0.
    """
    if not 0 <= t_prev < t <= schedule.T:
        raise ConfigError(f"need 0 <= t_prev < t <= T, got t={t}, t_prev={t_prev}")
    if sigma_t < 0:
        raise ConfigError(f"sigma must be >= 0, got {sigma_t}")
    ab_prev = float(schedule.alpha_bar_at(t_prev))
    if sigma_t ** 2 > 1.0 - ab_prev + 1e-12:
        raise ConfigError(
            f"sigma^2 = {sigma_t ** 2:.3g} exceeds 1 - alpha_bar_prev = {1.0 - ab_prev:.3g}")
    eps_hat = eps_from_x0(x_t, x0_hat, t, schedule)
    dir_coef = max(1.0 - ab_prev - sigma_t ** 2, 0.0) ** 0.5
    x_prev = (ab_prev ** 0.5) * x0_hat + dir_coef * eps_hat
    if sigma_t > 0:
        if noise is None:
            raise ConfigError("sigma > 0 requires a noise draw")
        if noise.shape != x_t.shape:
            raise ShapeError("noise shape mismatch")
        x_prev = x_prev + sigma_t * noise
    return x_prev


def sigma_for_eta(eta: float, t: int, t_prev: int, schedule: NoiseSchedule) -> float:
    """DDIM eta-scaled stochasticity; eta=0 gives the deterministic sampler."""
    if eta == 0.0:
        return 0.0
    ab_t = float(schedule.alpha_bar_at(t))
    ab_prev = float(schedule.alpha_bar_at(t_prev))
    return eta * ((1 - ab_prev) / (1 - ab_t)) ** 0.5 * (1 - ab_t / ab_prev) ** 0.5
