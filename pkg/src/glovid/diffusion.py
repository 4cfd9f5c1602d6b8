"""Closed-form diffusion arithmetic shared by the frame decoder and the
global-feature generator.

Conventions
-----------
- Timesteps are 1-based: t runs over 1..T, with alpha_bar(0) := 1, so that
  t = 1 posteriors and steps landing on t_prev = 0 collapse to the noiseless
  case.
- Schedule tables are float64 and the elementwise operations compute and
  return float64 regardless of input dtype - cast at the network boundary,
  not here. (In pure float32 the corruption/inversion round trip loses
  ~ulp(z_t)/sqrt(alpha_bar), which near t = T is worse than 1e-5; float64
  internals keep the inverse exact to rounding.)
- Everything here is a pure function of its arguments. NoiseSchedule is
  immutable after construction, so concurrent use needs no locking.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import torch

Tensor = torch.Tensor
Timestep = Union[int, Tensor]


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep beta_t, alpha_t = 1 - beta_t and alpha_bar_t = prod alpha.

    Storage is 0-based (``betas[k]`` is beta_{k+1}); the accessor methods take
    1-based timesteps.
    """

    betas: Tensor
    alphas: Tensor
    alpha_bars: Tensor

    @property
    def T(self) -> int:
        return int(self.betas.shape[0])

    def beta(self, t: int) -> Tensor:
        _check_scalar_t(t, self.T)
        return self.betas[t - 1]

    def alpha(self, t: int) -> Tensor:
        _check_scalar_t(t, self.T)
        return self.alphas[t - 1]

    def alpha_bar(self, t: int) -> Tensor:
        """alpha_bar at 1-based t, with alpha_bar(0) := 1."""
        if t == 0:
            return torch.ones((), dtype=self.alpha_bars.dtype)
        _check_scalar_t(t, self.T)
        return self.alpha_bars[t - 1]


@dataclass(frozen=True)
class PosteriorStats:
    """Mean and (scalar) variance of the reverse-process posterior."""

    mean: Tensor
    variance: float


def make_linear_schedule(T: int, beta_start: float = 1e-4,
                         beta_end: float = 0.02) -> NoiseSchedule:
    """Linearly interpolated betas from beta_start to beta_end over T steps."""
    if not isinstance(T, int) or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    if T == 1:
        betas = torch.tensor([beta_start], dtype=torch.float64)
    else:
        betas = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    alphas = 1.0 - betas
    alpha_bars = torch.cumprod(alphas, dim=0)
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def q_sample(z0: Tensor, t: Timestep, noise: Tensor,
             sched: NoiseSchedule) -> Tensor:
    """Corrupt z0 to timestep t:  sqrt(ab_t) * z0 + sqrt(1 - ab_t) * noise.

    ``t`` is a 1-based int, or a 1-D tensor of per-sample timesteps matching
    the leading dimension of ``z0``. The result is float64.
    """
    if z0.shape != noise.shape:
        raise ValueError(f"shape mismatch: z0 {tuple(z0.shape)} vs noise "
                         f"{tuple(noise.shape)}")
    ab = _alpha_bar_for(t, sched, z0)
    return ab.sqrt() * z0.double() + (1.0 - ab).sqrt() * noise.double()


def predict_x0_from_noise(zt: Tensor, t: Timestep, noise_pred: Tensor,
                          sched: NoiseSchedule) -> Tensor:
    """Invert q_sample given the noise:  (z_t - sqrt(1 - ab_t) * eps) / sqrt(ab_t).

    Float64 like q_sample, so corruption followed by inversion with the same
    noise returns z0 up to rounding far below any training signal.
    """
    if zt.shape != noise_pred.shape:
        raise ValueError(f"shape mismatch: zt {tuple(zt.shape)} vs noise_pred "
                         f"{tuple(noise_pred.shape)}")
    ab = _alpha_bar_for(t, sched, zt)
    return (zt.double() - (1.0 - ab).sqrt() * noise_pred.double()) / ab.sqrt()


def posterior_mean_variance(zt: Tensor, t: int, noise_pred: Tensor,
                            sched: NoiseSchedule) -> PosteriorStats:
    """Reverse-posterior mean/variance at 1-based t (alpha_bar(0) := 1).

    mean = (z_t - beta_t / sqrt(1 - ab_t) * eps) / sqrt(alpha_t)
    var  = (1 - ab_{t-1}) / (1 - ab_t) * beta_t
    """
    _check_scalar_t(t, sched.T)
    if zt.shape != noise_pred.shape:
        raise ValueError("shape mismatch between zt and noise_pred")
    beta = sched.beta(t)
    ab_t = sched.alpha_bar(t)
    ab_prev = sched.alpha_bar(t - 1)
    mean = (zt.double() - beta / (1.0 - ab_t).sqrt() * noise_pred.double()) \
        / sched.alpha(t).sqrt()
    variance = float((1.0 - ab_prev) / (1.0 - ab_t) * beta)
    return PosteriorStats(mean=mean, variance=variance)


def ddim_step(zt: Tensor, noise_pred: Tensor, t: int, t_prev: int, eta: float,
              sched: NoiseSchedule, fresh_noise: Optional[Tensor] = None,
              clip_x0: Optional[tuple[float, float]] = None) -> Tensor:
    """One implicit-sampler step from t down to t_prev (0 allowed).

    Deterministic at eta = 0. With eta > 0 the step injects
    sigma = eta * sqrt((1 - ab_prev) / (1 - ab_t)) * sqrt(1 - ab_t / ab_prev)
    of ``fresh_noise``. ``clip_x0`` optionally clamps the intermediate clean
    estimate to the data range, which keeps early high-t steps from throwing
    the trajectory far outside it when the denoiser is imperfect.
    """
    _check_scalar_t(t, sched.T)
    if not (0 <= t_prev < t):
        raise ValueError(f"need 0 <= t_prev < t, got t_prev={t_prev}, t={t}")
    if eta < 0:
        raise ValueError(f"eta must be >= 0, got {eta}")
    ab_t = sched.alpha_bar(t)
    ab_prev = sched.alpha_bar(t_prev)

    x0 = predict_x0_from_noise(zt, t, noise_pred, sched)
    if clip_x0 is not None:
        x0 = x0.clamp(clip_x0[0], clip_x0[1])
    sigma_sq = (eta ** 2) * float(
        (1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - ab_t / ab_prev))
    residual = float(1.0 - ab_prev) - sigma_sq
    if residual < -1e-12:
        raise ValueError(
            f"sigma^2 = {sigma_sq:.6g} exceeds 1 - alpha_bar(t_prev) = "
            f"{float(1.0 - ab_prev):.6g}; lower eta")
    out = ab_prev.sqrt() * x0 + math.sqrt(max(residual, 0.0)) * noise_pred.double()
    if sigma_sq > 0.0:
        if fresh_noise is None:
            raise ValueError("eta > 0 requires fresh_noise")
        if fresh_noise.shape != zt.shape:
            raise ValueError("fresh_noise shape mismatch")
        out = out + math.sqrt(sigma_sq) * fresh_noise.double()
    return out


def cfg_combine(eps_uncond: Tensor, eps_cond: Tensor, scale: float) -> Tensor:
    """Classifier-free guidance mix: eps_uncond + scale * (eps_cond - eps_uncond).

    The scale 0 and 1 endpoints return the unconditional and conditional
    inputs exactly (no float round-trip).
    """
    if eps_uncond.shape != eps_cond.shape:
        raise ValueError(f"shape mismatch: {tuple(eps_uncond.shape)} vs "
                         f"{tuple(eps_cond.shape)}")
    if scale == 0.0:
        return eps_uncond
    if scale == 1.0:
        return eps_cond
    return eps_uncond + scale * (eps_cond - eps_uncond)


def ddim_timestep_pairs(T: int, steps: int) -> list[tuple[int, int]]:
    """Descending (t, t_prev) pairs covering T..0 in ``steps`` near-even strides."""
    if not (1 <= steps <= T):
        raise ValueError(f"need 1 <= steps <= T, got steps={steps}, T={T}")
    grid = [int(round(T - k * T / steps)) for k in range(steps + 1)]
    # rounding can repeat a value when steps is close to T; drop duplicates
    ts: list[int] = []
    for v in grid:
        if not ts or v < ts[-1]:
            ts.append(v)
    if ts[0] != T or ts[-1] != 0:
        raise AssertionError("malformed timestep grid")
    return list(zip(ts[:-1], ts[1:]))


def _check_scalar_t(t: int, T: int) -> None:
    if not (1 <= int(t) <= T):
        raise ValueError(f"timestep {t} out of range [1, {T}]")


def _alpha_bar_for(t: Timestep, sched: NoiseSchedule, ref: Tensor) -> Tensor:
    """alpha_bar as a scalar (int t) or broadcastable column (tensor t)."""
    if isinstance(t, Tensor) and t.dim() > 0:
        if t.dim() != 1 or t.shape[0] != ref.shape[0]:
            raise ValueError("per-sample t must be 1-D and match the batch dim")
        tl = t.long()
        if bool((tl < 1).any()) or bool((tl > sched.T).any()):
            raise ValueError(f"timestep out of range [1, {sched.T}]")
        ab = sched.alpha_bars[tl - 1]
        return ab.reshape(-1, *([1] * (ref.dim() - 1)))
    _check_scalar_t(int(t), sched.T)
    return sched.alpha_bar(int(t))
