"""Noise schedules, forward noising, and deterministic DDIM stepping.

Tables are kept in float64; stepping upcasts to float64 internally and
returns results in the caller's dtype, so the algebraic identities
(step/invert round trip, affinity) hold to tight tolerances when the
caller works in double precision.

The timestep -1 is the virtual clean endpoint with alpha_bar = 1: the
final denoising update targets it and therefore emits the model's
current x0 estimate.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

VIRTUAL_CLEAN_STEP = -1


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep beta/alpha/alpha_bar tables for a DDPM-style process."""

    betas: torch.Tensor        # (T,) float64, each in (0, 1)
    alphas: torch.Tensor       # (T,) float64, 1 - beta
    alpha_bars: torch.Tensor   # (T,) float64, cumulative product of alphas

    @property
    def num_timesteps(self) -> int:
        return int(self.betas.shape[0])

    def alpha_bar(self, t: int) -> float:
        """alpha_bar at timestep t; the virtual step -1 returns exactly 1."""
        if t == VIRTUAL_CLEAN_STEP:
            return 1.0
        if not 0 <= t < self.num_timesteps:
            raise ValueError(f"timestep {t} outside [0, {self.num_timesteps})")
        return float(self.alpha_bars[t])

    def to_manifest(self) -> dict:
        return {
            "num_timesteps": self.num_timesteps,
            "beta_start": float(self.betas[0]),
            "beta_end": float(self.betas[-1]),
            "kind": "linear",
        }


def make_linear_schedule(num_timesteps: int, beta_start: float = 1e-4,
                         beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule over `num_timesteps` steps."""
    if num_timesteps < 2:
        raise ValueError(f"num_timesteps must be >= 2, got {num_timesteps}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    betas = torch.linspace(beta_start, beta_end, num_timesteps, dtype=torch.float64)
    alphas = 1.0 - betas
    alpha_bars = torch.cumprod(alphas, dim=0)
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def schedule_from_manifest(entry: dict) -> NoiseSchedule:
    if entry.get("kind", "linear") != "linear":
        raise ValueError(f"unknown schedule kind {entry.get('kind')!r}")
    return make_linear_schedule(
        int(entry["num_timesteps"]), float(entry["beta_start"]), float(entry["beta_end"])
    )


@dataclass(frozen=True)
class StepPlan:
    """Inference timesteps in denoising order (strictly decreasing)."""

    timesteps: tuple[int, ...]

    @property
    def n_steps(self) -> int:
        return len(self.timesteps)

    def prev(self, k: int) -> int:
        """Target timestep of denoising step k; -1 past the last timestep."""
        if not 0 <= k < self.n_steps:
            raise ValueError(f"step index {k} outside [0, {self.n_steps})")
        return self.timesteps[k + 1] if k + 1 < self.n_steps else VIRTUAL_CLEAN_STEP

    def to_manifest(self) -> dict:
        return {"timesteps": list(self.timesteps)}


def make_step_plan(sched: NoiseSchedule, n_steps: int = 50) -> StepPlan:
    """Uniform-stride plan; the last update targets the virtual clean step."""
    T = sched.num_timesteps
    if not 1 <= n_steps <= T:
        raise ValueError(f"n_steps must be in [1, {T}], got {n_steps}")
    stride = T // n_steps
    ts = tuple(i * stride + stride - 1 for i in reversed(range(n_steps)))
    return StepPlan(timesteps=ts)


def _gather_alpha_bar(sched: NoiseSchedule, t) -> torch.Tensor:
    """alpha_bar values as a float64 tensor; accepts int or an index tensor."""
    if isinstance(t, torch.Tensor):
        if (t < 0).any() or (t >= sched.num_timesteps).any():
            raise ValueError("timestep tensor outside schedule range")
        return sched.alpha_bars[t.long()]
    return torch.tensor(sched.alpha_bar(int(t)), dtype=torch.float64)


def add_noise(z0: torch.Tensor, eps: torch.Tensor, t, sched: NoiseSchedule) -> torch.Tensor:
    """Forward-noised latent sqrt(ab_t) * z0 + sqrt(1 - ab_t) * eps.

    `t` is an int applied to the whole batch or a (B,) tensor of per-item
    timesteps for a (B, ...) input.
    """
    if z0.shape != eps.shape:
        raise ValueError(f"z0 shape {tuple(z0.shape)} != eps shape {tuple(eps.shape)}")
    ab = _gather_alpha_bar(sched, t)
    if ab.ndim == 1:
        if ab.shape[0] != z0.shape[0]:
            raise ValueError("per-item timesteps must match the batch size")
        ab = ab.view(-1, *([1] * (z0.ndim - 1)))
    ab = ab.to(z0.dtype)
    return ab.sqrt() * z0 + (1.0 - ab).sqrt() * eps


def _check_step_pair(sched: NoiseSchedule, t: int, t_prev: int) -> tuple[float, float]:
    if t <= t_prev:
        raise ValueError(f"need t > t_prev, got t={t}, t_prev={t_prev}")
    return sched.alpha_bar(t), sched.alpha_bar(t_prev)


def ddim_step(z_t: torch.Tensor, eps_hat: torch.Tensor, t: int, t_prev: int,
              sched: NoiseSchedule) -> torch.Tensor:
    """One deterministic (eta = 0) DDIM update from t down to t_prev.

    Predicts x0 from the noise estimate and re-noises it at the target
    level. t_prev = -1 targets the virtual clean endpoint (alpha_bar = 1),
    so the update returns the x0 prediction itself.
    """
    if z_t.shape != eps_hat.shape:
        raise ValueError("z_t and eps_hat must have the same shape")
    ab_t, ab_prev = _check_step_pair(sched, t, t_prev)
    z = z_t.to(torch.float64)
    e = eps_hat.to(torch.float64)
    x0 = (z - (1.0 - ab_t) ** 0.5 * e) / ab_t ** 0.5
    out = ab_prev ** 0.5 * x0 + (1.0 - ab_prev) ** 0.5 * e
    return out.to(z_t.dtype)


def ddim_invert_step(z_t_prev: torch.Tensor, eps_hat: torch.Tensor, t_prev: int,
                     t: int, sched: NoiseSchedule) -> torch.Tensor:
    """Algebraic inverse of ddim_step for a fixed noise estimate.

    Maps the latent at t_prev up to t, so that ddim_step(output, eps_hat,
    t, t_prev) recovers the input exactly (up to rounding).
    """
    if z_t_prev.shape != eps_hat.shape:
        raise ValueError("z_t_prev and eps_hat must have the same shape")
    ab_t, ab_prev = _check_step_pair(sched, t, t_prev)
    z = z_t_prev.to(torch.float64)
    e = eps_hat.to(torch.float64)
    x0 = (z - (1.0 - ab_prev) ** 0.5 * e) / ab_prev ** 0.5
    out = ab_t ** 0.5 * x0 + (1.0 - ab_t) ** 0.5 * e
    return out.to(z_t_prev.dtype)
