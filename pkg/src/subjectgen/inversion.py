"""Deterministic-sampler inversion and per-step null embedding optimization.

Inversion runs the sampler's inverse from the clean image up to the
noisiest timestep at guidance scale 1, producing a pivot trajectory. The
optimization then walks back down: at every step it tunes the
unconditional embedding so the guided update lands on the pivot, keeping
the best iterate seen. Guided denoising of the result reproduces the
input image closely, which is what lets a fine-tuned model re-render a
scene without destroying it.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import InversionDiverged
from .model import Denoiser, predict_noise, predict_noise_cfg
from .schedule import NoiseSchedule, StepPlan, ddim_invert_step, ddim_step
from .text import EMPTY_PROMPT, TextPrompt


@dataclass(frozen=True)
class InversionResult:
    """Pivot trajectory: pivot[0] is the input image, pivot[-1] the noisiest
    latent. The schedule rides along so downstream ops need no extra args."""

    pivot: tuple[torch.Tensor, ...]
    prompt: TextPrompt
    plan: StepPlan
    sched: NoiseSchedule

    def __post_init__(self):
        if len(self.pivot) != self.plan.n_steps + 1:
            raise ValueError(
                f"pivot has {len(self.pivot)} latents, expected "
                f"{self.plan.n_steps + 1}"
            )


@dataclass(frozen=True)
class NullTextTrajectory:
    """One optimized unconditional embedding per inference step (index 0 is
    the noisiest step), with recorded best objectives."""

    embeddings: tuple[torch.Tensor, ...]
    objectives: tuple[float, ...]           # best recorded per step
    initial_objectives: tuple[float, ...]   # objective at the warm-start point

    def __post_init__(self):
        if not (len(self.embeddings) == len(self.objectives)
                == len(self.initial_objectives)):
            raise ValueError("trajectory field lengths differ")
        for k, (fin, ini) in enumerate(zip(self.objectives,
                                           self.initial_objectives)):
            if fin > ini + 1e-9:
                raise ValueError(
                    f"step {k}: recorded objective {fin} exceeds its "
                    f"initial value {ini}"
                )


def ddim_inversion(image: torch.Tensor, prompt: TextPrompt, model: Denoiser,
                   plan: StepPlan, sched: NoiseSchedule) -> InversionResult:
    """Invert an image along the step plan with conditional predictions.

    The noise estimate for the t_prev -> t jump is evaluated at the
    current latent with the target timestep t, the usual pivot
    construction. Guidance scale is 1 (conditional only).
    """
    cond = model.embed(prompt)
    z = image
    pivot = [image]
    with torch.no_grad():
        for k in reversed(range(plan.n_steps)):
            t = plan.timesteps[k]
            t_prev = plan.prev(k)
            eps = predict_noise(model, z, t, cond)[0]
            z = ddim_invert_step(z, eps, t_prev, t, sched)
            if not torch.isfinite(z).all():
                raise InversionDiverged(f"non-finite latent inverting to t={t}")
            pivot.append(z)
    return InversionResult(pivot=tuple(pivot), prompt=prompt, plan=plan,
                           sched=sched)


def guided_denoise(model: Denoiser, z_start: torch.Tensor, cond: torch.Tensor,
                   null_for_step, plan: StepPlan, sched: NoiseSchedule,
                   scale: float) -> torch.Tensor:
    """Shared guided denoising loop: step k = 0 is the noisiest.

    `null_for_step(k)` supplies the unconditional embedding per step.
    Every consumer (reconstruction, plain sampling, gated injection) runs
    through this one loop, so boundary cases agree bit for bit.
    """
    z = z_start
    with torch.no_grad():
        for k in range(plan.n_steps):
            t = plan.timesteps[k]
            t_prev = plan.prev(k)
            eps = predict_noise_cfg(model, z, t, cond, null_for_step(k), scale)
            z = ddim_step(z, eps, t, t_prev, sched)
    return z


def null_text_optimize(inv: InversionResult, prompt: TextPrompt,
                       model: Denoiser, scale: float = 7.5,
                       inner_steps: int = 10, tol: float = 1e-5,
                       lr: float = 1e-2, warm_start: bool = True,
                       ) -> NullTextTrajectory:
    """Optimize the unconditional embedding at every step so guided
    denoising tracks the pivot trajectory.

    Walks from the noisiest step down. Each step runs at most
    `inner_steps` Adam updates on the squared distance between the guided
    update and the pivot target, early-stopping at `tol`; the best iterate
    is kept and (with warm_start) seeds the next step. At scale 1 the
    guided output does not depend on the embedding at all, so everything
    stays at initialization.
    """
    if scale < 0:
        raise ValueError("scale must be >= 0")
    if inner_steps < 1:
        raise ValueError("inner_steps must be >= 1")
    plan, sched = inv.plan, inv.sched
    cond = model.embed(prompt)
    base_null = model.embed(EMPTY_PROMPT)
    current = base_null
    embeddings, finals, initials = [], [], []
    z = inv.pivot[-1]
    for k in range(plan.n_steps):
        t = plan.timesteps[k]
        t_prev = plan.prev(k)
        target = inv.pivot[plan.n_steps - k - 1]
        null = (current if warm_start else base_null).detach().clone()
        null.requires_grad_(True)
        opt = torch.optim.Adam([null], lr=lr)

        def objective():
            eps = predict_noise_cfg(model, z, t, cond, null, scale)
            return (ddim_step(z, eps, t, t_prev, sched) - target).pow(2).mean()

        best_null = null.detach().clone()
        best_obj = None
        initial_obj = None
        for i in range(inner_steps):
            obj = objective()
            value = float(obj.detach())
            if not torch.isfinite(obj):
                raise InversionDiverged(f"non-finite objective at step {k}")
            if initial_obj is None:
                initial_obj = value
            if best_obj is None or value < best_obj:
                best_obj = value
                best_null = null.detach().clone()
            if value <= tol:
                break
            opt.zero_grad()
            obj.backward()
            if null.grad is None or not bool(null.grad.any()):
                break  # objective does not depend on the embedding
            opt.step()
        else:
            # all inner updates ran; score the final iterate too
            value = float(objective().detach())
            if value < best_obj:
                best_obj = value
                best_null = null.detach().clone()
        embeddings.append(best_null)
        finals.append(best_obj)
        initials.append(initial_obj)
        current = best_null
        with torch.no_grad():
            eps = predict_noise_cfg(model, z, t, cond, best_null, scale)
            z = ddim_step(z, eps, t, t_prev, sched)
    return NullTextTrajectory(embeddings=tuple(embeddings),
                              objectives=tuple(finals),
                              initial_objectives=tuple(initials))


def default_null_trajectory(model: Denoiser, plan: StepPlan) -> NullTextTrajectory:
    """Unoptimized trajectory: the frozen empty-prompt embedding at every step."""
    null = model.embed(EMPTY_PROMPT)
    zeros = tuple(0.0 for _ in range(plan.n_steps))
    return NullTextTrajectory(embeddings=tuple(null for _ in range(plan.n_steps)),
                              objectives=zeros, initial_objectives=zeros)


def reconstruct(inv: InversionResult, nulls: NullTextTrajectory,
                prompt: TextPrompt, model: Denoiser, scale: float,
                ) -> torch.Tensor:
    """Guided denoising of the pivot end with the optimized embeddings."""
    if len(nulls.embeddings) != inv.plan.n_steps:
        raise ValueError(
            f"null trajectory length {len(nulls.embeddings)} does not match "
            f"the {inv.plan.n_steps}-step plan"
        )
    cond = model.embed(prompt)
    return guided_denoise(model, inv.pivot[-1], cond,
                          lambda k: nulls.embeddings[k], inv.plan, inv.sched,
                          scale)


# -- persistence -----------------------------------------------------------------


def save_trajectory(path, inv: InversionResult,
                    nulls: NullTextTrajectory | None = None) -> None:
    from .checkpoint import write_archive

    manifest = {
        "kind": "trajectory",
        "prompt": inv.prompt.to_manifest(),
        "plan": inv.plan.to_manifest(),
        "sched": inv.sched.to_manifest(),
        "has_nulls": nulls is not None,
    }
    tensors = {f"pivot/{i:04d}": z for i, z in enumerate(inv.pivot)}
    if nulls is not None:
        manifest["objectives"] = list(nulls.objectives)
        manifest["initial_objectives"] = list(nulls.initial_objectives)
        for i, e in enumerate(nulls.embeddings):
            tensors[f"null/{i:04d}"] = e
    write_archive(path, manifest, tensors)


def load_trajectory(path) -> tuple[InversionResult, NullTextTrajectory | None]:
    from .checkpoint import read_archive
    from .schedule import StepPlan, schedule_from_manifest

    manifest, tensors = read_archive(path)
    if manifest.get("kind") != "trajectory":
        raise ValueError(f"archive at {path} is not a trajectory")
    plan = StepPlan(timesteps=tuple(manifest["plan"]["timesteps"]))
    inv = InversionResult(
        pivot=tuple(tensors[f"pivot/{i:04d}"]
                    for i in range(plan.n_steps + 1)),
        prompt=TextPrompt.from_manifest(manifest["prompt"]),
        plan=plan,
        sched=schedule_from_manifest(manifest["sched"]),
    )
    nulls = None
    if manifest.get("has_nulls"):
        nulls = NullTextTrajectory(
            embeddings=tuple(tensors[f"null/{i:04d}"]
                             for i in range(plan.n_steps)),
            objectives=tuple(manifest["objectives"]),
            initial_objectives=tuple(manifest["initial_objectives"]),
        )
    return inv, nulls
