"""Training objectives and loops: base denoising loss, the mask-restricted
subject loss, toy pretraining, subject fine-tuning, and encoder/decoder
partition surgery.

Loss reductions run in float64 so that the all-ones-mask identity between
the two objectives holds to tight tolerances regardless of model dtype.
"""

from __future__ import annotations

import copy
import math
import warnings
from dataclasses import dataclass, field

import torch

from . import rng
from .attention import SubjectMap, SubjectMask
from .errors import ArchitectureMismatch, TrainingDiverged
from .model import Denoiser, predict_noise
from .schedule import NoiseSchedule, add_noise
from .text import TextPrompt

# First-order optimizer used by every loop; recorded in checkpoint manifests
# so a run is reproducible from its artifacts alone.
OPTIMIZER_INFO = {"name": "adam", "betas": (0.9, 0.999), "eps": 1e-8}

PARTITION_MODES = ("full", "decoder_only", "cross_attention_only")


@dataclass(frozen=True)
class ReferenceItem:
    """One reference image with its caption and precomputed subject mask."""

    image: torch.Tensor          # (3, H, W) in [-1, 1]
    caption: TextPrompt
    subject_map: SubjectMap | None
    mask: SubjectMask

    def __post_init__(self):
        if self.image.ndim != 3:
            raise ValueError("reference image must be (C, H, W)")
        if self.mask.mask.shape != self.image.shape[-2:]:
            raise ValueError(
                f"mask {tuple(self.mask.mask.shape)} does not match image "
                f"resolution {tuple(self.image.shape[-2:])}"
            )
        if not self.caption.subject_positions:
            raise ValueError("reference caption does not mark the subject token")


@dataclass(frozen=True)
class ReferenceSet:
    items: tuple[ReferenceItem, ...]
    subject_name: str = "sks subject"

    def __post_init__(self):
        if not self.items:
            raise ValueError("reference set is empty")

    def __len__(self) -> int:
        return len(self.items)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-5
    steps: int = 100
    batch_size: int = 6
    p_t: float = 0.2
    partition_mode: str = "decoder_only"
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.p_t <= 1.0:
            raise ValueError("p_t must lie in [0, 1]")
        if self.partition_mode not in PARTITION_MODES:
            raise ValueError(
                f"partition_mode must be one of {PARTITION_MODES}, "
                f"got {self.partition_mode!r}"
            )

    def to_manifest(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "steps": self.steps,
            "batch_size": self.batch_size,
            "p_t": self.p_t,
            "partition_mode": self.partition_mode,
            "seed": self.seed,
            "optimizer": {k: list(v) if isinstance(v, tuple) else v
                          for k, v in OPTIMIZER_INFO.items()},
        }


# -- objectives ----------------------------------------------------------------


def masked_mse(residual: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """||mask * residual||^2 / (masked-in pixels * channels).

    `residual` is (..., C, H, W); `mask` is (H, W) or (B, H, W) with values
    in {0, 1} and broadcasts across channels. Multiplying before squaring
    makes the gradient at masked-out pixels exactly zero, not merely small.
    """
    if mask.ndim == 2:
        m = mask
    elif mask.ndim == 3 and residual.ndim == 4:
        m = mask.unsqueeze(1)
    else:
        raise ValueError(f"mask rank {mask.ndim} does not fit residual rank {residual.ndim}")
    m = m.to(residual.dtype)
    kept = (residual * m).double()
    channels = residual.shape[-3]
    batch = residual.shape[0] if residual.ndim == 4 and mask.ndim == 2 else 1
    count = float(mask.double().sum().item()) * channels * batch
    if count == 0:
        raise ValueError("mask selects no elements")
    return kept.pow(2).sum() / count


def base_loss(model: Denoiser, z0: torch.Tensor, t, cond: torch.Tensor,
              eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Plain denoising MSE over every element of the noise residual."""
    if eps.shape != z0.shape:
        raise ValueError("noise must match the latent shape")
    z_t = add_noise(z0, eps, t, sched)
    pred = predict_noise(model, z_t, t, cond)[0]
    return (eps - pred).double().pow(2).mean()


def masked_loss(model: Denoiser, z0: torch.Tensor, t, cond: torch.Tensor,
                eps: torch.Tensor, mask, sched: NoiseSchedule) -> torch.Tensor:
    """Subject-region denoising loss: the residual is masked before squaring
    and the sum is normalized by the number of masked-in elements, so the
    step size does not shrink for small subjects.

    `mask` is a SubjectMask or a (H, W) / (B, H, W) tensor of {0, 1}. An
    empty mask falls back to all-ones with a warning.
    """
    if eps.shape != z0.shape:
        raise ValueError("noise must match the latent shape")
    m = mask.mask if isinstance(mask, SubjectMask) else mask
    if m.shape[-2:] != z0.shape[-2:]:
        raise ValueError("mask resolution does not match the latent")
    if float(m.sum()) == 0.0:
        warnings.warn("empty subject mask: falling back to all-ones", stacklevel=2)
        m = torch.ones_like(m)
    z_t = add_noise(z0, eps, t, sched)
    pred = predict_noise(model, z_t, t, cond)[0]
    return masked_mse(eps - pred, m)


# -- loops ---------------------------------------------------------------------


def _run_steps(model: Denoiser, images: torch.Tensor, conds: torch.Tensor,
               masks: torch.Tensor | None, cfg: TrainConfig,
               sched: NoiseSchedule, stream: str,
               trainable: list[tuple[str, torch.nn.Parameter]],
               loss_log: list | None, on_step) -> Denoiser:
    g = rng.generator(cfg.seed, stream)
    n = images.shape[0]
    frozen = [p for name, p in model.named_parameters()
              if name not in {nm for nm, _ in trainable}]
    for p in frozen:
        p.requires_grad_(False)
    opt = torch.optim.Adam([p for _, p in trainable], lr=cfg.learning_rate,
                           betas=OPTIMIZER_INFO["betas"], eps=OPTIMIZER_INFO["eps"])
    try:
        for step in range(cfg.steps):
            idx = torch.randint(n, (cfg.batch_size,), generator=g)
            t = torch.randint(sched.num_timesteps, (cfg.batch_size,), generator=g)
            eps = torch.randn(
                (cfg.batch_size, *images.shape[1:]), generator=g, dtype=images.dtype
            )
            z0 = images[idx]
            cond = conds[idx]
            if masks is None:
                loss = base_loss(model, z0, t, cond, eps, sched)
            else:
                loss = masked_loss(model, z0, t, cond, eps, masks[idx], sched)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss {loss.item()} at step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            value = float(loss.detach())
            if loss_log is not None:
                loss_log.append(value)
            if on_step is not None:
                on_step(step, value, model)
    finally:
        for p in frozen:
            p.requires_grad_(True)
    return model


def finetune(model: Denoiser, refs: ReferenceSet, cfg: TrainConfig,
             sched: NoiseSchedule, *, use_mask: bool = True,
             loss_log: list | None = None, on_step=None) -> Denoiser:
    """Subject fine-tuning on masked reference triples.

    Each step draws batch_size (item, timestep, noise) samples with
    replacement and updates only the parameters selected by
    cfg.partition_mode. The input model is left untouched; the trained
    copy is returned. `use_mask=False` switches to the unrestricted loss
    for the efficiency comparison. `loss_log`, if given, receives one
    float per step; `on_step(step, loss, model)` is called after each
    update for probing.
    """
    tuned = copy.deepcopy(model)
    tuned.train()
    images = torch.stack([it.image for it in refs.items])
    conds = torch.stack([tuned.embed(it.caption) for it in refs.items])
    masks = None
    if use_mask:
        masks = torch.stack([it.mask.mask.to(images.dtype) for it in refs.items])
        if float(masks.sum()) == 0.0:
            warnings.warn("all reference masks empty: training unmasked", stacklevel=2)
            masks = torch.ones_like(masks)
    trainable = tuned.trainable_parameters(cfg.partition_mode)
    _run_steps(tuned, images, conds, masks, cfg, sched, "finetune",
               trainable, loss_log, on_step)
    tuned.eval()
    return tuned


def pretrain_toy(model: Denoiser, dataset, cfg: TrainConfig,
                 sched: NoiseSchedule, *, loss_log: list | None = None,
                 on_step=None) -> Denoiser:
    """Base-model pretraining on the synthetic captioned set.

    Trains every parameter with the unrestricted loss regardless of
    cfg.partition_mode. `dataset` needs `.images` (N, C, H, W) in [-1, 1]
    and `.captions` (list of TextPrompt).
    """
    tuned = copy.deepcopy(model)
    tuned.train()
    images = dataset.images
    conds = torch.stack([tuned.embed(c) for c in dataset.captions])
    trainable = tuned.trainable_parameters("full")
    _run_steps(tuned, images, conds, None, cfg, sched, "pretrain",
               trainable, loss_log, on_step)
    tuned.eval()
    return tuned


def reset_partition(finetuned: Denoiser, pretrained: Denoiser,
                    part: str) -> Denoiser:
    """Copy of `finetuned` whose encoder-side or decoder-side parameter
    group is restored from `pretrained`."""
    sd_f = finetuned.state_dict()
    sd_p = pretrained.state_dict()
    if sd_f.keys() != sd_p.keys() or any(
            sd_f[k].shape != sd_p[k].shape for k in sd_f):
        raise ArchitectureMismatch("models do not share an architecture")
    out = copy.deepcopy(finetuned)
    with torch.no_grad():
        reset_names = set(out.partition_names(part))
        for name, p in out.named_parameters():
            if name in reset_names:
                p.copy_(sd_p[name])
    return out


def probe_subject_loss(model: Denoiser, refs: ReferenceSet,
                       sched: NoiseSchedule, seed: int = 0,
                       timesteps: tuple[int, ...] = (100, 300, 500, 700, 900),
                       ) -> float:
    """Deterministic subject-region reconstruction loss over fixed draws.

    Evaluates the masked objective for every (reference, probe timestep)
    pair with noise fixed by the seed, independent of any training stream.
    Used to compare training runs at matched points.
    """
    total = 0.0
    count = 0
    with torch.no_grad():
        for i, item in enumerate(refs.items):
            cond = model.embed(item.caption)
            for t in timesteps:
                g = rng.generator(seed, "probe", str(i), str(t))
                eps = torch.randn(item.image.shape, generator=g,
                                  dtype=item.image.dtype)
                total += float(masked_loss(model, item.image, t, cond, eps,
                                           item.mask, sched))
                count += 1
    return total / count
