"""Gated null-embedding injection during sampling, context providers, and
the end-to-end pipeline.

For the first `tau` inference steps the sampler consumes the optimized
unconditional embeddings, which pins the trajectory to the inverted
context scene; afterwards it switches to the default null embedding and
the fine-tuned model's subject priors take over. tau = n_steps reproduces
the context exactly; tau = 0 ignores it entirely.
"""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import dataclass
from pathlib import Path

import torch

from . import data, rng
from .attention import compute_subject_mask, save_map_png, save_mask_png
from .captioner import StubVLMClient, caption_images, tokenize_caption
from .errors import ProviderError, RunDirectoryExists
from .inversion import (InversionResult, NullTextTrajectory, ddim_inversion,
                        guided_denoise, null_text_optimize, reconstruct,
                        save_trajectory)
from .model import Denoiser
from .schedule import NoiseSchedule, make_step_plan
from .text import EMPTY_PROMPT, TextPrompt
from .training import ReferenceItem, ReferenceSet, TrainConfig, finetune


@dataclass(frozen=True)
class GuidanceConfig:
    tau: int = 30
    n_steps: int = 50
    scale: float = 7.5

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if not 0 <= self.tau <= self.n_steps:
            raise ValueError(
                f"tau must lie in [0, n_steps={self.n_steps}], got {self.tau}")
        if self.scale < 0:
            raise ValueError("scale must be >= 0")

    def to_manifest(self) -> dict:
        return {"tau": self.tau, "n_steps": self.n_steps, "scale": self.scale}


# -- context providers -----------------------------------------------------------


class FileContextProvider:
    """Serves a fixed image from disk; the seed is ignored.

    Any resolution is accepted and bicubic-resized to the model size (the
    documented rule), so external renders plug in directly.
    """

    def __init__(self, path, image_size: int = 32):
        self.path = Path(path)
        self.image_size = image_size

    def generate(self, prompt: TextPrompt, seed: int) -> torch.Tensor:
        from PIL import Image
        import numpy as np

        try:
            with Image.open(self.path) as im:
                im = im.convert("RGB")
                if im.size != (self.image_size, self.image_size):
                    im = im.resize((self.image_size, self.image_size),
                                   Image.BICUBIC)
                return data.image_to_tensor(np.asarray(im))
        except (OSError, ValueError) as exc:
            raise ProviderError(f"cannot load context image: {exc}") from exc


class ToyModelContextProvider:
    """Frozen pretrained model sampling with plain guided denoising."""

    def __init__(self, model: Denoiser, sched: NoiseSchedule,
                 n_steps: int = 50, scale: float = 7.5):
        self.model = model
        self.sched = sched
        self.plan = make_step_plan(sched, n_steps)
        self.scale = scale

    def generate(self, prompt: TextPrompt, seed: int) -> torch.Tensor:
        cfg = self.model.config
        g = rng.generator(seed, "context")
        z = torch.randn((cfg.in_channels, cfg.image_size, cfg.image_size),
                        generator=g)
        null = self.model.embed(EMPTY_PROMPT)
        out = guided_denoise(self.model, z, self.model.embed(prompt),
                             lambda k: null, self.plan, self.sched, self.scale)
        return out.clamp(-1.0, 1.0)


class RemoteContextProvider:
    """Fetches the context image from an HTTP endpoint returning PNG bytes."""

    def __init__(self, url: str, image_size: int = 32, timeout: float = 30.0,
                 retries: int = 2, retry_wait: float = 0.5):
        # accept the server base URL or the full endpoint URL
        base = url.rstrip("/")
        if base.endswith("/generate"):
            base = base[: -len("/generate")]
        self.url = base
        self.image_size = image_size
        self.timeout = timeout
        self.retries = retries
        self.retry_wait = retry_wait

    def generate(self, prompt: TextPrompt, seed: int) -> torch.Tensor:
        import io

        import httpx
        import numpy as np
        from PIL import Image

        body = {
            "prompt": " ".join(prompt.words),
            "seed": int(seed),
            "width": self.image_size,
            "height": self.image_size,
        }
        last = None
        for attempt in range(self.retries + 1):
            if attempt and self.retry_wait > 0:
                time.sleep(self.retry_wait)
            try:
                resp = httpx.post(f"{self.url}/generate", json=body,
                                  timeout=self.timeout)
                resp.raise_for_status()
                with Image.open(io.BytesIO(resp.content)) as im:
                    im = im.convert("RGB")
                    if im.size != (self.image_size, self.image_size):
                        im = im.resize((self.image_size, self.image_size),
                                       Image.BICUBIC)
                    return data.image_to_tensor(np.asarray(im))
            except (httpx.HTTPError, OSError) as exc:
                last = exc
        raise ProviderError(
            f"remote context provider failed after {self.retries + 1} "
            f"attempts: {last}")


def generate_context(prompt: TextPrompt, provider, seed: int) -> torch.Tensor:
    """One context image at model resolution from whichever provider."""
    img = provider.generate(prompt, seed)
    if img.ndim != 3:
        raise ProviderError(f"provider returned rank-{img.ndim} tensor")
    return img


# -- gated sampling ----------------------------------------------------------------


def context_guided_sample(inv: InversionResult, nulls: NullTextTrajectory,
                          prompt: TextPrompt, model_finetuned: Denoiser,
                          cfg: GuidanceConfig) -> torch.Tensor:
    """Denoise the inverted context with optimized nulls for k < tau only."""
    if inv.plan.n_steps != cfg.n_steps:
        raise ValueError(
            f"inversion has {inv.plan.n_steps} steps, config says {cfg.n_steps}")
    if len(nulls.embeddings) != cfg.n_steps:
        raise ValueError("null trajectory length does not match n_steps")
    cond = model_finetuned.embed(prompt)
    default_null = model_finetuned.embed(EMPTY_PROMPT)

    def null_for_step(k: int) -> torch.Tensor:
        return nulls.embeddings[k] if k < cfg.tau else default_null

    return guided_denoise(model_finetuned, inv.pivot[-1], cond, null_for_step,
                          inv.plan, inv.sched, cfg.scale)


# -- end-to-end pipeline -----------------------------------------------------------


def build_reference_set(images, base_model: Denoiser, sched: NoiseSchedule,
                        p_t: float = 0.2, vlm_client=None, seed: int = 0,
                        caption_log=None, response=None) -> ReferenceSet:
    """Caption raw reference images and extract their subject masks.

    Pass a precomputed CaptionResponse via `response` to skip the VLM call.
    """
    if response is None:
        client = vlm_client if vlm_client is not None else StubVLMClient()
        response = caption_images(list(images), client, log=caption_log)
    elif len(response.image_captions) != len(images):
        raise ValueError("caption response does not match the image count")
    items = []
    for i, img in enumerate(images):
        prompt = tokenize_caption(response.image_captions[i],
                                  response.subject_name)
        smap, mask = compute_subject_mask(img, prompt, base_model, sched,
                                          p_t=p_t, seed=seed)
        if mask.area == 0:
            warnings.warn(f"reference {i}: empty subject mask at p_t={p_t}")
        items.append(ReferenceItem(image=img, caption=prompt,
                                   subject_map=smap, mask=mask))
    return ReferenceSet(items=tuple(items), subject_name=response.subject_name)


def run_pipeline(user_prompt: TextPrompt, refs, provider,
                 train_cfg: TrainConfig, guide_cfg: GuidanceConfig, seed: int,
                 *, base_model: Denoiser, sched: NoiseSchedule,
                 vlm_client=None, out_dir=None,
                 inner_steps: int = 10, tol: float = 1e-5):
    """Full run: references -> fine-tune -> context -> inversion -> gated sample.

    `refs` is either a ReferenceSet (captions and masks precomputed) or a
    sequence of (3, H, W) reference images, in which case captioning and
    mask extraction run first using `base_model`. Every intermediate
    artifact is persisted under `out_dir` when given; partial artifacts
    are kept on failure. Returns (final image, artifact paths).
    """
    if not user_prompt.subject_positions:
        raise ValueError("user prompt must contain the subject token")

    out = None
    artifacts: dict[str, str] = {}
    if out_dir is not None:
        out = Path(out_dir)
        if out.exists() and any(out.iterdir()):
            raise RunDirectoryExists(f"refusing to overwrite run dir {out}")
        out.mkdir(parents=True, exist_ok=True)

    def persist(name: str, writer) -> None:
        if out is None:
            return
        path = out / name
        path.parent.mkdir(parents=True, exist_ok=True)
        writer(path)
        artifacts[name] = str(path)

    caption_log: list = []
    if isinstance(refs, ReferenceSet):
        ref_set = refs
    else:
        ref_set = build_reference_set(list(refs), base_model, sched,
                                      p_t=train_cfg.p_t,
                                      vlm_client=vlm_client, seed=seed,
                                      caption_log=caption_log)
    persist("config.json", lambda p: p.write_text(json.dumps({
        "seed": seed,
        "train": train_cfg.to_manifest(),
        "guidance": guide_cfg.to_manifest(),
        "prompt": user_prompt.to_manifest(),
        "subject_name": ref_set.subject_name,
        "null_opt": {"inner_steps": inner_steps, "tol": tol},
    }, indent=2, sort_keys=True)))
    if caption_log:
        persist("references/captions_log.json",
                lambda p: p.write_text(json.dumps(caption_log, indent=2)))
    for i, item in enumerate(ref_set.items):
        persist(f"references/ref_{i:02d}.png",
                lambda p, im=item.image: data.save_png(p, im))
        if item.subject_map is not None:
            persist(f"references/map_{i:02d}.png",
                    lambda p, sm=item.subject_map: save_map_png(sm, p))
        persist(f"references/mask_{i:02d}.png",
                lambda p, mk=item.mask: save_mask_png(mk, p))

    loss_log: list[float] = []
    tuned = finetune(base_model, ref_set, train_cfg, sched, loss_log=loss_log)
    persist("loss.csv", lambda p: p.write_text(
        "step,loss\n" + "\n".join(f"{i},{v!r}" for i, v in enumerate(loss_log))))
    if out is not None:
        from .checkpoint import save_checkpoint
        persist("checkpoints/finetuned.zip",
                lambda p: save_checkpoint(p, tuned, extra={
                    "train": train_cfg.to_manifest(), "seed": seed}))

    context = generate_context(user_prompt, provider, seed)
    persist("context.png", lambda p: data.save_png(p, context))

    plan = make_step_plan(sched, guide_cfg.n_steps)
    inv = ddim_inversion(context, user_prompt, tuned, plan, sched)
    nulls = null_text_optimize(inv, user_prompt, tuned, scale=guide_cfg.scale,
                               inner_steps=inner_steps, tol=tol)
    persist("trajectory.zip", lambda p: save_trajectory(p, inv, nulls))

    final = context_guided_sample(inv, nulls, user_prompt, tuned, guide_cfg)
    final = final.clamp(-1.0, 1.0)
    persist("output.png", lambda p: data.save_png(p, final))
    return final, {"artifacts": artifacts, "model": tuned, "context": context,
                   "inversion": inv, "nulls": nulls,
                   "reference_set": ref_set}
