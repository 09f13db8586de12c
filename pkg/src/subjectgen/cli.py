"""Command-line interface and experiment orchestration."""

from __future__ import annotations

import json
import statistics
import sys
from pathlib import Path

import click
import torch

from . import data, metrics, text
from .captioner import (CaptionResponse, HttpVLMClient, StubVLMClient,
                        caption_images, tokenize_caption)
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, apply_overrides, load_config
from .errors import RunDirectoryExists, SubjectGenError
from .guidance import (FileContextProvider, GuidanceConfig,
                       RemoteContextProvider, ToyModelContextProvider,
                       build_reference_set, context_guided_sample,
                       generate_context, run_pipeline)
from .inversion import (ddim_inversion, null_text_optimize, reconstruct,
                        save_trajectory)
from .model import Denoiser
from .schedule import make_step_plan
from .training import (ReferenceItem, ReferenceSet, TrainConfig, finetune,
                       probe_subject_loss, pretrain_toy)

_PARTITION_FLAGS = {"full": "full", "decoder": "decoder_only",
                    "xattn": "cross_attention_only"}


def _fail(exc: BaseException) -> None:
    click.echo(f"error[{type(exc).__name__}]: {exc}", err=True)
    sys.exit(1)


def _guarded(fn):
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (SubjectGenError, ValueError, FileNotFoundError) as exc:
            _fail(exc)
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def _fresh_dir(path: str) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()):
        raise RunDirectoryExists(f"refusing to overwrite non-empty {out}")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _parse_prompt(prompt: str, subject_name: str | None) -> text.TextPrompt:
    if subject_name:
        return tokenize_caption(prompt, subject_name)
    words = [w for w in prompt.lower().split() if w]
    tokens = tuple(text.VOCAB_INDEX.get(w, text.UNK_ID)
                   for w in words[: text.MAX_TOKENS])
    return text.TextPrompt(tokens=tokens)


def _load_reference_dir(refs_dir: str):
    """Reference directory: PNGs plus an optional captions.json."""
    root = Path(refs_dir)
    paths = sorted(p for p in root.glob("*.png"))
    if not paths:
        # dataset layout fallback: images live one level down
        paths = sorted((root / "images").glob("*.png"))
    if not paths:
        raise FileNotFoundError(f"no reference PNGs under {root}")
    images = [data.load_png(p) for p in paths]
    response = None
    cap_file = root / "captions.json"
    if cap_file.exists():
        doc = json.loads(cap_file.read_text())
        response = CaptionResponse(
            subject_name=doc["subject_name"],
            image_captions=tuple(doc["captions"]))
        if len(response.image_captions) != len(images):
            raise ValueError("captions.json does not match the image count")
    return paths, images, response


def _vlm_client(cfg: RunConfig):
    if cfg.vlm.stub:
        return StubVLMClient()
    if not cfg.vlm.url:
        raise ValueError("vlm.url required when the stub is disabled")
    return HttpVLMClient(cfg.vlm.url, model=cfg.vlm.model,
                         timeout=cfg.vlm.timeout)


def _provider(cfg: RunConfig, model_size: int, base_model, sched):
    kind = cfg.provider.kind
    if kind == "file":
        if not cfg.provider.path:
            raise ValueError("provider.path required for the file provider")
        return FileContextProvider(cfg.provider.path, image_size=model_size)
    if kind == "toy":
        return ToyModelContextProvider(base_model, sched,
                                       n_steps=cfg.guidance.n_steps,
                                       scale=cfg.guidance.scale)
    if kind == "remote":
        if not cfg.provider.url:
            raise ValueError("provider.url required for the remote provider")
        return RemoteContextProvider(cfg.provider.url, image_size=model_size,
                                     timeout=cfg.provider.timeout,
                                     retries=cfg.provider.retries)
    raise ValueError(f"unknown provider kind {kind!r}")


def _common(f):
    f = click.option("--config", "config_path", type=click.Path(exists=True),
                     default=None, help="JSON run config")(f)
    f = click.option("--seed", type=int, default=None)(f)
    return f


@click.group()
def main():
    """Subject-driven generation with two toy diffusion models."""


# -- data and pretraining --------------------------------------------------------


@main.command()
@_common
@click.option("--out", required=True, type=click.Path())
@click.option("--count", type=int, default=None)
@click.option("--concise", is_flag=True, default=False,
              help="emit short captions instead of descriptive ones")
@_guarded
def dataset(config_path, seed, out, count, concise):
    """Generate a synthetic captioned dataset with ground-truth masks."""
    cfg = apply_overrides(load_config(config_path), seed=seed)
    doc = cfg.dataset.model_dump()
    if count is not None:
        doc["count"] = count
    if concise:
        doc["verbosity"] = "concise"
    spec = type(cfg.dataset).model_validate(doc).build()
    ds = data.generate_dataset(spec, cfg.seed)
    out_dir = _fresh_dir(out)
    data.save_dataset(ds, out_dir)
    click.echo(f"wrote {len(ds)} samples to {out_dir}")


@main.command()
@_common
@click.option("--out", required=True, type=click.Path(),
              help="run directory for checkpoint + loss curve")
@click.option("--steps", type=int, default=None, help="training steps")
@_guarded
def pretrain(config_path, seed, out, steps):
    """Pretrain the toy base model on the synthetic dataset."""
    cfg = apply_overrides(load_config(config_path), seed=seed)
    out_dir = _fresh_dir(out)
    spec = cfg.dataset.build()
    ds = data.generate_dataset(spec, cfg.seed)
    pre = cfg.pretrain.model_dump()
    if steps is not None:
        pre["steps"] = steps
    train_cfg = type(cfg.pretrain).model_validate(pre).build()
    model = Denoiser(cfg.model.build(), seed=cfg.seed)
    sched = cfg.schedule.build()
    losses: list[float] = []
    trained = pretrain_toy(model, ds, train_cfg, sched, loss_log=losses)
    save_checkpoint(out_dir / "base.zip", trained, extra={
        "train": train_cfg.to_manifest(), "dataset": spec.to_manifest(),
        "seed": cfg.seed})
    (out_dir / "loss.csv").write_text(
        "step,loss\n" + "\n".join(f"{i},{v!r}" for i, v in enumerate(losses)))
    click.echo(f"checkpoint: {out_dir / 'base.zip'} "
               f"(final loss {losses[-1]:.5f})" if losses else "no steps run")


# -- reference preparation --------------------------------------------------------


@main.command()
@_common
@click.option("--refs", "refs_dir", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--stub-vlm/--live-vlm", default=None,
              help="use the offline captioner (default: config)")
@_guarded
def caption(config_path, seed, refs_dir, out, stub_vlm):
    """Caption a reference directory via the VLM client or stub."""
    cfg = apply_overrides(load_config(config_path), seed=seed,
                          stub_vlm=stub_vlm)
    paths, images, _ = _load_reference_dir(refs_dir)
    log: list = []
    response = caption_images(images, _vlm_client(cfg),
                              retries=cfg.vlm.retries, log=log)
    out_path = Path(out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(json.dumps({
        "subject_name": response.subject_name,
        "captions": list(response.image_captions),
        "images": [p.name for p in paths],
        "log": log,
    }, indent=2, sort_keys=True))
    click.echo(f"captioned {len(images)} images as "
               f"{response.subject_name!r} -> {out_path}")


@main.command()
@_common
@click.option("--refs", "refs_dir", required=True, type=click.Path(exists=True))
@click.option("--checkpoint", "ckpt", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--p-t", type=float, default=None, help="mask threshold")
@_guarded
def mask(config_path, seed, refs_dir, ckpt, out, p_t):
    """Extract subject maps and masks for every reference image."""
    from .attention import compute_subject_mask, save_map_png, save_mask_png

    cfg = apply_overrides(load_config(config_path), seed=seed, p_t=p_t)
    model, _ = load_checkpoint(ckpt)
    sched = cfg.schedule.build()
    paths, images, response = _load_reference_dir(refs_dir)
    if response is None:
        response = caption_images(images, StubVLMClient())
    out_dir = _fresh_dir(out)
    threshold = cfg.train.p_t
    for i, img in enumerate(images):
        prompt = tokenize_caption(response.image_captions[i],
                                  response.subject_name)
        smap, msk = compute_subject_mask(img, prompt, model, sched,
                                         p_t=threshold, seed=cfg.seed)
        sidecar = {"image": paths[i].name, "p_t": threshold, "seed": cfg.seed}
        save_map_png(smap, out_dir / f"map_{i:02d}.png", sidecar)
        save_mask_png(msk, out_dir / f"mask_{i:02d}.png", sidecar)
    click.echo(f"wrote maps/masks for {len(images)} references to {out_dir}")


@main.command()
@_common
@click.option("--refs", "refs_dir", required=True, type=click.Path(exists=True))
@click.option("--checkpoint", "ckpt", required=True, type=click.Path(exists=True),
              help="pretrained base checkpoint")
@click.option("--out", required=True, type=click.Path())
@click.option("--steps", type=int, default=None, help="fine-tuning steps")
@click.option("--p-t", type=float, default=None)
@click.option("--partition", type=click.Choice(sorted(_PARTITION_FLAGS)),
              default=None)
@click.option("--stub-vlm/--live-vlm", default=None)
@_guarded
def finetune_cmd(config_path, seed, refs_dir, ckpt, out, steps, p_t,
                 partition, stub_vlm):
    """Fine-tune the base model on a reference directory."""
    cfg = apply_overrides(load_config(config_path), seed=seed, steps=steps,
                          p_t=p_t, stub_vlm=stub_vlm,
                          partition=_PARTITION_FLAGS.get(partition))
    base, _ = load_checkpoint(ckpt)
    sched = cfg.schedule.build()
    _, images, response = _load_reference_dir(refs_dir)
    ref_set = build_reference_set(images, base, sched, p_t=cfg.train.p_t,
                                  vlm_client=_vlm_client(cfg), seed=cfg.seed,
                                  response=response)
    out_dir = _fresh_dir(out)
    train_cfg = cfg.train.build()
    losses: list[float] = []
    tuned = finetune(base, ref_set, train_cfg, sched, loss_log=losses)
    save_checkpoint(out_dir / "finetuned.zip", tuned, extra={
        "train": train_cfg.to_manifest(), "seed": cfg.seed,
        "subject_name": ref_set.subject_name})
    (out_dir / "loss.csv").write_text(
        "step,loss\n" + "\n".join(f"{i},{v!r}" for i, v in enumerate(losses)))
    click.echo(f"fine-tuned checkpoint: {out_dir / 'finetuned.zip'}")


# -- inversion and generation ------------------------------------------------------


@main.command()
@_common
@click.option("--image", "image_path", required=True,
              type=click.Path(exists=True))
@click.option("--checkpoint", "ckpt", required=True, type=click.Path(exists=True))
@click.option("--prompt", required=True, type=str)
@click.option("--subject-name", type=str, default=None,
              help="phrase in the prompt bound to the subject token")
@click.option("--out", required=True, type=click.Path())
@click.option("--steps", type=int, default=None, help="inference steps")
@click.option("--scale", type=float, default=None, help="guidance scale")
@_guarded
def invert(config_path, seed, image_path, ckpt, prompt, subject_name, out,
           steps, scale):
    """Invert an image and optimize per-step null embeddings."""
    cfg = apply_overrides(load_config(config_path), seed=seed, scale=scale)
    n_steps = steps if steps is not None else cfg.guidance.n_steps
    model, _ = load_checkpoint(ckpt)
    sched = cfg.schedule.build()
    plan = make_step_plan(sched, n_steps)
    image = data.load_png(image_path)
    prompt_t = _parse_prompt(prompt, subject_name)
    inv = ddim_inversion(image, prompt_t, model, plan, sched)
    nulls = null_text_optimize(inv, prompt_t, model, scale=cfg.guidance.scale,
                               inner_steps=cfg.guidance.inner_steps,
                               tol=cfg.guidance.tol)
    out_path = Path(out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_trajectory(out_path, inv, nulls)
    rec = reconstruct(inv, nulls, prompt_t, model, cfg.guidance.scale)
    mse = float((rec - image).pow(2).mean())
    click.echo(f"trajectory: {out_path} (reconstruction MSE {mse:.3e})")


def _pipeline_inputs(cfg: RunConfig, refs_dir: str, ckpt: str, prompt: str):
    base, _ = load_checkpoint(ckpt)
    sched = cfg.schedule.build()
    _, images, response = _load_reference_dir(refs_dir)
    subject = response.subject_name if response else "sks subject"
    prompt_t = tokenize_caption(prompt, subject)
    provider = _provider(cfg, base.config.image_size, base, sched)
    return base, sched, images, response, prompt_t, provider


@main.command()
@_common
@click.option("--refs", "refs_dir", required=True, type=click.Path(exists=True))
@click.option("--checkpoint", "ckpt", required=True, type=click.Path(exists=True),
              help="pretrained base checkpoint")
@click.option("--prompt", required=True, type=str,
              help="user prompt; must mention the subject name")
@click.option("--out", required=True, type=click.Path())
@click.option("--provider", "provider_kind",
              type=click.Choice(["file", "toy", "remote"]), default=None)
@click.option("--context-path", type=click.Path(), default=None,
              help="image for the file provider")
@click.option("--remote-url", type=str, default=None,
              help="context server base URL (the /generate path is implied)")
@click.option("--tau", type=int, default=None)
@click.option("--scale", type=float, default=None)
@click.option("--steps", type=int, default=None, help="fine-tuning steps")
@click.option("--p-t", type=float, default=None)
@click.option("--partition", type=click.Choice(sorted(_PARTITION_FLAGS)),
              default=None)
@click.option("--stub-vlm/--live-vlm", default=None)
@_guarded
def generate(config_path, seed, refs_dir, ckpt, prompt, out, provider_kind,
             context_path, remote_url, tau, scale, steps, p_t, partition,
             stub_vlm):
    """Run the full pipeline and write every intermediate artifact."""
    cfg = apply_overrides(load_config(config_path), seed=seed, tau=tau,
                          scale=scale, steps=steps, p_t=p_t,
                          provider=provider_kind, provider_path=context_path,
                          provider_url=remote_url, stub_vlm=stub_vlm,
                          partition=_PARTITION_FLAGS.get(partition))
    base, sched, images, response, prompt_t, provider = _pipeline_inputs(
        cfg, refs_dir, ckpt, prompt)
    refs = images
    if response is not None:
        ref_set = build_reference_set(images, base, sched, p_t=cfg.train.p_t,
                                      seed=cfg.seed, response=response)
        refs = ref_set
    final, extras = run_pipeline(
        prompt_t, refs, provider, cfg.train.build(), cfg.guidance.build(),
        cfg.seed, base_model=base, sched=sched,
        vlm_client=_vlm_client(cfg), out_dir=out,
        inner_steps=cfg.guidance.inner_steps, tol=cfg.guidance.tol)
    click.echo(f"final image: {Path(out) / 'output.png'}")


@main.command(name="ablate-tau")
@_common
@click.option("--refs", "refs_dir", required=True, type=click.Path(exists=True))
@click.option("--checkpoint", "ckpt", required=True, type=click.Path(exists=True))
@click.option("--prompt", required=True, type=str)
@click.option("--out", required=True, type=click.Path())
@click.option("--taus", type=str, default="0,10,20,30,40,50",
              help="comma-separated tau values")
@click.option("--provider", "provider_kind",
              type=click.Choice(["file", "toy", "remote"]), default=None)
@click.option("--context-path", type=click.Path(), default=None)
@click.option("--remote-url", type=str, default=None,
              help="context server base URL (the /generate path is implied)")
@click.option("--steps", type=int, default=None)
@_guarded
def ablate_tau(config_path, seed, refs_dir, ckpt, prompt, out, taus,
               provider_kind, context_path, remote_url, steps):
    """Sweep tau: one image per value plus the trade-off CSV and grid."""
    cfg = apply_overrides(load_config(config_path), seed=seed, steps=steps,
                          provider=provider_kind, provider_path=context_path,
                          provider_url=remote_url)
    tau_values = sorted({int(v) for v in taus.split(",") if v.strip()})
    base, sched, images, response, prompt_t, provider = _pipeline_inputs(
        cfg, refs_dir, ckpt, prompt)
    out_dir = _fresh_dir(out)

    ref_set = build_reference_set(images, base, sched, p_t=cfg.train.p_t,
                                  vlm_client=_vlm_client(cfg), seed=cfg.seed,
                                  response=response)
    tuned = finetune(base, ref_set, cfg.train.build(), sched)
    context = generate_context(prompt_t, provider, cfg.seed)
    data.save_png(out_dir / "context.png", context)
    plan = make_step_plan(sched, cfg.guidance.n_steps)
    inv = ddim_inversion(context, prompt_t, tuned, plan, sched)
    nulls = null_text_optimize(inv, prompt_t, tuned,
                               scale=cfg.guidance.scale,
                               inner_steps=cfg.guidance.inner_steps,
                               tol=cfg.guidance.tol)
    from .attention import compute_subject_mask

    _, ctx_mask = compute_subject_mask(context, prompt_t, base, sched,
                                       p_t=cfg.train.p_t, seed=cfg.seed)
    rows, grid = [], [("context", context)]
    ref_images = [it.image for it in ref_set.items]
    for tau in tau_values:
        g_cfg = GuidanceConfig(tau=tau, n_steps=cfg.guidance.n_steps,
                               scale=cfg.guidance.scale)
        img = context_guided_sample(inv, nulls, prompt_t, tuned, g_cfg)
        img = img.clamp(-1, 1)
        data.save_png(out_dir / f"tau_{tau:03d}.png", img)
        grid.append((f"tau={tau}", img))
        rows.append((f"tau={tau}", "background_deviation",
                     metrics.background_deviation(img, context, ctx_mask)))
        rows.append((f"tau={tau}", "subject_consistency",
                     metrics.subject_consistency([img], ref_images)))
    metrics.write_metrics_csv(out_dir / "sweep.csv", rows)
    metrics.plot_grid(grid, out_dir / "grid.png")
    click.echo(f"tau sweep in {out_dir} ({len(tau_values)} values)")


@main.command(name="ablate-threshold")
@_common
@click.option("--refs", "refs_dir", required=True, type=click.Path(exists=True))
@click.option("--checkpoint", "ckpt", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--p-ts", "p_ts", type=str, default="0.05,0.1,0.2,0.4,0.6,0.8")
@click.option("--steps", type=int, default=None)
@_guarded
def ablate_threshold(config_path, seed, refs_dir, ckpt, out, p_ts, steps):
    """Sweep the mask threshold: mask grids plus fine-tune outcomes."""
    from .attention import compute_subject_mask

    cfg = apply_overrides(load_config(config_path), seed=seed, steps=steps)
    values = sorted({float(v) for v in p_ts.split(",") if v.strip()})
    base, _ = load_checkpoint(ckpt)
    sched = cfg.schedule.build()
    _, images, response = _load_reference_dir(refs_dir)
    if response is None:
        response = caption_images(images, _vlm_client(cfg),
                                  retries=cfg.vlm.retries)
    out_dir = _fresh_dir(out)
    rows, grid = [], []
    for p_t in values:
        items = []
        for i, img in enumerate(images):
            prompt = tokenize_caption(response.image_captions[i],
                                      response.subject_name)
            smap, msk = compute_subject_mask(img, prompt, base, sched,
                                             p_t=p_t, seed=cfg.seed)
            items.append(ReferenceItem(image=img, caption=prompt,
                                       subject_map=smap, mask=msk))
        ref_set = ReferenceSet(items=tuple(items),
                               subject_name=response.subject_name)
        mean_area = statistics.mean(it.mask.area for it in items)
        tuned = finetune(base, ref_set, cfg.train.build(), sched)
        probe = probe_subject_loss(tuned, ref_set, sched, seed=cfg.seed)
        rows.append((f"p_t={p_t}", "mean_mask_area", mean_area))
        rows.append((f"p_t={p_t}", "subject_region_loss", probe))
        m0 = items[0].mask.mask
        grid.append((f"p_t={p_t}", m0.unsqueeze(0).repeat(3, 1, 1) * 2 - 1))
    metrics.write_metrics_csv(out_dir / "sweep.csv", rows)
    metrics.plot_grid(grid, out_dir / "masks.png")
    click.echo(f"threshold sweep in {out_dir} ({len(values)} values)")


@main.command()
@_common
@click.option("--run", "run_dir", required=True, type=click.Path(exists=True))
@click.option("--checkpoint", "ckpt", required=True, type=click.Path(exists=True),
              help="base checkpoint for the context subject mask")
@click.option("--out", type=click.Path(), default=None,
              help="default: metrics.csv inside the run directory")
@_guarded
def evaluate(config_path, seed, run_dir, ckpt, out):
    """Score a finished run directory with the proxy metrics."""
    from .attention import compute_subject_mask

    cfg = apply_overrides(load_config(config_path), seed=seed)
    run = Path(run_dir)
    run_cfg = json.loads((run / "config.json").read_text())
    prompt_t = text.TextPrompt.from_manifest(run_cfg["prompt"])
    output = data.load_png(run / "output.png")
    context = data.load_png(run / "context.png")
    refs = [data.load_png(p) for p in sorted(run.glob("references/ref_*.png"))]
    base, _ = load_checkpoint(ckpt)
    sched = cfg.schedule.build()
    _, ctx_mask = compute_subject_mask(context, prompt_t, base, sched,
                                       p_t=run_cfg["train"]["p_t"],
                                       seed=run_cfg["seed"])
    rows = [
        (run.name, "subject_consistency_output",
         metrics.subject_consistency([output], refs)),
        (run.name, "subject_consistency_context",
         metrics.subject_consistency([context], refs)),
        (run.name, "background_deviation",
         metrics.background_deviation(output, context, ctx_mask)),
    ]
    try:
        rows.append((run.name, "text_alignment",
                     metrics.text_alignment(output, prompt_t)))
    except ValueError:
        pass  # prompts with only a subject token have nothing to check
    out_path = Path(out) if out else run / "metrics.csv"
    metrics.write_metrics_csv(out_path, rows)
    metrics.plot_grid([("context", context), ("output", output)],
                      run / "compare.png")
    for rid, name, value in rows:
        click.echo(f"{name}: {value:.4f}")
    click.echo(f"metrics: {out_path}")


@main.command()
@click.option("--port", type=int, default=8008)
@click.option("--host", type=str, default="127.0.0.1")
@click.option("--checkpoint", "ckpt", type=click.Path(exists=True), default=None,
              help="serve a trained model instead of the stub renderer")
@_guarded
def serve(port, host, ckpt):
    """Serve the HTTP context-provider endpoint."""
    from .server import CheckpointImageSource, StubImageSource, serve as run_server

    source = CheckpointImageSource(ckpt) if ckpt else StubImageSource()
    run_server(source, host=host, port=port)


main.add_command(finetune_cmd, name="finetune")

if __name__ == "__main__":
    main()
