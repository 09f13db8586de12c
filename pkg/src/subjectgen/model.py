"""Toy text-conditioned U-Net noise predictor.

Pixel-space latents (3 channels, images normalized to [-1, 1]), three
resolutions with one residual + cross-attention block per resolution on
both paths plus a middle block, sinusoidal time embedding, and a frozen
token-table text side. Small enough to train on a laptop CPU while still
exhibiting per-token attention localization.

Residual branches and the output head are zero-initialized, so a freshly
constructed model predicts exactly zero noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from . import rng, text
from .attention import AttentionCapture, cross_attention


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    in_channels: int = 3
    base_channels: int = 32
    channel_mults: tuple[int, ...] = (1, 2, 3)
    heads: int = 4

    def __post_init__(self):
        if self.image_size % (2 ** (len(self.channel_mults) - 1)) != 0:
            raise ValueError("image_size must be divisible by the downsampling factor")
        for ch in self.channels:
            if ch % 8 != 0:
                raise ValueError(f"channel width {ch} not divisible by groupnorm groups")
            if ch % self.heads != 0:
                raise ValueError(f"channel width {ch} not divisible by heads {self.heads}")
        if self.base_channels % 2 != 0:
            raise ValueError("base_channels must be even for the sinusoidal embedding")

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(self.base_channels * m for m in self.channel_mults)

    def to_manifest(self) -> dict:
        return {
            "image_size": self.image_size,
            "in_channels": self.in_channels,
            "base_channels": self.base_channels,
            "channel_mults": list(self.channel_mults),
            "heads": self.heads,
        }

    @staticmethod
    def from_manifest(entry: dict) -> "ModelConfig":
        return ModelConfig(
            image_size=int(entry["image_size"]),
            in_channels=int(entry["in_channels"]),
            base_channels=int(entry["base_channels"]),
            channel_mults=tuple(entry["channel_mults"]),
            heads=int(entry["heads"]),
        )


def sinusoidal_time_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """(B,) integer timesteps -> (B, dim) sin/cos features."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    angles = t.float()[:, None] * freqs[None, :]
    return torch.cat([angles.sin(), angles.cos()], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, ch_in: int, ch_out: int, time_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, ch_in)
        self.conv1 = nn.Conv2d(ch_in, ch_out, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, ch_out)
        self.norm2 = nn.GroupNorm(8, ch_out)
        self.conv2 = nn.Conv2d(ch_out, ch_out, 3, padding=1)
        self.skip = nn.Conv2d(ch_in, ch_out, 1) if ch_in != ch_out else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(nn.functional.silu(self.norm1(x)))
        h = h + self.time_proj(nn.functional.silu(temb))[:, :, None, None]
        h = self.conv2(nn.functional.silu(self.norm2(h)))
        return h + self.skip(x)


class CrossAttnLayer(nn.Module):
    """Residual multi-head cross-attention from pixels to prompt tokens."""

    def __init__(self, ch: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm = nn.GroupNorm(8, ch)
        self.to_q = nn.Linear(ch, ch)
        self.to_k = nn.Linear(text.EMBED_DIM, ch)
        self.to_v = nn.Linear(text.EMBED_DIM, ch)
        self.to_out = nn.Linear(ch, ch)

    def forward(self, x, text_emb, capture: AttentionCapture | None, name: str):
        B, C, H, W = x.shape
        flat = self.norm(x).view(B, C, H * W).transpose(1, 2)
        out, maps = cross_attention(flat, text_emb, self.to_q, self.to_k,
                                    self.to_v, self.heads)
        if capture is not None:
            capture.add(name, H, W, maps[0])
        out = self.to_out(out).transpose(1, 2).view(B, C, H, W)
        return x + out


class Block(nn.Module):
    """One denoiser block: residual conv block followed by cross-attention."""

    def __init__(self, ch_in: int, ch_out: int, time_dim: int, heads: int):
        super().__init__()
        self.res = ResBlock(ch_in, ch_out, time_dim)
        self.attn = CrossAttnLayer(ch_out, heads)

    def forward(self, x, temb, text_emb, capture, name):
        return self.attn(self.res(x, temb), text_emb, capture, name)


class Denoiser(nn.Module):
    """fθ(z_t, t, ψ(P)): predicts the noise residual of a noisy latent."""

    def __init__(self, config: ModelConfig = ModelConfig(), seed: int = 0):
        super().__init__()
        self.config = config
        chans = config.channels
        time_dim = config.base_channels * 4

        self.time_mlp = nn.Sequential(
            nn.Linear(config.base_channels, time_dim), nn.SiLU(),
            nn.Linear(time_dim, time_dim),
        )
        self.stem = nn.Conv2d(config.in_channels, chans[0], 3, padding=1)
        self.encs = nn.ModuleList(
            [Block(ch, ch, time_dim, config.heads) for ch in chans]
        )
        self.downs = nn.ModuleList(
            [nn.Conv2d(chans[i], chans[i + 1], 3, stride=2, padding=1)
             for i in range(len(chans) - 1)]
        )
        self.mid = Block(chans[-1], chans[-1], time_dim, config.heads)
        # decoder runs coarse-to-fine; each block consumes the matching skip
        self.decs = nn.ModuleList(
            [Block(2 * ch, ch, time_dim, config.heads) for ch in reversed(chans)]
        )
        self.ups = nn.ModuleList(
            [nn.Conv2d(chans[i + 1], chans[i], 3, padding=1)
             for i in reversed(range(len(chans) - 1))]
        )
        self.out_norm = nn.GroupNorm(8, chans[0])
        self.out_conv = nn.Conv2d(chans[0], config.in_channels, 3, padding=1)

        self.register_buffer("token_table", text.token_table().clone())
        self.register_buffer("pos_encoding", text.positional_encoding().clone())
        self._reset_parameters(seed)

    def _reset_parameters(self, seed: int) -> None:
        g = rng.generator(seed, "model-init")
        for name, p in self.named_parameters():
            if p.ndim >= 2:
                fan_in = p.shape[1] * (p[0, 0].numel() if p.ndim > 2 else 1)
                bound = 1.0 / math.sqrt(fan_in)
                with torch.no_grad():
                    p.copy_((torch.rand(p.shape, generator=g) * 2 - 1) * bound)
            elif "norm" in name and name.endswith("weight"):
                nn.init.ones_(p)
            else:
                nn.init.zeros_(p)
        # residual branches and the head start as identities / zero output
        zero_modules = [self.out_conv]
        for m in self.modules():
            if isinstance(m, ResBlock):
                zero_modules.append(m.conv2)
            if isinstance(m, CrossAttnLayer):
                zero_modules.append(m.to_out)
        for m in zero_modules:
            nn.init.zeros_(m.weight)
            nn.init.zeros_(m.bias)

    def embed(self, prompt: text.TextPrompt) -> torch.Tensor:
        """(MAX_TOKENS, EMBED_DIM) embedding from this model's frozen table."""
        ids = torch.full((text.MAX_TOKENS,), text.PAD_ID, dtype=torch.long)
        if prompt.tokens:
            ids[: len(prompt.tokens)] = torch.tensor(prompt.tokens, dtype=torch.long)
        return self.token_table[ids] + self.pos_encoding

    def forward(self, z, t, text_emb, capture: AttentionCapture | None = None):
        temb = self.time_mlp(sinusoidal_time_embedding(t, self.config.base_channels))
        h = self.stem(z)
        skips = []
        for i, enc in enumerate(self.encs):
            h = enc(h, temb, text_emb, capture, f"enc{i}")
            skips.append(h)
            if i < len(self.downs):
                h = self.downs[i](h)
        h = self.mid(h, temb, text_emb, capture, "mid")
        n_levels = len(self.encs)
        for j, dec in enumerate(self.decs):
            level = n_levels - 1 - j
            h = dec(torch.cat([h, skips[level]], dim=1), temb, text_emb,
                    capture, f"dec{level}")
            if j < len(self.ups):
                h = nn.functional.interpolate(h, scale_factor=2, mode="nearest")
                h = self.ups[j](h)
        return self.out_conv(nn.functional.silu(self.out_norm(h)))

    # -- parameter partitions -------------------------------------------------

    ENCODER_PREFIXES = ("time_mlp", "stem", "encs", "downs", "mid")
    DECODER_PREFIXES = ("decs", "ups", "out_norm", "out_conv")

    def partition_names(self, part: str) -> list[str]:
        """Parameter names of the encoder-side or decoder-side partition."""
        if part == "encoder":
            prefixes = self.ENCODER_PREFIXES
        elif part == "decoder":
            prefixes = self.DECODER_PREFIXES
        else:
            raise ValueError(f"unknown partition {part!r}")
        return [n for n, _ in self.named_parameters()
                if n.split(".", 1)[0] in prefixes]

    def trainable_parameters(self, mode: str) -> list[tuple[str, nn.Parameter]]:
        """Named parameters selected by a fine-tuning partition mode."""
        named = dict(self.named_parameters())
        if mode == "full":
            return list(named.items())
        if mode == "decoder_only":
            return [(n, named[n]) for n in self.partition_names("decoder")]
        if mode == "cross_attention_only":
            out = []
            for mod_name, mod in self.named_modules():
                if isinstance(mod, CrossAttnLayer):
                    out.extend((f"{mod_name}.{n}", p)
                               for n, p in mod.named_parameters())
            return out
        raise ValueError(f"unknown partition mode {mode!r}")


def _as_batched(z_t: torch.Tensor, cond: torch.Tensor, image_size: int,
                in_channels: int):
    single = z_t.ndim == 3
    zb = z_t.unsqueeze(0) if single else z_t
    if zb.ndim != 4 or zb.shape[1] != in_channels or zb.shape[2] != image_size \
            or zb.shape[3] != image_size:
        raise ValueError(
            f"latent shape {tuple(z_t.shape)} does not match the configured "
            f"({in_channels}, {image_size}, {image_size})"
        )
    cb = cond.unsqueeze(0) if cond.ndim == 2 else cond
    if cb.shape[0] == 1 and zb.shape[0] > 1:
        cb = cb.expand(zb.shape[0], -1, -1)
    if cb.shape[0] != zb.shape[0]:
        raise ValueError("conditioning batch does not match the latent batch")
    if cb.shape[1] != text.MAX_TOKENS or cb.shape[2] != text.EMBED_DIM:
        raise ValueError(
            f"conditioning shape {tuple(cond.shape)} must be "
            f"({text.MAX_TOKENS}, {text.EMBED_DIM}) per item"
        )
    return zb, cb, single


def predict_noise(model: Denoiser, z_t: torch.Tensor, t, cond: torch.Tensor,
                  record_attention: bool = False):
    """Run the denoiser; optionally capture every cross-attention map.

    Accepts a single (C, H, W) latent or a (B, C, H, W) batch; `t` is an
    int or a (B,) tensor; `cond` is one embedding or a batch. Returns
    (noise, capture) where capture is None unless recording was requested.
    Recording is passive and restricted to single-image calls.
    """
    cfg = model.config
    zb, cb, single = _as_batched(z_t, cond, cfg.image_size, cfg.in_channels)
    if isinstance(t, torch.Tensor):
        tb = t.reshape(-1).long()
        if tb.shape[0] != zb.shape[0]:
            raise ValueError("per-item timesteps must match the batch size")
    else:
        tb = torch.full((zb.shape[0],), int(t), dtype=torch.long)
    capture = None
    if record_attention:
        if zb.shape[0] != 1:
            raise ValueError("attention recording expects a single image")
        capture = AttentionCapture()
    out = model(zb, tb, cb, capture)
    return (out[0] if single else out), capture


def predict_noise_cfg(model: Denoiser, z_t: torch.Tensor, t, cond: torch.Tensor,
                      uncond: torch.Tensor, scale: float) -> torch.Tensor:
    """Classifier-free guided prediction eps_u + scale * (eps_c - eps_u).

    scale 1 and 0 short-circuit to the single conditional / unconditional
    evaluation, which keeps the affine identity exact and leaves the
    unused embedding outside the autograd graph.
    """
    if scale < 0:
        raise ValueError(f"guidance scale must be >= 0, got {scale}")
    if scale == 1.0:
        return predict_noise(model, z_t, t, cond)[0]
    eps_u = predict_noise(model, z_t, t, uncond)[0]
    if scale == 0.0:
        return eps_u
    eps_c = predict_noise(model, z_t, t, cond)[0]
    return eps_u + scale * (eps_c - eps_u)
