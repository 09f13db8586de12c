"""Cross-attention core, map capture, aggregation, and thresholding.

The attention weights tie spatial positions (rows) to prompt tokens
(columns). Aggregating the subject-token columns across every layer and
head, upsampling to the latent resolution, averaging, and min-max
normalizing yields the subject map; thresholding it yields the binary
subject mask used by the masked training loss.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class AttentionRecord:
    """Weights of one head at one layer: (height*width, tokens), row-stochastic."""

    layer: str
    head: int
    height: int
    width: int
    weights: torch.Tensor


@dataclass
class AttentionCapture:
    """All per-layer, per-head maps recorded during one forward pass."""

    records: list[AttentionRecord] = field(default_factory=list)

    def add(self, layer: str, height: int, width: int, maps: torch.Tensor) -> None:
        """Record per-head maps of shape (heads, height*width, tokens)."""
        for h in range(maps.shape[0]):
            self.records.append(
                AttentionRecord(layer=layer, head=h, height=height, width=width,
                                weights=maps[h].detach())
            )


@dataclass(frozen=True)
class SubjectMap:
    """Aggregated, normalized subject-attention map at latent resolution."""

    values: torch.Tensor           # (h, w), in [0, 1]
    t_extract: int | None = None
    caption_id: str | None = None


@dataclass(frozen=True)
class SubjectMask:
    """Binary map: 1 where the subject map strictly exceeds the threshold."""

    mask: torch.Tensor             # (h, w) float32 of {0, 1}
    threshold: float

    @property
    def area(self) -> int:
        return int(self.mask.sum().item())


def cross_attention(features: torch.Tensor, text: torch.Tensor,
                    to_q, to_k, to_v, heads: int):
    """Multi-head cross-attention between spatial features and token vectors.

    features: (B, N, C) flattened spatial features, text: (B, L, D).
    to_q/to_k/to_v: linear projections C->C and D->C. Returns the merged
    attention output (B, N, C) and the weights (B, heads, N, L); weight
    rows are softmax-normalized over tokens.
    """
    if features.ndim != 3 or text.ndim != 3:
        raise ValueError("features must be (B, N, C) and text (B, L, D)")
    if features.shape[0] != text.shape[0]:
        raise ValueError("features and text batch sizes differ")
    B, N, C = features.shape
    L = text.shape[1]
    if C % heads != 0:
        raise ValueError(f"channels {C} not divisible by heads {heads}")
    dim_head = C // heads

    q = to_q(features).view(B, N, heads, dim_head).transpose(1, 2)   # (B,H,N,d)
    k = to_k(text).view(B, L, heads, dim_head).transpose(1, 2)       # (B,H,L,d)
    v = to_v(text).view(B, L, heads, dim_head).transpose(1, 2)       # (B,H,L,d)

    logits = q @ k.transpose(-1, -2) / dim_head ** 0.5               # (B,H,N,L)
    maps = logits.softmax(dim=-1)
    out = maps @ v                                                   # (B,H,N,d)
    out = out.transpose(1, 2).reshape(B, N, C)
    return out, maps


def aggregate_subject_map(capture: AttentionCapture, subject_positions,
                          target_res: tuple[int, int]) -> SubjectMap:
    """Mean subject-column attention over all records, upsampled and normalized.

    Per record: slice the subject-token columns, average them, reshape to
    the record's spatial grid, bilinearly upsample to `target_res`. The
    mean over records is then min-max normalized to [0, 1]. A constant raw
    map has no contrast to normalize and maps to all zeros.
    """
    if not capture.records:
        raise ValueError("attention capture is empty")
    positions = sorted(subject_positions)
    if not positions:
        raise ValueError("no subject token positions given")
    h, w = target_res
    acc = torch.zeros(h, w, dtype=torch.float64)
    for rec in capture.records:
        if max(positions) >= rec.weights.shape[1]:
            raise ValueError("subject position outside the recorded token axis")
        sliced = rec.weights[:, positions].mean(dim=1)       # (height*width,)
        grid = sliced.view(1, 1, rec.height, rec.width).to(torch.float64)
        up = F.interpolate(grid, size=(h, w), mode="bilinear", align_corners=False)
        acc += up[0, 0]
    raw = acc / len(capture.records)
    lo, hi = raw.min(), raw.max()
    if hi - lo <= 0:
        values = torch.zeros(h, w)
    else:
        values = ((raw - lo) / (hi - lo)).to(torch.float32)
    return SubjectMap(values=values)


def threshold_mask(subject_map: SubjectMap, p_t: float) -> SubjectMask:
    """Binary mask of positions whose map value strictly exceeds p_t."""
    if not 0.0 <= p_t <= 1.0:
        raise ValueError(f"p_t must be in [0, 1], got {p_t}")
    return SubjectMask(mask=(subject_map.values > p_t).float(), threshold=float(p_t))


def compute_subject_mask(image: torch.Tensor, caption, model, sched,
                         t_extract: int | None = None, p_t: float = 0.2,
                         seed: int = 0, n_draws: int = 4):
    """Noise the image, run the frozen model, and extract map and mask.

    The image is noised at `t_extract` with seeded noise; the conditional
    forward pass records every cross-attention map; the subject columns
    are aggregated and averaged over `n_draws` independent noise draws
    before the final min-max normalization and threshold. Deterministic
    given the seed.

    Attention localizes sharply only while most of the image survives the
    noising, so the default `t_extract` sits at a tenth of the schedule;
    mid-schedule extraction blurs the maps noticeably.
    """
    from . import rng
    from .model import predict_noise
    from .schedule import add_noise

    if not caption.subject_positions:
        raise ValueError("caption has no subject token positions")
    if n_draws < 1:
        raise ValueError("n_draws must be at least 1")
    if t_extract is None:
        t_extract = sched.num_timesteps // 10
    res = (image.shape[-2], image.shape[-1])
    acc = torch.zeros(res, dtype=torch.float64)
    for draw in range(n_draws):
        g = rng.generator(seed, "mask-noise", str(draw))
        eps = torch.randn(image.shape, generator=g, dtype=image.dtype)
        z_t = add_noise(image, eps, t_extract, sched)
        with torch.no_grad():
            _, capture = predict_noise(model, z_t, t_extract,
                                       model.embed(caption),
                                       record_attention=True)
        smap = aggregate_subject_map(capture, caption.subject_positions, res)
        acc += smap.values.to(torch.float64)
    raw = acc / n_draws
    lo, hi = raw.min(), raw.max()
    if hi - lo <= 0:
        warnings.warn("aggregated subject map is constant; mask will be empty")
        values = torch.zeros(res)
    else:
        values = ((raw - lo) / (hi - lo)).to(torch.float32)
    smap = SubjectMap(values=values, t_extract=int(t_extract))
    return smap, threshold_mask(smap, p_t)


def save_map_png(smap: SubjectMap, path, sidecar: dict | None = None) -> None:
    """Write a map (or any [0,1] grid) as 8-bit grayscale, plus a sidecar."""
    from PIL import Image

    arr = (smap.values.clamp(0, 1) * 255.0).round().to(torch.uint8).numpy()
    Image.fromarray(arr, mode="L").save(path)
    if sidecar is not None:
        meta = dict(sidecar)
        if smap.t_extract is not None:
            meta.setdefault("t_extract", smap.t_extract)
        Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def save_mask_png(mask: SubjectMask, path, sidecar: dict | None = None) -> None:
    from PIL import Image

    arr = (mask.mask * 255.0).round().to(torch.uint8).numpy()
    Image.fromarray(arr, mode="L").save(path)
    if sidecar is not None:
        meta = dict(sidecar)
        meta.setdefault("p_t", mask.threshold)
        Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True))
