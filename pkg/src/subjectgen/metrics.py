"""Desk-scale evaluation proxies.

These are NOT the ViT-embedding scores reported for full-scale systems;
they exist so relative comparisons (fine-tuned vs. base, tau sweeps,
threshold sweeps) are measurable on the synthetic domain. Absolute values
are meaningless outside this repository.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw

from . import data
from .attention import SubjectMask
from .text import SUBJECT_ID, UNK_ID, TextPrompt


def subject_descriptor(image: torch.Tensor, bins: int = 8) -> torch.Tensor:
    """Color histogram of the foreground pixels, L2-normalized.

    Background is detected as the dominant border color and excluded, so
    the descriptor tracks the subject's appearance regardless of where the
    subject sits or what it sits on. Texture variants shift mass between
    the pure-color bin and the darkened-variant bin, so solid, striped,
    and dotted versions of one color remain distinguishable. An image with
    no detectable foreground maps to the zero vector.
    """
    if image.ndim != 3:
        raise ValueError("expected (C, H, W)")
    img8 = data.tensor_to_image(image)
    _, bg_rgb = _detect_background(img8)
    fg = _foreground_mask(img8, bg_rgb)
    vec = torch.zeros(img8.shape[2] * bins)
    if not fg.any():
        return vec
    px = img8[fg].astype(np.int64)                     # (N, C)
    for c in range(px.shape[1]):
        idx = np.minimum(px[:, c] * bins // 256, bins - 1)
        counts = np.bincount(idx, minlength=bins)
        vec[c * bins:(c + 1) * bins] = torch.from_numpy(counts).float()
    return vec / vec.norm()


def subject_consistency(generated, references, bins: int = 8) -> float:
    """Mean cosine similarity of subject descriptors over all
    (generated, reference) pairs. Both arguments are sequences of
    (C, H, W) images; a foreground-free image scores zero against
    everything."""
    if len(generated) == 0 or len(references) == 0:
        raise ValueError("image sets must be non-empty")
    gv = [subject_descriptor(im, bins) for im in generated]
    rv = [subject_descriptor(im, bins) for im in references]
    total = 0.0
    for g in gv:
        for r in rv:
            total += float(torch.dot(g, r))
    return total / (len(gv) * len(rv))


# -- attribute probe -------------------------------------------------------------

_POSITIONS = ("top", "bottom", "left", "right", "center")


def _detect_background(img8: np.ndarray) -> tuple[str, np.ndarray]:
    """Majority border color, snapped to the nearest background palette entry."""
    border = np.concatenate([
        img8[0, :], img8[-1, :], img8[1:-1, 0], img8[1:-1, -1]
    ]).reshape(-1, 3)
    colors, counts = np.unique(border, axis=0, return_counts=True)
    bg_rgb = colors[counts.argmax()].astype(np.int16)
    names = list(data.BACKGROUND_COLORS)
    palette = np.array([data.BACKGROUND_COLORS[n] for n in names], dtype=np.int16)
    dists = np.abs(palette - bg_rgb).sum(axis=1)
    return names[int(dists.argmin())], bg_rgb


def _foreground_mask(img8: np.ndarray, bg_rgb: np.ndarray) -> np.ndarray:
    # palette colors (and their darkened texture variants) all sit at
    # L-infinity distance > 25 from every background color
    diff = np.abs(img8.astype(np.int16) - bg_rgb[None, None, :]).max(axis=2)
    return diff > 25


def _detect_subject_color(img8: np.ndarray, fg: np.ndarray) -> str | None:
    if fg.sum() == 0:
        return None
    mean = img8[fg].astype(np.float64).mean(axis=0)
    best_name, best_d = None, None
    for name, c in data.SUBJECT_COLORS.items():
        c = np.array(c, dtype=np.float64)
        # textures mix the pure color with its 0.45x darkened variant, so
        # the expected mean lies on the segment [0.45 c, c]
        s = float(np.clip(np.dot(mean, c) / np.dot(c, c), 0.45, 1.0))
        d = float(np.linalg.norm(mean - s * c))
        if best_d is None or d < best_d:
            best_name, best_d = name, d
    return best_name


def _fit_shape(fg: np.ndarray) -> tuple[str | None, float]:
    """Best (shape, IoU) over a geometry grid search against the mask."""
    area = float(fg.sum())
    if area < 4:
        return None, 0.0
    size = fg.shape[0]
    ys, xs = np.nonzero(fg)
    cy0, cx0 = float(ys.mean()), float(xs.mean())
    best_shape, best_iou = None, 0.0
    for shape in data.SHAPES:
        for r2 in range(4, 2 * min(16, size // 2) + 1):
            r = r2 / 2.0
            # place the candidate so its own centroid matches the measured one
            trial = data.shape_membership(shape, cx0, cy0, r, size)
            if not trial.any():
                continue
            tys, txs = np.nonzero(trial)
            cand = data.shape_membership(
                shape, cx0 + (cx0 - txs.mean()), cy0 + (cy0 - tys.mean()), r, size
            )
            inter = float((cand & fg).sum())
            union = float((cand | fg).sum())
            iou = inter / union if union else 0.0
            if iou > best_iou:
                best_shape, best_iou = shape, iou
    return best_shape, best_iou


def text_alignment(generated: torch.Tensor, prompt: TextPrompt,
                   min_shape_iou: float = 0.5) -> float:
    """Fraction of the prompt's checkable attributes (subject color, shape,
    background) detected in the image by deterministic rules."""
    words = prompt.words
    if any(t == UNK_ID for t in prompt.tokens):
        raise ValueError("prompt contains out-of-vocabulary tokens")
    want_color = next((w for w in words if w in data.SUBJECT_COLORS), None)
    want_shape = next((w for w in words if w in data.SHAPES), None)
    want_bg = None
    for i, w in enumerate(words):
        if w in data.BACKGROUND_COLORS and i + 1 < len(words) \
                and words[i + 1] == "background":
            want_bg = w
            break
    if want_bg is None:
        want_bg = next((w for w in words if w in data.BACKGROUND_COLORS), None)
    checks = [(k, v) for k, v in
              (("color", want_color), ("shape", want_shape), ("bg", want_bg))
              if v is not None]
    if not checks:
        raise ValueError("prompt has no checkable attributes")

    img8 = data.tensor_to_image(generated)
    bg_name, bg_rgb = _detect_background(img8)
    fg = _foreground_mask(img8, bg_rgb)
    got = {"bg": bg_name, "color": _detect_subject_color(img8, fg)}
    shape, iou = _fit_shape(fg)
    got["shape"] = shape if iou >= min_shape_iou else None

    hits = sum(1 for kind, want in checks if got[kind] == want)
    return hits / len(checks)


def background_deviation(generated: torch.Tensor, context: torch.Tensor,
                         subject_mask: SubjectMask) -> float:
    """MSE between the images over background (mask == 0) pixels only."""
    if generated.shape != context.shape:
        raise ValueError("image shapes differ")
    m = subject_mask.mask
    if m.shape != generated.shape[-2:]:
        raise ValueError("mask resolution does not match the images")
    keep = (m == 0)
    n = int(keep.sum())
    if n == 0:
        raise ValueError("mask covers the whole image: no background to compare")
    diff = (generated.double() - context.double())[:, keep]
    return float(diff.pow(2).mean())


# -- report emitters -------------------------------------------------------------


def write_metrics_csv(path, rows) -> None:
    """rows: iterable of (run_id, metric, value) triples."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["run_id", "metric", "value"])
        for run_id, metric, value in rows:
            writer.writerow([run_id, metric, repr(float(value))])


def plot_grid(entries, path, cols: int | None = None, upscale: int = 4) -> None:
    """Labeled image grid for sweeps. entries: list of (label, (3,H,W) tensor)."""
    if not entries:
        raise ValueError("nothing to plot")
    cols = cols or min(len(entries), 6)
    rows = (len(entries) + cols - 1) // cols
    tiles = [Image.fromarray(data.tensor_to_image(t), mode="RGB")
             .resize((t.shape[-1] * upscale, t.shape[-2] * upscale), Image.NEAREST)
             for _, t in entries]
    tw, th = tiles[0].size
    label_h, pad = 14, 4
    cell_w, cell_h = tw + pad * 2, th + label_h + pad * 2
    canvas = Image.new("RGB", (cols * cell_w, rows * cell_h), (24, 24, 24))
    draw = ImageDraw.Draw(canvas)
    for i, ((label, _), tile) in enumerate(zip(entries, tiles)):
        gy, gx = divmod(i, cols)
        x, y = gx * cell_w + pad, gy * cell_h + pad
        draw.text((x, y), str(label), fill=(230, 230, 230))
        canvas.paste(tile, (x, y + label_h))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    canvas.save(path, format="PNG")
