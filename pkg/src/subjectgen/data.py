"""Synthetic shape scenes with analytic ground-truth masks.

Every sample is a flat-colored background plus one textured shape whose
pixel membership is computed from its geometry, so subject masks are exact
by construction. Colors are defined in 8-bit space and normalization is
pixel/127.5 - 1, making PNG round trips bit-exact.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import rng, text

# 8-bit palettes; names must stay inside the text vocabulary.
SUBJECT_COLORS: dict[str, tuple[int, int, int]] = {
    "red": (230, 25, 25),
    "green": (25, 200, 50),
    "blue": (40, 60, 230),
    "yellow": (240, 220, 30),
    "magenta": (220, 30, 200),
    "cyan": (30, 200, 220),
    "orange": (245, 140, 20),
}

BACKGROUND_COLORS: dict[str, tuple[int, int, int]] = {
    "black": (0, 0, 0),
    "white": (255, 255, 255),
    "gray": (128, 128, 128),
    "navy": (0, 0, 128),
    "olive": (128, 128, 0),
    "teal": (0, 128, 128),
}

SHAPES = ("square", "circle", "triangle", "cross")
TEXTURES = ("solid", "striped", "dotted")


def _dark(color: tuple[int, int, int]) -> tuple[int, int, int]:
    return tuple(int(round(c * 0.45)) for c in color)


def shape_membership(shape: str, cx: float, cy: float, r: float,
                     size: int) -> np.ndarray:
    """Boolean (size, size) pixel membership for a shape's geometry."""
    ys, xs = np.mgrid[0:size, 0:size]
    if shape == "square":
        return (np.abs(xs - cx) <= r) & (np.abs(ys - cy) <= r)
    if shape == "circle":
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r
    if shape == "triangle":
        dy = ys - (cy - r)
        return (dy >= 0) & (dy <= 2 * r) & (np.abs(xs - cx) <= dy / 2)
    if shape == "cross":
        arm = max(1.0, r / 3.0)
        horiz = (np.abs(ys - cy) <= arm) & (np.abs(xs - cx) <= r)
        vert = (np.abs(xs - cx) <= arm) & (np.abs(ys - cy) <= r)
        return horiz | vert
    raise ValueError(f"unknown shape {shape!r}")


def render_sample(shape: str, color: str, texture: str, background: str,
                  cx: float, cy: float, r: float, size: int = 32,
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Render one scene. Returns (uint8 (size,size,3) image, bool mask)."""
    if color not in SUBJECT_COLORS:
        raise ValueError(f"unknown subject color {color!r}")
    if background not in BACKGROUND_COLORS:
        raise ValueError(f"unknown background {background!r}")
    if texture not in TEXTURES:
        raise ValueError(f"unknown texture {texture!r}")
    mask = shape_membership(shape, cx, cy, r, size)
    img = np.empty((size, size, 3), dtype=np.uint8)
    img[:] = BACKGROUND_COLORS[background]
    fg = np.array(SUBJECT_COLORS[color], dtype=np.uint8)
    dk = np.array(_dark(SUBJECT_COLORS[color]), dtype=np.uint8)
    ys, xs = np.mgrid[0:size, 0:size]
    if texture == "solid":
        pattern = np.ones((size, size), dtype=bool)
    elif texture == "striped":
        pattern = (ys % 4) < 2
    else:  # dotted: 2x2 checker of darker cells
        pattern = ((xs // 2) + (ys // 2)) % 2 == 0
    img[mask & pattern] = fg
    img[mask & ~pattern] = dk
    return img, mask


def position_word(cx: float, cy: float, size: int) -> str:
    """Coarse location word for captions, from the shape center."""
    third = size / 3
    if cy < third:
        return "top"
    if cy >= 2 * third:
        return "bottom"
    if cx < third:
        return "left"
    if cx >= 2 * third:
        return "right"
    return "center"


def make_caption(shape: str, color: str, texture: str, background: str,
                 pos: str, verbosity: str) -> tuple[str, text.TextPrompt]:
    if verbosity == "concise":
        words = ["a", color, shape]
    else:
        words = ["a", texture, color, shape, "at", "the", pos,
                 "on", "a", background, "background"]
    prompt = text.prompt_from_words(words, {shape})
    return " ".join(words), prompt


def make_placeholder_caption(background: str, subject_name: str = "sks subject",
                             ) -> tuple[str, text.TextPrompt]:
    """Caption binding the reserved subject token to the foreground object.

    Used for a fraction of pretraining captions so that the subject
    token's attention learns generic foreground localization.
    """
    caption = f"a {subject_name} on a {background} background"
    words = ["a", "<subject>", "on", "a", background, "background"]
    tokens = tuple(
        text.SUBJECT_ID if w == "<subject>" else text.VOCAB_INDEX.get(w, text.UNK_ID)
        for w in words
    )
    prompt = text.TextPrompt(tokens=tokens, subject_positions=frozenset({1}))
    return caption, prompt


@dataclass(frozen=True)
class SyntheticSpec:
    shapes: tuple[str, ...] = SHAPES
    colors: tuple[str, ...] = tuple(SUBJECT_COLORS)
    textures: tuple[str, ...] = TEXTURES
    backgrounds: tuple[str, ...] = tuple(BACKGROUND_COLORS)
    image_size: int = 32
    count: int = 256
    verbosity: str = "detailed"
    placeholder_rate: float = 0.25

    def __post_init__(self):
        for name, allowed, got in (
            ("shapes", SHAPES, self.shapes),
            ("colors", tuple(SUBJECT_COLORS), self.colors),
            ("textures", TEXTURES, self.textures),
            ("backgrounds", tuple(BACKGROUND_COLORS), self.backgrounds),
        ):
            if not got:
                raise ValueError(f"{name} must be non-empty")
            unknown = set(got) - set(allowed)
            if unknown:
                raise ValueError(f"unknown {name}: {sorted(unknown)}")
        if self.verbosity not in ("concise", "detailed"):
            raise ValueError("verbosity must be 'concise' or 'detailed'")
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if not 0.0 <= self.placeholder_rate <= 1.0:
            raise ValueError("placeholder_rate must lie in [0, 1]")

    def to_manifest(self) -> dict:
        return {
            "shapes": list(self.shapes), "colors": list(self.colors),
            "textures": list(self.textures),
            "backgrounds": list(self.backgrounds),
            "image_size": self.image_size, "count": self.count,
            "verbosity": self.verbosity,
            "placeholder_rate": self.placeholder_rate,
        }

    @staticmethod
    def from_manifest(entry: dict) -> "SyntheticSpec":
        return SyntheticSpec(
            shapes=tuple(entry["shapes"]), colors=tuple(entry["colors"]),
            textures=tuple(entry["textures"]),
            backgrounds=tuple(entry["backgrounds"]),
            image_size=int(entry["image_size"]), count=int(entry["count"]),
            verbosity=entry["verbosity"],
            placeholder_rate=float(entry["placeholder_rate"]),
        )


@dataclass(frozen=True)
class CaptionedImages:
    """Materialized dataset: normalized images, prompts, analytic masks."""

    images: torch.Tensor            # (N, 3, S, S) float32 in [-1, 1]
    captions: tuple[text.TextPrompt, ...]
    caption_texts: tuple[str, ...]
    masks: torch.Tensor             # (N, S, S) bool
    attributes: tuple[dict, ...]    # per-item shape/color/texture/bg/geometry

    def __len__(self) -> int:
        return self.images.shape[0]


def image_to_tensor(img: np.ndarray) -> torch.Tensor:
    """uint8 (H, W, 3) -> float32 (3, H, W) in [-1, 1]."""
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("expected uint8 (H, W, 3)")
    arr = np.ascontiguousarray(img)
    if not arr.flags.writeable:
        arr = arr.copy()  # torch rejects read-only buffers
    t = torch.from_numpy(arr).permute(2, 0, 1).float()
    return t / 127.5 - 1.0


def tensor_to_image(t: torch.Tensor) -> np.ndarray:
    """float (3, H, W) -> uint8 (H, W, 3); values clamped to [-1, 1]."""
    if t.ndim != 3 or t.shape[0] != 3:
        raise ValueError("expected (3, H, W)")
    arr = ((t.detach().clamp(-1, 1) + 1.0) * 127.5).round().to(torch.uint8)
    return arr.permute(1, 2, 0).contiguous().numpy()


def save_png(path, t: torch.Tensor) -> None:
    Image.fromarray(tensor_to_image(t), mode="RGB").save(path, format="PNG")


def load_png(path) -> torch.Tensor:
    with Image.open(path) as im:
        # np.array copies: PIL hands back a read-only view
        return image_to_tensor(np.array(im.convert("RGB")))


def generate_dataset(spec: SyntheticSpec, seed: int) -> CaptionedImages:
    g = rng.generator(seed, "dataset")
    images, captions, caption_texts, masks, attrs = [], [], [], [], []

    def pick(options):
        return options[int(torch.randint(len(options), (1,), generator=g))]

    for _ in range(spec.count):
        shape = pick(spec.shapes)
        color = pick(spec.colors)
        texture = pick(spec.textures)
        background = pick(spec.backgrounds)
        s = spec.image_size
        r_lo, r_hi = s * 6 // 32, s * 10 // 32
        r = float(int(torch.randint(r_lo, r_hi + 1, (1,), generator=g)))
        margin = int(r) + 2
        cx = float(int(torch.randint(margin, s - margin, (1,), generator=g)))
        cy = float(int(torch.randint(margin, s - margin, (1,), generator=g)))
        img, mask = render_sample(shape, color, texture, background,
                                  cx, cy, r, size=s)
        pos = position_word(cx, cy, s)
        use_placeholder = (
            float(torch.rand((1,), generator=g)) < spec.placeholder_rate
        )
        if use_placeholder:
            cap_text, prompt = make_placeholder_caption(background)
        else:
            cap_text, prompt = make_caption(shape, color, texture,
                                            background, pos, spec.verbosity)
        images.append(image_to_tensor(img))
        captions.append(prompt)
        caption_texts.append(cap_text)
        masks.append(torch.from_numpy(mask))
        attrs.append({
            "shape": shape, "color": color, "texture": texture,
            "background": background, "position": pos,
            "cx": cx, "cy": cy, "r": r, "placeholder": use_placeholder,
        })
    return CaptionedImages(
        images=torch.stack(images), captions=tuple(captions),
        caption_texts=tuple(caption_texts), masks=torch.stack(masks),
        attributes=tuple(attrs),
    )


def save_dataset(ds: CaptionedImages, out_dir) -> None:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(len(ds)):
        name = f"{i:05d}.png"
        save_png(out / "images" / name, ds.images[i])
        Image.fromarray(
            ds.masks[i].numpy().astype(np.uint8) * 255, mode="L"
        ).save(out / "masks" / name, format="PNG")
        records.append({
            "image": f"images/{name}", "mask": f"masks/{name}",
            "caption": ds.caption_texts[i],
            "prompt": ds.captions[i].to_manifest(),
            "attributes": ds.attributes[i],
        })
    payload = json.dumps({"items": records}, indent=2, sort_keys=True)
    (out / "dataset.json").write_text(payload)


def load_dataset(in_dir) -> CaptionedImages:
    root = Path(in_dir)
    meta = json.loads((root / "dataset.json").read_text())
    images, captions, caption_texts, masks, attrs = [], [], [], [], []
    for rec in meta["items"]:
        images.append(load_png(root / rec["image"]))
        with Image.open(root / rec["mask"]) as im:
            masks.append(torch.from_numpy(np.asarray(im.convert("L")) > 127))
        captions.append(text.TextPrompt.from_manifest(rec["prompt"]))
        caption_texts.append(rec["caption"])
        attrs.append(rec["attributes"])
    return CaptionedImages(
        images=torch.stack(images), captions=tuple(captions),
        caption_texts=tuple(caption_texts), masks=torch.stack(masks),
        attributes=tuple(attrs),
    )
