"""HTTP context-provider endpoint.

POST /generate with {prompt, seed, width, height} returns a PNG. Two
image sources exist: a deterministic stub that renders the prompt's
attributes directly (for tests and offline work), and a checkpoint source
that samples a trained model. This is the contract a full-scale
text-to-image service would stand behind.
"""

from __future__ import annotations

import hashlib
import io

import numpy as np
from fastapi import FastAPI
from fastapi.responses import JSONResponse, Response
from PIL import Image
from pydantic import BaseModel, ConfigDict, Field

from . import data
from .captioner import _words_of


class GenerateRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    prompt: str
    seed: int = 0
    width: int = Field(default=32, ge=8, le=512)
    height: int = Field(default=32, ge=8, le=512)


class StubImageSource:
    """Deterministic renderer: parses the prompt's attribute words and
    rasterizes the scene; unknown prompts fall back to a hash-seeded
    attribute pick. Identical requests yield identical PNG bytes."""

    def render(self, req: GenerateRequest) -> bytes:
        words = _words_of(req.prompt)
        digest = hashlib.blake2b(
            f"{req.prompt}|{req.seed}".encode(), digest_size=8).digest()
        pick = int.from_bytes(digest, "big")
        shape = next((w for w in words if w in data.SHAPES),
                     data.SHAPES[pick % len(data.SHAPES)])
        color = next((w for w in words if w in data.SUBJECT_COLORS),
                     tuple(data.SUBJECT_COLORS)[pick % len(data.SUBJECT_COLORS)])
        bg = next((w for w in words if w in data.BACKGROUND_COLORS),
                  tuple(data.BACKGROUND_COLORS)[pick % len(data.BACKGROUND_COLORS)])
        texture = next((w for w in words if w in data.TEXTURES), "solid")
        size = min(req.width, req.height)
        r = max(3.0, size * 8 / 32)
        img, _ = data.render_sample(shape, color, texture, bg,
                                    cx=size / 2, cy=size / 2, r=r, size=size)
        if (req.width, req.height) != (size, size):
            img = np.asarray(
                Image.fromarray(img, "RGB").resize((req.width, req.height),
                                                   Image.NEAREST))
        buf = io.BytesIO()
        Image.fromarray(img, "RGB").save(buf, format="PNG")
        return buf.getvalue()


class CheckpointImageSource:
    """Samples a trained checkpoint; width/height must match the model."""

    def __init__(self, checkpoint_path, n_steps: int = 50, scale: float = 7.5):
        from .checkpoint import load_checkpoint
        from .guidance import ToyModelContextProvider
        from .schedule import make_linear_schedule

        model, _ = load_checkpoint(checkpoint_path)
        self._size = model.config.image_size
        self._provider = ToyModelContextProvider(
            model, make_linear_schedule(1000), n_steps=n_steps, scale=scale)

    def render(self, req: GenerateRequest) -> bytes:
        from .captioner import tokenize_caption
        from . import text as text_mod

        if (req.width, req.height) != (self._size, self._size):
            raise ValueError(
                f"checkpoint renders {self._size}x{self._size} only")
        words = _words_of(req.prompt)
        tokens = tuple(text_mod.VOCAB_INDEX.get(w, text_mod.UNK_ID)
                       for w in words[:text_mod.MAX_TOKENS])
        prompt = text_mod.TextPrompt(tokens=tokens)
        img = self._provider.generate(prompt, req.seed)
        buf = io.BytesIO()
        Image.fromarray(data.tensor_to_image(img), "RGB").save(buf, format="PNG")
        return buf.getvalue()


def create_app(source=None) -> FastAPI:
    source = source or StubImageSource()
    app = FastAPI(title="subjectgen context provider")

    @app.get("/healthz")
    def healthz():
        return {"status": "ok"}

    @app.post("/generate")
    def generate(req: GenerateRequest):
        try:
            png = source.render(req)
        except ValueError as exc:
            return JSONResponse(status_code=422, content={"detail": str(exc)})
        return Response(content=png, media_type="image/png")

    return app


def serve(source=None, host: str = "127.0.0.1", port: int = 8008) -> None:
    import uvicorn

    uvicorn.run(create_app(source), host=host, port=port, log_level="warning")
