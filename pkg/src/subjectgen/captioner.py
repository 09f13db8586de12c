"""Reference captioning: a structured-output VLM client plus an offline stub.

The live client speaks a chat-completions-style HTTP API with base64 PNG
attachments and expects a strict JSON reply naming the subject and giving
one caption per image. The stub produces the same contract offline by
reading each image's border color, so tests and default runs never touch
the network.
"""

from __future__ import annotations

import base64
import io
import json
import os
import re
import time
from dataclasses import dataclass

import numpy as np

from . import data, text
from .errors import CaptionTransportError, CaptionValidationError

API_KEY_ENV = "SUBJECTGEN_VLM_API_KEY"

SYSTEM_MESSAGE = """\
You are labeling reference photos for a subject-driven image generator.
All of the attached images show the same single subject. Reply with JSON
only, no prose and no code fences, in exactly this form:

{"subject_name": "<short name for the subject>",
 "image_captions": ["<caption for image 1>", "<caption for image 2>", ...]}

Rules:
- Give exactly one caption per attached image, in the same order.
- Every caption must contain subject_name verbatim.
- Keep captions short but descriptive: mention the setting or background
  and where the subject sits in the frame.
"""


@dataclass(frozen=True)
class CaptionResponse:
    subject_name: str
    image_captions: tuple[str, ...]


def parse_caption_response(raw: str, n_images: int) -> CaptionResponse:
    """Parse and validate a structured caption reply.

    Accepts a bare JSON object (tolerating a fenced code block) and
    enforces the contract: both fields present, one caption per image,
    subject name contained in every caption. Violations raise
    CaptionValidationError with the raw reply attached; nothing crashes.
    """
    body = raw.strip()
    fenced = re.match(r"^```(?:json)?\s*(.*?)\s*```$", body, flags=re.DOTALL)
    if fenced:
        body = fenced.group(1)
    try:
        doc = json.loads(body)
    except json.JSONDecodeError as exc:
        raise CaptionValidationError(f"reply is not valid JSON: {exc}", raw)
    if not isinstance(doc, dict):
        raise CaptionValidationError("reply is not a JSON object", raw)
    name = doc.get("subject_name")
    caps = doc.get("image_captions")
    if not isinstance(name, str) or not name.strip():
        raise CaptionValidationError("missing or empty subject_name", raw)
    if not isinstance(caps, list) or not all(isinstance(c, str) for c in caps):
        raise CaptionValidationError("image_captions must be a list of strings", raw)
    if len(caps) != n_images:
        raise CaptionValidationError(
            f"got {len(caps)} captions for {n_images} images", raw)
    for i, c in enumerate(caps):
        if name not in c:
            raise CaptionValidationError(
                f"caption {i} does not contain subject_name {name!r}", raw)
    return CaptionResponse(subject_name=name, image_captions=tuple(caps))


class StubVLMClient:
    """Deterministic offline captioner with the same raw-reply contract.

    Names every subject "sks subject" and captions each image from its
    detected border color, mirroring what a cooperative VLM would say
    about the synthetic scenes.
    """

    def request(self, images) -> str:
        captions = []
        for img in images:
            arr = img if isinstance(img, np.ndarray) else data.tensor_to_image(img)
            border = np.concatenate([
                arr[0, :], arr[-1, :], arr[1:-1, 0], arr[1:-1, -1]
            ]).reshape(-1, 3)
            colors, counts = np.unique(border, axis=0, return_counts=True)
            bg = colors[counts.argmax()].astype(np.int16)
            names = list(data.BACKGROUND_COLORS)
            palette = np.array([data.BACKGROUND_COLORS[n] for n in names],
                               dtype=np.int16)
            bg_name = names[int(np.abs(palette - bg).sum(axis=1).argmin())]
            captions.append(f"a sks subject on a {bg_name} background")
        return json.dumps(
            {"subject_name": "sks subject", "image_captions": captions})


class HttpVLMClient:
    """Chat-completions client: system message + base64 PNG attachments."""

    def __init__(self, url: str, model: str = "default", timeout: float = 60.0,
                 api_key: str | None = None):
        self.url = url
        self.model = model
        self.timeout = timeout
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV, "")

    def request(self, images) -> str:
        import httpx
        from PIL import Image

        parts = [{"type": "text",
                  "text": f"Caption these {len(images)} images."}]
        for img in images:
            arr = img if isinstance(img, np.ndarray) else data.tensor_to_image(img)
            buf = io.BytesIO()
            Image.fromarray(arr, mode="RGB").save(buf, format="PNG")
            b64 = base64.b64encode(buf.getvalue()).decode()
            parts.append({
                "type": "image_url",
                "image_url": {"url": f"data:image/png;base64,{b64}"},
            })
        payload = {
            "model": self.model,
            "messages": [
                {"role": "system", "content": SYSTEM_MESSAGE},
                {"role": "user", "content": parts},
            ],
            "response_format": {"type": "json_object"},
        }
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            resp = httpx.post(self.url, json=payload, headers=headers,
                              timeout=self.timeout)
            resp.raise_for_status()
            doc = resp.json()
            return doc["choices"][0]["message"]["content"]
        except httpx.HTTPError as exc:
            raise CaptionTransportError(f"VLM request failed: {exc}") from exc
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise CaptionTransportError(
                f"VLM reply missing completion content: {exc}") from exc


def caption_images(images, client, retries: int = 2, retry_wait: float = 1.0,
                   log=None) -> CaptionResponse:
    """Request captions, validating and retrying.

    Transport failures and contract violations are both retried up to
    `retries` extra attempts; the last typed error is raised afterwards.
    `log`, if given, is a list collecting redacted request/reply records.
    """
    if len(images) == 0:
        raise ValueError("no images to caption")
    last_error = None
    for attempt in range(retries + 1):
        if attempt > 0 and retry_wait > 0:
            time.sleep(retry_wait)
        try:
            raw = client.request(images)
        except CaptionTransportError as exc:
            last_error = exc
            if log is not None:
                log.append({"attempt": attempt, "error": str(exc)})
            continue
        if log is not None:
            log.append({"attempt": attempt, "n_images": len(images), "reply": raw})
        try:
            return parse_caption_response(raw, len(images))
        except CaptionValidationError as exc:
            last_error = exc
    raise last_error


def _words_of(s: str) -> list[str]:
    return [w for w in re.split(r"[^a-z0-9]+", s.lower()) if w]


def tokenize_caption(caption: str, subject_name: str) -> text.TextPrompt:
    """Map free text onto the toy vocabulary.

    Each occurrence of the subject_name phrase becomes one reserved
    subject token; known words map to their ids, everything else to the
    catch-all token. Truncated to the prompt-length limit, but never in a
    way that drops every subject position.
    """
    subject_words = _words_of(subject_name)
    if not subject_words:
        raise ValueError("subject name is empty")
    caption_words = _words_of(caption)
    merged: list[int] = []
    positions: set[int] = set()
    i = 0
    found = False
    while i < len(caption_words):
        if caption_words[i:i + len(subject_words)] == subject_words:
            positions.add(len(merged))
            merged.append(text.SUBJECT_ID)
            i += len(subject_words)
            found = True
        else:
            merged.append(text.VOCAB_INDEX.get(caption_words[i], text.UNK_ID))
            i += 1
    if not found:
        raise ValueError(f"caption does not contain subject name {subject_name!r}")
    merged = merged[:text.MAX_TOKENS]
    positions = {p for p in positions if p < len(merged)}
    if not positions:
        raise ValueError("prompt-length truncation dropped the subject token")
    return text.TextPrompt(tokens=tuple(merged),
                           subject_positions=frozenset(positions))
