"""Toy text side: vocabulary, prompts, and the frozen embedder.

The embedder stands in for a frozen text encoder: a fixed random token
table plus a fixed sinusoidal positional encoding. It is deterministic,
never trained, and the empty prompt defines the unconditional embedding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import torch

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
SUBJECT_TOKEN = "<subject>"

# Curated word list for the synthetic domain. Order is part of the
# serialization contract: token ids index into this list.
_WORDS = [
    # articles / glue
    "a", "an", "the", "of", "on", "in", "at", "with",
    "photo", "picture", "image", "background", "center", "middle",
    "top", "bottom", "left", "right", "corner", "side", "near",
    "small", "large",
    # shapes
    "square", "circle", "triangle", "cross",
    # subject colors
    "red", "green", "blue", "yellow", "magenta", "cyan", "orange",
    # textures
    "solid", "striped", "dotted",
    # backgrounds
    "black", "white", "gray", "navy", "olive", "teal",
]

VOCAB: tuple[str, ...] = (PAD_TOKEN, UNK_TOKEN, SUBJECT_TOKEN, *_WORDS)
VOCAB_INDEX: dict[str, int] = {w: i for i, w in enumerate(VOCAB)}

PAD_ID = VOCAB_INDEX[PAD_TOKEN]
UNK_ID = VOCAB_INDEX[UNK_TOKEN]
SUBJECT_ID = VOCAB_INDEX[SUBJECT_TOKEN]

MAX_TOKENS = 16       # prompts are padded / validated against this length
EMBED_DIM = 64        # token vector width seen by cross-attention
_TABLE_SEED = 0x5EED7EC5  # fixed: the embedder is frozen, not trained
# Positional information is kept an order of magnitude below token
# identity, otherwise attention keys for the same word at different
# positions drift apart and token binding stays diffuse.
PE_SCALE = 0.1
EMBEDDER_VERSION = 2  # bump when the frozen embedder definition changes


@dataclass(frozen=True)
class TextPrompt:
    """Token ids plus the positions bound to the personalized subject."""

    tokens: tuple[int, ...]
    subject_positions: frozenset[int] = frozenset()

    def __post_init__(self):
        if len(self.tokens) > MAX_TOKENS:
            raise ValueError(f"prompt has {len(self.tokens)} tokens, max {MAX_TOKENS}")
        for tok in self.tokens:
            if not 0 <= tok < len(VOCAB):
                raise ValueError(f"token id {tok} outside vocabulary")
        for pos in self.subject_positions:
            if not 0 <= pos < len(self.tokens):
                raise ValueError(f"subject position {pos} outside prompt")

    @property
    def words(self) -> tuple[str, ...]:
        return tuple(VOCAB[t] for t in self.tokens)

    def to_manifest(self) -> dict:
        return {
            "tokens": list(self.tokens),
            "subject_positions": sorted(self.subject_positions),
        }

    @staticmethod
    def from_manifest(entry: dict) -> "TextPrompt":
        return TextPrompt(
            tokens=tuple(entry["tokens"]),
            subject_positions=frozenset(entry["subject_positions"]),
        )


EMPTY_PROMPT = TextPrompt(tokens=())


def prompt_from_words(words, subject_words: frozenset[str] = frozenset()) -> TextPrompt:
    """Map known words to ids, unknown words to <unk>.

    Positions of any word in `subject_words` (or of the literal subject
    placeholder) are recorded as subject positions.
    """
    tokens = []
    positions = set()
    for i, w in enumerate(words):
        w = w.lower()
        tokens.append(VOCAB_INDEX.get(w, UNK_ID))
        if w in subject_words or w == SUBJECT_TOKEN:
            tokens[-1] = SUBJECT_ID if w == SUBJECT_TOKEN else tokens[-1]
            positions.add(i)
    return TextPrompt(tokens=tuple(tokens), subject_positions=frozenset(positions))


@lru_cache(maxsize=1)
def token_table() -> torch.Tensor:
    """Frozen (V, EMBED_DIM) token table, unit-variance Gaussian rows."""
    g = torch.Generator(device="cpu")
    g.manual_seed(_TABLE_SEED)
    table = torch.randn(len(VOCAB), EMBED_DIM, generator=g)
    table[PAD_ID] = 0.0  # the pad row carries position information only
    return table


@lru_cache(maxsize=1)
def positional_encoding() -> torch.Tensor:
    """Fixed sinusoidal (MAX_TOKENS, EMBED_DIM) positional encoding,
    scaled by PE_SCALE."""
    pos = torch.arange(MAX_TOKENS, dtype=torch.float32).unsqueeze(1)
    idx = torch.arange(EMBED_DIM // 2, dtype=torch.float32)
    freq = torch.exp(-math.log(10000.0) * idx / (EMBED_DIM // 2))
    angles = pos * freq
    pe = torch.zeros(MAX_TOKENS, EMBED_DIM)
    pe[:, 0::2] = torch.sin(angles)
    pe[:, 1::2] = torch.cos(angles)
    return pe * PE_SCALE


def embed_prompt(prompt: TextPrompt) -> torch.Tensor:
    """(MAX_TOKENS, EMBED_DIM) embedding: table lookup plus positions.

    The empty prompt yields the unconditional (null) embedding.
    """
    ids = torch.full((MAX_TOKENS,), PAD_ID, dtype=torch.long)
    if prompt.tokens:
        ids[: len(prompt.tokens)] = torch.tensor(prompt.tokens, dtype=torch.long)
    return token_table()[ids] + positional_encoding()


def null_embedding() -> torch.Tensor:
    """Embedding of the empty prompt; the CFG unconditional input."""
    return embed_prompt(EMPTY_PROMPT)
