"""Seed handling.

All randomness in a run flows from one root seed through named substreams,
so any component (data draws, noise draws, init) can be reproduced in
isolation. Substream seeds are derived with a keyed hash, not arithmetic
offsets, so adding a stream never perturbs the others.
"""

from __future__ import annotations

import hashlib

import torch

_MASK63 = (1 << 63) - 1


def substream_seed(seed: int, *names: str) -> int:
    """Derive a child seed for the substream identified by `names`."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(seed)).encode())
    for name in names:
        h.update(b"/")
        h.update(name.encode())
    return int.from_bytes(h.digest(), "little") & _MASK63


def generator(seed: int, *names: str) -> torch.Generator:
    """CPU generator seeded for the substream identified by `names`."""
    g = torch.Generator(device="cpu")
    g.manual_seed(substream_seed(seed, *names))
    return g
