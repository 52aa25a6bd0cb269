"""Seed fan-out for named random streams.

A single root seed maps to any number of named streams, each a pure
function of (root, *tags). This lets augmentation, masking, parameter
init, and dataloader order be frozen independently, and makes resumed
runs bit-identical: no mutable RNG state ever needs to be checkpointed.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _tag_to_int(tag: int | str) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & _MASK64
    digest = hashlib.sha256(str(tag).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def seed_sequence(root_seed: int, *tags: int | str) -> np.random.SeedSequence:
    entropy = [int(root_seed) & _MASK64] + [_tag_to_int(t) for t in tags]
    return np.random.SeedSequence(entropy)


def stream(root_seed: int, *tags: int | str) -> np.random.Generator:
    """Independent generator for the stream named by ``tags``."""
    return np.random.Generator(np.random.PCG64(seed_sequence(root_seed, *tags)))


def derive_int(root_seed: int, *tags: int | str) -> int:
    """63-bit integer seed for APIs that take a scalar (e.g. torch)."""
    return int(seed_sequence(root_seed, *tags).generate_state(1, np.uint64)[0] >> 1)
