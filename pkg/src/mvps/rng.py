"""Named random substreams so each consumer's randomness is independent of the others."""

from __future__ import annotations

import zlib

import numpy as np
import torch


def _seed_sequence(seed: int, name: str, *extra: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), zlib.crc32(name.encode()), *map(int, extra)])


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """numpy Generator for ``(seed, name, *extra)``; adding a new name never shifts existing streams."""
    return np.random.default_rng(_seed_sequence(seed, name, *extra))


def torch_seed(seed: int, name: str, *extra: int) -> int:
    return int(_seed_sequence(seed, name, *extra).generate_state(1, np.uint64)[0] >> np.uint64(1))


def torch_generator(seed: int, name: str, *extra: int, device: str | torch.device = "cpu") -> torch.Generator:
    g = torch.Generator(device=device)
    g.manual_seed(torch_seed(seed, name, *extra))
    return g
