"""Named random substreams derived from one top-level seed."""

from __future__ import annotations

import random
import zlib

import numpy as np
import torch


def derive_seed(seed: int, name: str) -> int:
    """Return a 63-bit seed for the substream ``name`` of ``seed``.

    The mapping is stable across processes and Python versions, unlike
    ``hash(name)``.
    """
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode())])
    return int(ss.generate_state(1, dtype=np.uint64)[0]) >> 1


def numpy_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, name))


def torch_generator(seed: int, name: str) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(derive_seed(seed, name))
    return g


def seed_everything(seed: int, deterministic: bool = True) -> None:
    random.seed(seed)
    np.random.seed(seed % (1 << 32))
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)
