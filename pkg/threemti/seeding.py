from __future__ import annotations

import hashlib
import random

import numpy as np
import torch

_SEED_MASK = (1 << 63) - 1


def derive_seed(*parts: object) -> int:
    """Stable 63-bit seed from an ordered tuple of parts.

    Records, steps and samples get independent streams, so work can run in any
    order (or in parallel) and still reproduce.
    """
    h = hashlib.sha256()
    for part in parts:
        h.update(repr(part).encode("utf-8"))
        h.update(b"\0")
    return int.from_bytes(h.digest()[:8], "little") & _SEED_MASK


def numpy_rng(*parts: object) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*parts))


def torch_generator(*parts: object) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(derive_seed(*parts))
    return g


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % (1 << 32))
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)
