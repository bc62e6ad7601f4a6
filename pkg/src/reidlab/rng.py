"""Named sub-seed derivation.

One master seed fans out into independent streams (weight init, data
generation, batch sampling, dropout, power-iteration starts) so any one
component can be re-seeded without perturbing the others.
"""

from __future__ import annotations

import zlib

import numpy as np


def _tokens(names) -> list[int]:
    out = []
    for name in names:
        if isinstance(name, (int, np.integer)):
            out.append(int(name) & 0xFFFFFFFF)
        else:
            out.append(zlib.crc32(str(name).encode()))
    return out


def sub_rng(master_seed: int, *names) -> np.random.Generator:
    """Deterministic child generator for a named component."""
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), *_tokens(names)]))


def sub_seed(master_seed: int, *names) -> int:
    """Deterministic 32-bit child seed for APIs that take a plain int."""
    seq = np.random.SeedSequence([int(master_seed), *_tokens(names)])
    return int(seq.generate_state(1, dtype=np.uint32)[0])
