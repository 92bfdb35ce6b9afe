"""Counter-based RNG streams.

All randomness in the repo flows through Philox generators keyed by a
root seed plus an integer path, so every component draws from an
independent, platform-stable stream.
"""

from __future__ import annotations

import numpy as np

__all__ = ["stream"]


def stream(root_seed, *path: int) -> np.random.Generator:
    """Derive an independent Philox stream from (root_seed, *path).

    ``root_seed`` may itself be a tuple of ints (a previously split seed).
    """
    root = list(root_seed) if isinstance(root_seed, (tuple, list)) else [root_seed]
    entropy = [int(r) for r in root] + [int(p) for p in path]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
