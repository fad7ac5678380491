# correspondence_transfer/utils.py

from typing import Any

import numpy as np


def readonly(array: np.ndarray) -> np.ndarray:
    """Return a read-only view so model fields cannot be mutated in place."""
    view = array.view()
    view.flags.writeable = False
    return view


def l2_normalize_rows(matrix: Any) -> np.ndarray:
    """L2-normalise every row; all-zero rows stay zero."""
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    safe = np.where(norms > 0, norms, 1.0)
    return matrix / safe


def derive_seed(master_seed: int, *counters: int) -> np.random.SeedSequence:
    """Counter-based derivation: the same (master, counters) always yields the same stream."""
    return np.random.SeedSequence(entropy=master_seed, spawn_key=tuple(int(c) for c in counters))


def derive_rng(master_seed: int, *counters: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master_seed, *counters))
