from __future__ import annotations

import os
import zlib

import numpy as np


def stream(seed: int, label: str, *index: int) -> np.random.Generator:
    """Independent generator derived from a master seed and a fixed label.

    Streams depend only on ``(seed, label, index)``, so the order in which
    workers consume them cannot change results.
    """
    return np.random.default_rng([int(seed), zlib.crc32(label.encode()), *map(int, index)])


def max_workers() -> int:
    try:
        return max(1, int(os.environ.get("MEANFIELD_THREADS", "1")))
    except ValueError:
        return 1
