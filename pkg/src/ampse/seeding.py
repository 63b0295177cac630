"""Counter-based seed splitting.

A sub-seed is the first 8 bytes (big endian) of
``sha256("<root>/<label_1>/<label_2>/...")``. Labels are stringified, so a
sub-seed depends only on the root seed and the path of labels leading to it,
never on call order. Parallel and serial runs therefore draw identical streams.
"""

from __future__ import annotations

import hashlib

import numpy as np

MASK64 = (1 << 64) - 1


def derive_seed(root: int, *labels) -> int:
    path = "/".join([str(int(root) & MASK64), *(str(x) for x in labels)])
    digest = hashlib.sha256(path.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def rng(root: int, *labels) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, *labels))
