"""Seed plumbing: every random stream is derived from one root seed plus fixed labels."""

import zlib

import numpy as np


def _label_key(label):
    if isinstance(label, (int, np.integer)):
        return int(label) & 0xFFFFFFFF
    return zlib.crc32(str(label).encode("utf-8"))


def derive_seed(root, *labels):
    """Return a 64-bit integer seed for the stream named by ``labels``."""
    ss = np.random.SeedSequence(int(root), spawn_key=tuple(_label_key(x) for x in labels))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def derive_rng(root, *labels):
    return np.random.default_rng(derive_seed(root, *labels))
