"""
Named random substreams
All randomness flows from one integer seed; each consumer asks for its own
stream keyed by name plus integer coordinates (epoch, step, pass, ...)
"""

import hashlib

import numpy as np

STREAMS = {
    "data": 0,
    "init": 1,
    "shuffle": 2,
    "noise": 3,
    "mc": 4,
}


def substream(seed: int, name: str, *keys: int) -> np.random.Generator:
    """
    Build an independent generator for a named stream

    Args:
        seed: Master seed
        name: One of STREAMS
        *keys: Extra non-negative integers (epoch, step, pass index, ...)

    Returns:
        A PCG64-backed numpy Generator
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed), STREAMS[name], *map(int, keys)]))


def child_seed(seed: int, name: str, *keys: int) -> int:
    """Derive a 32-bit integer seed from a named stream"""
    sequence = np.random.SeedSequence([int(seed), STREAMS[name], *map(int, keys)])
    return int(sequence.generate_state(1)[0])


def sample_seed(master_seed: int, index: int) -> int:
    """Per-sample seed: SHA-256 of (master seed, index) folded to 64 bits"""
    digest = hashlib.sha256(f"{int(master_seed)}:{int(index)}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")
