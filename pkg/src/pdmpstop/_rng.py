"""Replayable random streams.

A stream is identified by ``(master_seed, purpose_tag, index)``.  The triple is
hashed with SHA-256 and the digest seeds a :class:`numpy.random.SeedSequence`,
so the same identity always yields the same PCG64 generator regardless of the
order in which streams are created.
"""

import hashlib

import numpy as np

__all__ = ["stream", "stream_entropy"]

_MAX_U64 = 2**64 - 1


def stream_entropy(master_seed, purpose_tag, index=0):
    """Return the 256-bit integer entropy for a stream identity."""
    master_seed = int(master_seed)
    index = int(index)
    if not 0 <= master_seed <= _MAX_U64:
        raise ValueError(f"master_seed must be a u64, got {master_seed}")
    if not 0 <= index <= _MAX_U64:
        raise ValueError(f"index must be a u64, got {index}")
    payload = b"|".join(
        [
            master_seed.to_bytes(8, "little"),
            str(purpose_tag).encode("utf-8"),
            index.to_bytes(8, "little"),
        ]
    )
    return int.from_bytes(hashlib.sha256(payload).digest(), "little")


def stream(master_seed, purpose_tag, index=0):
    """Generator for the stream ``(master_seed, purpose_tag, index)``."""
    seq = np.random.SeedSequence(stream_entropy(master_seed, purpose_tag, index))
    return np.random.Generator(np.random.PCG64(seq))
