"""Splittable seeded streams."""

import hashlib

from .models import MASK64, SeededRng


def rng_derive(base_seed, stream_id):
    """Return the stream for (base_seed, stream_id); a pure function of the pair."""
    return SeededRng(base_seed, stream_id)


def rng_stream_key(kind, *ids):
    """
    Map an entity key such as ('patient', 7) or ('tree', 12) to a 64-bit stream id.

    BLAKE2b over the textual key, so the id does not depend on Python's
    per-process string hashing.
    """
    text = '/'.join([str(kind), *(str(i) for i in ids)])
    digest = hashlib.blake2b(text.encode('utf-8'), digest_size=8).digest()
    return int.from_bytes(digest, 'little') & MASK64


def rng_for(base_seed, kind, *ids):
    """Shorthand for rng_derive(base_seed, rng_stream_key(kind, *ids))."""
    return rng_derive(base_seed, rng_stream_key(kind, *ids))
