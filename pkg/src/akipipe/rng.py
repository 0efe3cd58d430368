"""Deterministic seed derivation.

A single global seed fans out to per-stage seeds by hashing the stage
label together with the seed, so each stage is independently
reproducible without the stages sharing one RNG stream.
"""

from __future__ import annotations

import hashlib


def derive_seed(seed: int, label: str) -> int:
    """Derive a 63-bit child seed from a parent seed and a stage label."""
    digest = hashlib.sha256(f"{seed}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1
