"""Canonical serialization, content hashing and seed derivation.

Every stochastic point in the package draws its seed from ``derive_seed``:
the master seed and a tuple of labels are serialized as canonical JSON and
hashed with SHA-256; the first 8 bytes (big endian) form the child seed.
"""
from __future__ import annotations

import hashlib
import json
from typing import Any


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def content_hash(obj: Any, length: int = 64) -> str:
    digest = hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()
    return digest[:length]


def derive_seed(master: int, *labels: Any) -> int:
    """Derive a 64-bit child seed from ``master`` and any JSON-able labels."""
    payload = canonical_json([int(master), list(labels)]).encode("utf-8")
    return int.from_bytes(hashlib.sha256(payload).digest()[:8], "big")


class Event(dict):
    """A simulator event: ``{"kind": ..., **data}``.

    Plain dict subclass so event logs serialize without ceremony.
    """

    def __init__(self, kind: str, **data: Any) -> None:
        super().__init__(kind=kind, **data)

    @property
    def kind(self) -> str:
        return self["kind"]
