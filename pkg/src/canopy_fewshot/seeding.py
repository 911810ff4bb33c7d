"""Deterministic seed derivation shared by every stage."""

from __future__ import annotations

import hashlib

_MASK = (1 << 32) - 1


def derive_seed(seed: int, *names: object) -> int:
    """Return a 32-bit sub-seed for ``(seed, *names)``.

    The derivation is ``sha256("seed:name1:name2...")`` truncated to 32 bits,
    so it is stable across processes and Python versions (unlike ``hash``).
    """
    key = ":".join([str(int(seed))] + [str(n) for n in names])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little") & _MASK


def fingerprint(*parts: object) -> str:
    """Short hex content fingerprint over the ``repr`` of ``parts``."""
    h = hashlib.sha256()
    for p in parts:
        h.update(repr(p).encode("utf-8"))
        h.update(b"\x00")
    return h.hexdigest()[:16]
