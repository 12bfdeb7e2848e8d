"""Deterministic seed derivation shared by samplers and the CLI task runner.

Per-task seeds are a stable hash of (master_seed, task path), so results
depend only on the config and never on worker scheduling.
"""

from __future__ import annotations

import hashlib

__all__ = ["derive_seed"]


def derive_seed(master_seed: int, *path) -> int:
    """Stable 64-bit seed from a master seed and a task path of str/int parts."""
    text = str(int(master_seed)) + "".join(f"/{part}" for part in path)
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")
