"""Seeded, namespaced random streams.

Every consumer asks for its own stream by name (``"data"``, ``"init"``,
``"budget"``, ``"channel"``, ``"controller"``...). Streams are Philox
(counter-based) generators keyed on the global seed and a hash of the
namespace, so one stage drawing more numbers never shifts another stage.
"""

from __future__ import annotations

import hashlib

import numpy as np

NAMESPACES = ("data", "init", "budget", "channel", "controller", "eval", "shuffle")


def _key(seed: int, namespace: str, index: int) -> int:
    digest = hashlib.sha256(f"{seed}/{namespace}/{index}".encode()).digest()
    return int.from_bytes(digest[:16], "little")


def stream(seed: int, namespace: str, index: int = 0) -> np.random.Generator:
    """Independent generator for ``(seed, namespace, index)``."""
    return np.random.Generator(np.random.Philox(key=_key(int(seed), namespace, int(index))))
