"""Counter-based random substreams keyed by (seed, stream name, counter).

A substream depends only on its key, never on how many draws other streams
made before it, so results do not depend on scheduling order.
"""

import hashlib

import numpy as np


def substream_key(seed: int, name: str, counter: int) -> np.ndarray:
    digest = hashlib.blake2b(f"{seed}\x1f{name}\x1f{counter}".encode(), digest_size=16).digest()
    return np.frombuffer(digest, dtype="<u8").copy()


def substream(seed: int, name: str, counter: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=substream_key(seed, name, counter)))
