"""Counter-based seed derivation.

Every stochastic consumer (grid candidate, repetition, ensemble member,
inference stream) gets its own generator keyed by coordinates rather than
by draw order, so serial and parallel schedules see the same streams.
"""
import hashlib

import numpy as np


def _key_to_int(key):
    if isinstance(key, (bool, np.bool_)):
        return int(key)
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError(f"seed keys must be non-negative, got {key}")
        return int(key)
    digest = hashlib.sha256(str(key).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_seed(master_seed, *keys):
    """Return a 63-bit integer seed determined by ``master_seed`` and ``keys``.

    Keys may be non-negative integers or strings; strings are hashed with
    SHA-256 so the result does not depend on ``PYTHONHASHSEED``.
    """
    ss = np.random.SeedSequence(
        entropy=_key_to_int(master_seed),
        spawn_key=tuple(_key_to_int(k) for k in keys),
    )
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def make_rng(master_seed, *keys):
    return np.random.default_rng(derive_seed(master_seed, *keys))
