import zlib

import numpy as np


class SeedUtils:
    """Utility functions for deterministic seeding"""

    @staticmethod
    def name_key(name: str) -> int:
        """Stable 32-bit key for a string (independent of PYTHONHASHSEED)"""
        return zlib.crc32(name.encode("utf-8"))

    @staticmethod
    def rng(seed: int, *keys: int | str) -> np.random.Generator:
        """Generator derived from a root seed and any number of int/str keys"""
        entropy = [int(seed)]
        for key in keys:
            entropy.append(SeedUtils.name_key(key) if isinstance(key, str) else int(key))
        return np.random.default_rng(entropy)

    @staticmethod
    def run_seeds(seed: int, runs: int) -> list[int]:
        """Seeds for repeated runs; the first run keeps the root seed"""
        derived = np.random.SeedSequence(seed).generate_state(max(runs - 1, 0), dtype=np.uint32)
        return [int(seed)] + [int(s) for s in derived]
