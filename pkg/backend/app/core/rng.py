"""Explicitly seeded, counter-based random streams.

A run is keyed by one integer seed. Named streams are derived from it with
``numpy.random.SeedSequence(seed).spawn`` in a fixed order, and every stream is a
``Generator`` over the counter-based Philox bit generator. Nothing in the
package touches numpy's global random state.
"""

from typing import Dict, Sequence, Union

import numpy as np

SeedLike = Union[int, np.random.SeedSequence]

TRAINING_STREAMS = ("init", "split", "batches", "dropout")


def make_rng(seed: SeedLike) -> np.random.Generator:
    sequence = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return np.random.Generator(np.random.Philox(sequence))


def spawn_streams(seed: SeedLike, names: Sequence[str]) -> Dict[str, np.random.Generator]:
    """One independent generator per name; the i-th name always gets child i."""
    sequence = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    children = sequence.spawn(len(names))
    return {name: make_rng(child) for name, child in zip(names, children)}


def derive_seed(seed: int, *keys: int) -> int:
    """Stable 32-bit child seed for job ``keys`` under a base seed."""
    sequence = np.random.SeedSequence(seed, spawn_key=tuple(keys))
    return int(sequence.generate_state(1, dtype=np.uint32)[0])
