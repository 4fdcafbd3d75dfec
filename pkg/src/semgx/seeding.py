"""Named, hierarchical RNG derivation.

All randomness in the package flows from one master seed. Subsystems pull
independent streams by name (plus optional integer qualifiers), so any part
of a run — dataset synthesis, augmentation, weight init, batch shuffling —
can be reproduced in isolation and is insensitive to execution order.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _label_entropy(label: str | int) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label) & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.blake2b(label.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def derive_seed_sequence(master_seed: int, *labels: str | int) -> np.random.SeedSequence:
    """Build a SeedSequence for (master_seed, labels...); stable across runs."""
    entropy = [int(master_seed) & 0xFFFFFFFFFFFFFFFF]
    entropy.extend(_label_entropy(lab) for lab in labels)
    return np.random.SeedSequence(entropy)


def derive_rng(master_seed: int, *labels: str | int) -> np.random.Generator:
    """Independent Generator for the named stream under the master seed."""
    return np.random.default_rng(derive_seed_sequence(master_seed, *labels))
