"""Purpose-keyed random streams.

Every random draw in the package comes from ``stream(seed, purpose, *keys)``.
Keeping purposes apart means switching one component off never shifts the
random numbers another component sees.
"""

from enum import IntEnum

import numpy as np


class Purpose(IntEnum):
    INIT = 1
    SUBSET = 2
    SHUFFLE = 3
    REG_MASK = 4
    AUG_MASK = 5
    DROPOUT = 6
    SAMPLE = 7
    SYNTH = 8
    DERIVE = 9


def stream(seed: int, purpose: int, *keys: int) -> np.random.Generator:
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, int(purpose), *(int(k) for k in keys)]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def derive_seed(seed: int, *keys: int) -> int:
    """A 63-bit child seed, e.g. one per subset in an experiment."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, int(Purpose.DERIVE),
                                 *(int(k) for k in keys)])
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))
