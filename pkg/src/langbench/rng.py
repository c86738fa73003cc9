"""Counter-based random streams keyed by (seed, purpose, step).

Each (purpose, step) pair gets an independent Philox stream derived from
the experiment seed, so shuffling, noise injection and initialization
never share state. A resumed run rebuilds any stream from its counters
alone, which is what makes checkpoint resume bit-exact.
"""

import numpy as np

_PURPOSES = {
    "init": 0,
    "shuffle": 1,
    "noise": 2,
    "truncate": 3,
    "synthetic": 4,
    "coords": 5,
}


def stream(seed, purpose, step=0):
    """Independent Generator for (seed, purpose, step)."""
    try:
        pid = _PURPOSES[purpose]
    except KeyError:
        raise ValueError(f"unknown rng purpose {purpose!r}") from None
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(pid, int(step)))
    return np.random.Generator(np.random.Philox(ss))
