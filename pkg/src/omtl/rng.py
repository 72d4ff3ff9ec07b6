"""Named random substreams derived from a single base seed.

Every source of randomness in the package (init, shuffle, dropout, synth,
fold assignment, ...) pulls its own generator via `substream(seed, name)`,
so any component can be reproduced in isolation from the one CLI seed.
"""

from __future__ import annotations

import zlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    """Return a Generator for the named stream under the base seed.

    The same (seed, name) pair always yields the same stream; distinct
    names yield statistically independent streams.
    """
    tag = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, tag]))
