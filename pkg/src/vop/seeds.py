"""Deterministic integer sub-seed derivation.

Every stage of the pipeline owns one user-facing integer seed; internal rng
streams (per episode, per ensemble member, per epoch shuffle, ...) hash that
seed together with a stream tag so streams never collide and results never
depend on execution order.
"""

from __future__ import annotations

import numpy as np


def derive_seed(*parts: int) -> int:
    """Collapse a (seed, tag, ...) tuple into one well-mixed integer seed."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, np.uint64)[0])
