"""Deterministic random substreams.

Every random draw in a run comes from a generator keyed by
``(master_seed, run, stream, t)``. Stream 0 is the fusion center; stream
``k`` (1-based) belongs to filter ``k``. Results therefore do not depend on
how filters or replications are scheduled across workers.
"""

import numpy as np

FUSION = 0


def substream(seed, run, stream, t):
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(run), int(stream), int(t)))
    return np.random.Generator(np.random.PCG64(ss))


def run_rng(seed, run, purpose):
    """Generator for per-run setup draws (data simulation, random banks).

    Keys live in ``spawn_key=(run, 2**31 + purpose)``, disjoint from step streams.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(run), 2**31 + int(purpose)))
    return np.random.Generator(np.random.PCG64(ss))
