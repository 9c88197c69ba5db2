"""Named deterministic random streams.

Every source of randomness derives from the run seed plus a stream name
(and optional integer indices such as the training step), so any point of
the pipeline can be reproduced without replaying everything before it —
this is what makes checkpoint resume bit-exact.
"""

import numpy as np

_STREAMS = {
    "grammar": 1,   # permutation + class embeddings of a synthetic dataset
    "data": 2,      # per-video label/feature generation
    "init": 3,      # parameter initialization
    "batch": 4,     # per-step batch sampling
    "augment": 5,   # per-step MixClip / MixClip+ draws
    "check": 6,     # verification tooling
}


def stream_rng(seed: int, name: str, *indices: int) -> np.random.Generator:
    """Generator for stream `name`; extra indices isolate sub-streams."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), _STREAMS[name], *map(int, indices)]))
