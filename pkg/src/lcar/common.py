import zlib
import logging
from enum import Enum

import numpy as np

logger = logging.getLogger(__name__)


MODEL = Enum("MODEL", "LCAR IAR BYM")
DIRECTION = Enum("DIRECTION", "REMOVE ADD")

# Diagonal dominance constant used when none is configured.
DEFAULT_EPSILON = 0.001

# Upper end of the Uniform(0, TAU2_MAX] variance hyperpriors.
TAU2_MAX = 1000.0

# Prior variance of every regression coefficient.
BETA_PRIOR_VARIANCE = 1000.0


def parse_model(name) -> MODEL:
    if isinstance(name, MODEL):
        return name
    try:
        return MODEL[str(name).upper()]
    except KeyError:
        raise ValueError(f"Unknown model '{name}', expected one of lcar, iar, bym")


def seed_sequence(seed: int, name: str, *indices: int) -> np.random.SeedSequence:
    """
    Named, indexed child of the user seed.

    The same (seed, name, indices) always gives the same stream, independent of
    the order in which streams are requested or of the worker that consumes them.
    """
    key = (zlib.crc32(name.encode("utf-8")),) + tuple(int(i) for i in indices)
    return np.random.SeedSequence(entropy=int(seed), spawn_key=key)


def substream(seed: int, name: str, *indices: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed_sequence(seed, name, *indices)))


def stream_seed(seed: int, name: str, *indices: int) -> int:
    """A plain integer seed for a named substream, for recording in manifests."""
    return int(seed_sequence(seed, name, *indices).generate_state(1, np.uint32)[0])
