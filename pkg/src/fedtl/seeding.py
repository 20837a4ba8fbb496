"""Deterministic random-stream derivation.

Every random draw in the package comes from a stream derived from a single
master seed through ``numpy.random.SeedSequence`` spawn keys.  A stream is
addressed by a path of small non-negative integers; string path components
are mapped to integers through a fixed registry.  The same (master seed,
path) pair therefore yields the same stream regardless of execution order
or thread count.

Path conventions used by the package:

    (DOMAIN_DATA, site_id, ...)              synthetic data generation
    (DOMAIN_PROTOCOL, site, round, stage)    mechanism draws inside a protocol
    (DOMAIN_CALIBRATION, rep, ...)           pilot runs for threshold calibration
    (DOMAIN_SWEEP, grid_index, rep)          per-cell seeds of an experiment sweep
"""

from __future__ import annotations

import numpy as np

DOMAIN_DATA = 0
DOMAIN_PROTOCOL = 1
DOMAIN_CALIBRATION = 2
DOMAIN_SWEEP = 3

# Mechanism stage names used in transcripts, mapped to stable stream codes.
STAGE_CODES = {
    "range": 0,
    "laplace": 1,
    "private_variance": 2,
    "gaussian": 3,
    "peeling": 4,
}


def stage_code(stage: str) -> int:
    """Stream code for a stage tag; parameter suffixes like ``[s=4]`` are ignored."""
    base = stage.split("[", 1)[0]
    try:
        return STAGE_CODES[base]
    except KeyError:
        raise KeyError(f"unknown mechanism stage {stage!r}") from None


def spawn(master_seed: int, *path: int) -> np.random.Generator:
    """Generator for the stream addressed by ``path`` under ``master_seed``."""
    ss = np.random.SeedSequence(int(master_seed), spawn_key=tuple(int(p) for p in path))
    return np.random.default_rng(ss)


def stream_id(*path: int) -> str:
    """Human-readable stream address recorded in transcripts."""
    return "/".join(str(int(p)) for p in path)
