"""Seed discipline: one root seed, per-site derived streams.

Every stochastic site in the pipeline derives its stream from
(root_seed, stable site labels) so that runs are reproducible end to end
and independent sites never share a stream. Labels are free-form strings
or ints; the mapping is a truncated SHA-256, so distinct label tuples give
distinct 64-bit seeds for all practical purposes.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch


def derive_seed(root_seed: int, *labels) -> int:
    """Map (root_seed, labels...) to a stable 64-bit seed."""
    h = hashlib.sha256()
    h.update(str(int(root_seed)).encode("utf-8"))
    for lab in labels:
        h.update(b"\x1f")
        h.update(str(lab).encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "little")


def np_rng(root_seed: int, *labels) -> np.random.Generator:
    """NumPy generator for the site identified by labels."""
    return np.random.default_rng(derive_seed(root_seed, *labels))


def torch_gen(root_seed: int, *labels) -> torch.Generator:
    """Torch generator for the site identified by labels."""
    g = torch.Generator()
    g.manual_seed(derive_seed(root_seed, *labels))
    return g
