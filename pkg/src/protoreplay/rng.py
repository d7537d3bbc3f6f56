"""Labelled random sub-streams derived from a single root seed.

Every stochastic stage asks for its own stream by name, e.g.
``stream(root, "replay", task, class_id)``, so stages stay reproducible
independently of how many draws the others consumed.
"""
import hashlib

import numpy as np
import torch


def derive_seed(root, *labels):
    key = ":".join([str(int(root))] + [str(lab) for lab in labels])
    digest = hashlib.sha256(key.encode()).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def torch_stream(root, *labels):
    g = torch.Generator()
    g.manual_seed(derive_seed(root, *labels))
    return g


def numpy_stream(root, *labels):
    return np.random.default_rng(derive_seed(root, *labels))
