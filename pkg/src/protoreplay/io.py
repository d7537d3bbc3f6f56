"""On-disk formats: flat binary arrays, replay manifests, checkpoints and image grids.

Array file layout (little endian)::

    magic   4 bytes   b"PRAR"
    version u8        1
    dtype   8 bytes   numpy dtype string, space padded (e.g. "<f4")
    ndim    u32
    shape   ndim x u64
    data    C-order raw values
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .conditioning import PrototypeStore
from .errors import ContractViolation
from .sampler import ReplayMemory

MAGIC = b"PRAR"
ARRAY_VERSION = 1
CHECKPOINT_FORMAT = "protoreplay-checkpoint/1"


def write_array(path, array):
    arr = np.ascontiguousarray(np.asarray(array))
    arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    tag = arr.dtype.str.encode().ljust(8)
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<B", ARRAY_VERSION) + tag)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.tobytes(order="C"))


def read_array(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(13)
        if head[:4] != MAGIC:
            raise ContractViolation(f"{path}: not an array file")
        if head[4] != ARRAY_VERSION:
            raise ContractViolation(f"{path}: unsupported array version {head[4]}")
        dtype = np.dtype(head[5:13].decode().strip())
        (ndim,) = struct.unpack("<I", fh.read(4))
        shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
        data = fh.read()
    return np.frombuffer(data, dtype=dtype).reshape(shape).copy()


def save_replay(directory, memory: ReplayMemory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_array(directory / "samples.bin", memory.x.detach().cpu().numpy())
    write_array(directory / "labels.bin", memory.y.cpu().numpy().astype(np.int64))
    seed = memory.provenance.get("seed")
    manifest = {
        "provenance": memory.provenance,
        "files": {"samples": "samples.bin", "labels": "labels.bin"},
        "classes": [{"class_id": c, "count": n, "seed": seed} for c, n in memory.counts().items()],
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_replay(directory) -> ReplayMemory:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    x = torch.from_numpy(read_array(directory / manifest["files"]["samples"]))
    y = torch.from_numpy(read_array(directory / manifest["files"]["labels"]))
    return ReplayMemory(x, y, manifest["provenance"])


def save_checkpoint(path, denoiser, schedule, prototypes, classifier=None, extra=None):
    payload = {
        "format": CHECKPOINT_FORMAT,
        "denoiser": {"arch": denoiser.arch, "state": denoiser.state_dict()},
        "schedule": schedule.config(),
        "prototypes": prototypes.state_dict(),
        "classifier": None if classifier is None else
        {"arch": classifier.arch, "state": classifier.state_dict()},
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path) -> dict:
    """Rebuild the denoiser, schedule, prototype store and classifier from a checkpoint."""
    from .classifier import build_classifier
    from .conditioning import ZeroPrototypes
    from .denoiser import build_denoiser
    from .schedule import build_schedule

    payload = torch.load(path, weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ContractViolation(f"{path}: unknown checkpoint format {payload.get('format')!r}")
    denoiser = build_denoiser(payload["denoiser"]["arch"])
    denoiser.load_state_dict(payload["denoiser"]["state"])
    s = payload["schedule"]
    schedule = build_schedule(s["K"], s["beta_start"], s["beta_end"])
    p = payload["prototypes"]
    store = ZeroPrototypes(p["sample_shape"]) if p.get("zero") else PrototypeStore.from_state_dict(p)
    classifier = None
    if payload["classifier"] is not None:
        classifier = build_classifier(payload["classifier"]["arch"])
        classifier.load_state_dict(payload["classifier"]["state"])
    return {"denoiser": denoiser, "schedule": schedule, "prototypes": store,
            "classifier": classifier, "extra": payload["extra"]}


def save_sample_grid(path, x, y=None, ncols=10):
    """Write images (N, C, H, W) as a tiled grid, or 2-D vectors as a labelled scatter plot."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    x = np.asarray(x.detach().cpu() if torch.is_tensor(x) else x)
    if x.ndim == 2:
        fig, ax = plt.subplots(figsize=(5, 5))
        labels = np.zeros(len(x)) if y is None else np.asarray(y)
        ax.scatter(x[:, 0], x[:, 1], c=labels, s=8, cmap="tab10")
        ax.set_aspect("equal")
        fig.savefig(path, dpi=100, metadata={"Software": None})
        plt.close(fig)
        return
    n, c, h, w = x.shape
    rows = (n + ncols - 1) // ncols
    grid = np.ones((rows * (h + 1) + 1, ncols * (w + 1) + 1, c), dtype=np.float64)
    img = np.clip((x + 1) / 2, 0, 1).transpose(0, 2, 3, 1)
    for i in range(n):
        r, col = divmod(i, ncols)
        grid[1 + r * (h + 1): 1 + r * (h + 1) + h, 1 + col * (w + 1): 1 + col * (w + 1) + w] = img[i]
    if c == 1:
        grid = grid[..., 0]
    plt.imsave(path, grid, cmap="gray" if c == 1 else None, metadata={"Software": None})
