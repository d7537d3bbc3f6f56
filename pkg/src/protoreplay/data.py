"""Task streams for continual learning and the access log that guards data hygiene."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError, ContractViolation
from .rng import numpy_stream

SCENARIOS = ("CI", "CIR")
SPLITS = ("equal", "half_then_equal")


@dataclass
class AccessLog:
    """Records every read of raw task data by training code as (current_task, data_task, purpose)."""
    current_task: int = 0
    entries: list = field(default_factory=list)

    def record(self, data_task: int, purpose: str):
        self.entries.append((self.current_task, data_task, purpose))

    def stale_reads(self):
        return [e for e in self.entries if e[1] < e[0]]


@dataclass
class TaskData:
    task: int
    x: torch.Tensor
    y: torch.Tensor
    log: AccessLog | None = None

    def __len__(self):
        return int(self.y.shape[0])

    def read(self, purpose: str = "train"):
        if self.log is not None:
            self.log.record(self.task, purpose)
        return self.x, self.y


@dataclass
class TaskStream:
    train: list
    test: list
    label_sets: list
    scenario: str
    sample_shape: tuple
    n_classes: int
    class_names: dict
    log: AccessLog = field(default_factory=AccessLog)
    # known (low, high) bound on sample values, None when unbounded
    value_range: tuple | None = None

    @property
    def T(self) -> int:
        return len(self.train)

    def classes_before(self, t: int) -> list[int]:
        seen = set()
        for ys in self.label_sets[: t - 1]:
            seen.update(ys)
        return sorted(seen)

    def validate(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"scenario must be one of {SCENARIOS}")
        if self.scenario == "CI":
            seen = set()
            for ys in self.label_sets:
                if seen & set(ys):
                    raise ConfigError("CI scenario requires pairwise disjoint label sets")
                seen.update(ys)
        for t, (d, ys) in enumerate(zip(self.train, self.label_sets), start=1):
            if len(d) == 0:
                raise ConfigError(f"task {t} has no training data")
            if not set(int(c) for c in d.y.unique().tolist()) <= set(ys):
                raise ContractViolation(f"task {t} holds labels outside its label set")


def task_label_sets(class_ids, n_tasks: int, split: str = "equal", classes_per_task=None):
    """Partition ordered class ids into tasks: equal chunks, or half first then equal chunks."""
    ids = list(class_ids)
    if split == "equal":
        per = classes_per_task or len(ids) // n_tasks
        if per * n_tasks > len(ids) or per < 1:
            raise ConfigError(f"cannot form {n_tasks} tasks of {per} classes from {len(ids)} classes")
        return [ids[i * per:(i + 1) * per] for i in range(n_tasks)]
    if split == "half_then_equal":
        if n_tasks < 2:
            raise ConfigError("half_then_equal needs at least two tasks")
        first = len(ids) // 2
        rest = ids[first:]
        per = len(rest) // (n_tasks - 1)
        if per < 1:
            raise ConfigError("too few classes for the requested number of tasks")
        return [ids[:first]] + [rest[i * per:(i + 1) * per] for i in range(n_tasks - 1)]
    raise ConfigError(f"split must be one of {SPLITS}, got {split!r}")


def _assemble(x_train, y_train, x_test, y_test, label_sets, scenario, names, sample_shape, rng):
    """Slice per-class pools into task datasets; repeated classes get disjoint chunks."""
    appearances = {}
    for ys in label_sets:
        for c in ys:
            appearances[c] = appearances.get(c, 0) + 1
    chunks = {}
    for c, n in appearances.items():
        idx = np.flatnonzero(y_train == c)
        idx = idx[rng.permutation(len(idx))]
        chunks[c] = list(np.array_split(idx, n))
    log = AccessLog()
    train, test = [], []
    for t, ys in enumerate(label_sets, start=1):
        idx = np.concatenate([chunks[c].pop(0) for c in ys])
        train.append(TaskData(t, torch.as_tensor(x_train[idx], dtype=torch.float32),
                              torch.as_tensor(y_train[idx], dtype=torch.long), log))
        tmask = np.isin(y_test, ys)
        test.append((torch.as_tensor(x_test[tmask], dtype=torch.float32),
                     torch.as_tensor(y_test[tmask], dtype=torch.long)))
    stream = TaskStream(train, test, [list(ys) for ys in label_sets], scenario, tuple(sample_shape),
                        int(max(names)), names, log)
    stream.validate()
    return stream


def gaussian_mixture_stream(n_tasks=3, classes_per_task=2, train_per_class=200, test_per_class=100,
                            radius=1.0, std=0.125, seed=0, split="equal", task_classes=None,
                            scenario="CI") -> TaskStream:
    """2-D isotropic Gaussian blobs with centres evenly spaced on a circle."""
    if task_classes is None:
        n_classes = n_tasks * classes_per_task
    else:
        n_classes = max(c for ys in task_classes for c in ys)
    rng = numpy_stream(seed, "data", "gaussian_mixture")
    angles = 2 * np.pi * np.arange(n_classes) / n_classes
    centres = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)

    def draw(n):
        y = np.repeat(np.arange(1, n_classes + 1), n)
        x = centres[y - 1] + std * rng.standard_normal((len(y), 2))
        return x, y

    x_tr, y_tr = draw(train_per_class)
    x_te, y_te = draw(test_per_class)
    ids = list(range(1, n_classes + 1))
    label_sets = task_classes or task_label_sets(ids, n_tasks, split, classes_per_task)
    names = {c: f"blob {c}" for c in ids}
    return _assemble(x_tr, y_tr, x_te, y_te, label_sets, scenario, names, (2,), rng)


def digits_stream(n_tasks=5, classes_per_task=2, test_fraction=0.2, seed=0, split="equal",
                  task_classes=None, scenario="CI") -> TaskStream:
    """The 8x8 handwritten digits bundled with scikit-learn, as 1x8x8 images in [-1, 1]."""
    from sklearn.datasets import load_digits

    d = load_digits()
    x = (d.data.reshape(-1, 1, 8, 8) / 8.0 - 1.0).astype(np.float32)
    y = d.target.astype(np.int64) + 1
    rng = numpy_stream(seed, "data", "digits")
    test_mask = np.zeros(len(y), dtype=bool)
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        n_test = int(round(test_fraction * len(idx)))
        test_mask[rng.choice(idx, n_test, replace=False)] = True
    ids = list(range(1, 11))
    label_sets = task_classes or task_label_sets(ids, n_tasks, split, classes_per_task)
    names = {c: f"digit {c - 1}" for c in ids}
    stream = _assemble(x[~test_mask], y[~test_mask], x[test_mask], y[test_mask], label_sets,
                       scenario, names, (1, 8, 8), rng)
    stream.value_range = (-1.0, 1.0)
    return stream


DATASETS = {"gaussian_mixture": gaussian_mixture_stream, "digits": digits_stream}


def build_stream(data_cfg: dict, seed: int) -> TaskStream:
    cfg = dict(data_cfg)
    name = cfg.pop("name")
    if name not in DATASETS:
        raise ConfigError(f"unknown dataset {name!r}; choose from {sorted(DATASETS)}")
    kwargs = {k: v for k, v in cfg.items() if v is not None}
    return DATASETS[name](seed=seed, **kwargs)


def content_hash(payload) -> str:
    """git-style blob hash of bytes, text, or a JSON-serialisable object."""
    if isinstance(payload, (dict, list)):
        payload = json.dumps(payload, sort_keys=True)
    if isinstance(payload, str):
        payload = payload.encode()
    header = f"blob {len(payload)}\0".encode()
    return hashlib.sha1(header + payload).hexdigest()
