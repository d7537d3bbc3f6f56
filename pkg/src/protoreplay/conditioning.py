"""Label embeddings, learnable class prototypes and nearest-class search.

Class ids are 1-based; id 0 is reserved for the dropped / unknown label,
whose embedding is the zero vector.
"""
from __future__ import annotations

import hashlib
import math
import shlex
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ContractViolation, InitializationError, NoNeighborError, NumericError

NULL_CLASS = 0
INIT_STRATEGIES = ("most_confident", "least_confident", "class_mean", "random")


@dataclass(frozen=True)
class LabelEmbedding:
    class_id: int
    vector: np.ndarray

    def is_zero(self) -> bool:
        return not np.any(self.vector)


class EmbeddingTable:
    """Immutable class-id -> embedding map, loaded from a file or generated by hashing."""

    def __init__(self, vectors: dict[int, np.ndarray], names: dict[int, str] | None = None,
                 source: str = "deterministic-hash"):
        dims = {int(np.asarray(v).shape[-1]) for v in vectors.values()}
        if len(dims) > 1:
            raise ContractViolation(f"embeddings disagree on dimension: {sorted(dims)}")
        if NULL_CLASS in vectors:
            raise ContractViolation("class id 0 is reserved for the dropped label")
        self._vectors = {}
        for cid, vec in vectors.items():
            arr = np.array(vec, dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise NumericError(f"embedding for class {cid} has non-finite entries")
            arr.setflags(write=False)
            self._vectors[int(cid)] = arr
        self.names = dict(names or {})
        self.source = source
        self.dimension = dims.pop() if dims else 0

    @classmethod
    def from_hash(cls, class_ids, dimension=16, salt="label"):
        """Deterministic pseudo-random embeddings: the same id always maps to the same vector."""
        vectors = {}
        for cid in class_ids:
            digest = hashlib.sha256(f"{salt}:{int(cid)}".encode()).digest()
            rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
            vectors[int(cid)] = rng.standard_normal(dimension)
        return cls(vectors, source="deterministic-hash")

    @classmethod
    def load(cls, path):
        """Read the text format: a header line holding E, then ``id name v1 .. vE`` per class.

        Names containing spaces may be quoted.
        """
        lines = [ln for ln in Path(path).read_text().splitlines()
                 if ln.strip() and not ln.lstrip().startswith("#")]
        if not lines:
            raise ContractViolation(f"{path}: empty embedding table")
        dim = int(lines[0].split()[0])
        vectors, names = {}, {}
        for lineno, line in enumerate(lines[1:], start=2):
            parts = shlex.split(line)
            if len(parts) != dim + 2:
                raise ContractViolation(
                    f"{path}:{lineno}: expected id, name and {dim} values, got {len(parts)} fields")
            cid = int(parts[0])
            names[cid] = parts[1]
            vectors[cid] = np.array([float(v) for v in parts[2:]])
        table = cls(vectors, names, source="file")
        table.dimension = dim
        return table

    def save(self, path):
        out = [str(self.dimension)]
        for cid in sorted(self._vectors):
            name = shlex.quote(self.names.get(cid, f"class_{cid}"))
            out.append(" ".join([str(cid), name] + [repr(float(v)) for v in self._vectors[cid]]))
        Path(path).write_text("\n".join(out) + "\n")

    def __contains__(self, class_id):
        return int(class_id) in self._vectors

    @property
    def class_ids(self):
        return sorted(self._vectors)

    def vector(self, class_id) -> np.ndarray:
        return embed_label(self, class_id).vector

    def batch(self, labels, dtype=torch.float32) -> torch.Tensor:
        """Stack embeddings for a batch of class ids into a (B, E) tensor."""
        ids = [int(c) for c in torch.as_tensor(labels).reshape(-1).tolist()]
        return torch.as_tensor(np.stack([self.vector(c) for c in ids]), dtype=dtype)


def embed_label(table: EmbeddingTable, class_id: int) -> LabelEmbedding:
    cid = int(class_id)
    if cid == NULL_CLASS:
        return LabelEmbedding(NULL_CLASS, np.zeros(table.dimension))
    try:
        return LabelEmbedding(cid, table._vectors[cid])
    except KeyError:
        raise LookupError(f"no label embedding for class {cid}") from None


def drop_label(embedding: LabelEmbedding, delta: float, u: float) -> LabelEmbedding:
    """Replace the embedding by the zero (unknown-label) vector when ``u <= delta``."""
    if u <= delta:
        return LabelEmbedding(NULL_CLASS, np.zeros_like(embedding.vector))
    return embedding


def drop_mask(delta: float, u: torch.Tensor) -> torch.Tensor:
    """Vectorised ``drop_label``: 1.0 where the label is kept, 0.0 where dropped."""
    return (u > delta).to(torch.get_default_dtype())


def nearest_previous_class(table: EmbeddingTable, y: int, previous) -> int:
    """Old class whose embedding has the highest cosine similarity to class ``y``.

    Ties go to the smallest class id.
    """
    candidates = sorted(int(c) for c in previous)
    if not candidates:
        raise NoNeighborError(f"class {y} has no previous class to pair with")
    query = np.asarray(table.vector(y), dtype=np.float64)
    qn = np.linalg.norm(query)
    if qn == 0:
        raise NumericError(f"class {y} has a zero-norm embedding")
    best, best_sim = None, -math.inf
    for c in candidates:
        v = np.asarray(table.vector(c), dtype=np.float64)
        vn = np.linalg.norm(v)
        if vn == 0:
            raise NumericError(f"class {c} has a zero-norm embedding")
        sim = float(query @ v) / (qn * vn)
        if sim > best_sim:
            best, best_sim = c, sim
    return best


@dataclass
class ClassPrototype:
    class_id: int
    value: torch.nn.Parameter
    trainable: bool = True
    origin_task: int = 1

    def freeze(self):
        self.trainable = False
        self.value.requires_grad_(False)

    def checksum(self) -> str:
        data = self.value.detach().cpu().contiguous().numpy().tobytes()
        return hashlib.sha256(data).hexdigest()


@dataclass
class PrototypeStore:
    """One prototype per class seen so far, plus the optimizer settings for trainable ones."""
    lr: float = 0.01
    weight_decay: float = 0.01
    prototypes: dict[int, ClassPrototype] = field(default_factory=dict)

    def __contains__(self, class_id):
        return int(class_id) in self.prototypes

    def __len__(self):
        return len(self.prototypes)

    def add(self, proto: ClassPrototype):
        if proto.class_id in self.prototypes:
            raise ContractViolation(f"class {proto.class_id} already has a prototype")
        self.prototypes[proto.class_id] = proto

    def get(self, class_id) -> ClassPrototype:
        try:
            return self.prototypes[int(class_id)]
        except KeyError:
            raise LookupError(f"no prototype for class {int(class_id)}") from None

    def batch(self, labels, detach: bool = False) -> torch.Tensor:
        """Stack prototypes for a batch of class ids; gradients reach trainable ones."""
        ids = [int(c) for c in torch.as_tensor(labels).reshape(-1).tolist()]
        rows = [self.get(c).value for c in ids]
        out = torch.stack(rows)
        return out.detach() if detach else out

    def trainable_parameters(self):
        return [p.value for p in self.prototypes.values() if p.trainable]

    def freeze_task(self, task: int):
        for p in self.prototypes.values():
            if p.origin_task == task:
                p.freeze()

    def checksums(self, max_task=None) -> dict[int, str]:
        return {cid: p.checksum() for cid, p in sorted(self.prototypes.items())
                if max_task is None or p.origin_task <= max_task}

    def state_dict(self) -> dict:
        return {
            "lr": self.lr,
            "weight_decay": self.weight_decay,
            "prototypes": {cid: {"value": p.value.detach().clone(), "trainable": p.trainable,
                                 "origin_task": p.origin_task}
                           for cid, p in self.prototypes.items()},
        }

    @classmethod
    def from_state_dict(cls, state) -> PrototypeStore:
        store = cls(lr=state["lr"], weight_decay=state["weight_decay"])
        for cid, rec in state["prototypes"].items():
            value = torch.nn.Parameter(rec["value"].clone(), requires_grad=rec["trainable"])
            store.add(ClassPrototype(int(cid), value, rec["trainable"], rec["origin_task"]))
        return store


class ZeroPrototypes:
    """Stand-in store for the no-prototype ablation: every class maps to a zero channel."""

    def __init__(self, sample_shape, dtype=torch.float32):
        self.sample_shape = tuple(sample_shape)
        self.dtype = dtype

    def __contains__(self, class_id):
        return True

    def __len__(self):
        return 0

    def batch(self, labels, detach: bool = False) -> torch.Tensor:
        n = torch.as_tensor(labels).reshape(-1).shape[0]
        return torch.zeros((n, *self.sample_shape), dtype=self.dtype)

    def trainable_parameters(self):
        return []

    def freeze_task(self, task: int):
        pass

    def checksums(self, max_task=None):
        return {}

    def state_dict(self):
        return {"zero": True, "sample_shape": list(self.sample_shape)}


def per_sample_ce(classifier, x: torch.Tensor, class_id: int) -> torch.Tensor:
    """Cross-entropy of the classifier's prediction against ``class_id`` for each row of ``x``."""
    with torch.no_grad():
        logits = classifier(x)
        target = torch.full((x.shape[0],), int(class_id) - 1, dtype=torch.long)
        return F.cross_entropy(logits, target, reduction="none")


def init_prototype(strategy: str, classifier, samples, class_id: int, rng: torch.Generator,
                   origin_task: int = 1, sample_shape=None) -> ClassPrototype:
    """Initial prototype for ``class_id`` chosen from its samples.

    ``most_confident`` picks the sample with the lowest classifier CE,
    ``least_confident`` the highest (first index wins ties), ``class_mean``
    averages the samples, and ``random`` draws a standard normal of the
    sample shape.
    """
    if strategy not in INIT_STRATEGIES:
        raise InitializationError(f"unknown prototype init strategy {strategy!r}")
    if strategy == "random":
        shape = tuple(sample_shape) if sample_shape is not None else tuple(samples.shape[1:])
        dtype = samples.dtype if samples is not None else torch.get_default_dtype()
        value = torch.randn(shape, generator=rng, dtype=torch.float64).to(dtype)
    else:
        if samples is None or len(samples) == 0:
            raise InitializationError(f"no samples to initialize class {class_id} from")
        if strategy == "class_mean":
            value = samples.mean(dim=0)
        else:
            ce = per_sample_ce(classifier, samples, class_id).double().cpu().numpy()
            idx = int(np.argmin(ce) if strategy == "most_confident" else np.argmax(ce))
            value = samples[idx]
    param = torch.nn.Parameter(value.detach().clone(), requires_grad=True)
    return ClassPrototype(int(class_id), param, trainable=True, origin_task=origin_task)
