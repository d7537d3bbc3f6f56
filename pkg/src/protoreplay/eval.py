"""Continual-learning metrics, a Frechet feature distance and report rendering."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractViolation


class AccuracyMatrix:
    """Lower-triangular grid of accuracies.

    Row ``i`` is the training-task index, column ``t`` the evaluated task
    (both 1-based); ``acc(t, i)`` is the accuracy on task t after training
    through task i and is defined for t <= i.
    """

    def __init__(self, T: int):
        self.T = int(T)
        self.values = np.full((self.T, self.T), np.nan)

    def set(self, i: int, t: int, value: float):
        if not 1 <= t <= i <= self.T:
            raise ContractViolation(f"accuracy entry ({t}, {i}) outside the lower triangle")
        if not 0.0 <= value <= 1.0:
            raise ContractViolation(f"accuracy {value} outside [0, 1]")
        self.values[i - 1, t - 1] = value

    def acc(self, t: int, i: int) -> float:
        if not 1 <= t <= i <= self.T:
            raise ContractViolation(f"accuracy entry ({t}, {i}) is undefined")
        v = self.values[i - 1, t - 1]
        if np.isnan(v):
            raise ContractViolation(f"accuracy of task {t} after task {i} not recorded")
        return float(v)

    def row_complete(self, i: int) -> bool:
        return not np.isnan(self.values[i - 1, :i]).any()

    def completed_rows(self) -> int:
        n = 0
        while n < self.T and self.row_complete(n + 1):
            n += 1
        return n

    @classmethod
    def from_rows(cls, rows):
        """Build from a list where ``rows[i-1]`` holds acc(1..i, i)."""
        m = cls(len(rows))
        for i, row in enumerate(rows, start=1):
            for t, v in enumerate(row[:i], start=1):
                m.set(i, t, float(v))
        return m

    def save(self, path):
        lines = []
        for i in range(self.T):
            lines.append(",".join("" if np.isnan(v) else repr(float(v)) for v in self.values[i]))
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path):
        rows = [ln.split(",") for ln in Path(path).read_text().splitlines() if ln.strip()]
        m = cls(len(rows))
        for i, row in enumerate(rows):
            for t, cell in enumerate(row):
                if cell.strip():
                    m.values[i, t] = float(cell)
        return m


def average_accuracy(matrix: AccuracyMatrix, i: int) -> float:
    """A_i = (1/i) sum_{t <= i} acc(t, i)."""
    if not matrix.row_complete(i):
        raise ContractViolation(f"row {i} of the accuracy matrix is incomplete")
    return sum(matrix.acc(t, i) for t in range(1, i + 1)) / i


def average_forgetting(matrix: AccuracyMatrix, i: int) -> float:
    """F_i = (1/(i-1)) sum_{t < i} (max_{j < i} acc(t, j) - acc(t, i)); F_1 = 0."""
    for j in range(1, i + 1):
        if not matrix.row_complete(j):
            raise ContractViolation(f"row {j} of the accuracy matrix is incomplete")
    if i == 1:
        return 0.0
    total = 0.0
    for t in range(1, i):
        best = max(matrix.acc(t, j) for j in range(t, i))
        total += best - matrix.acc(t, i)
    return total / (i - 1)


@dataclass
class MetricsReport:
    A: list
    F: list
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_matrix(cls, matrix: AccuracyMatrix, **meta):
        n = matrix.completed_rows()
        return cls([average_accuracy(matrix, i) for i in range(1, n + 1)],
                   [average_forgetting(matrix, i) for i in range(1, n + 1)], dict(meta))


FRECHET_JITTER = 1e-6


def _gaussian_fit(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    return x.mean(axis=0), np.atleast_2d(np.cov(x, rowvar=False))


def _psd_sqrt(m):
    vals, vecs = np.linalg.eigh((m + m.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def _trace_sqrt_product(sa, sb):
    """Tr((sa sb)^{1/2}) via the symmetric form sa^{1/2} sb sa^{1/2}."""
    r = _psd_sqrt(sa)
    vals = np.linalg.eigvalsh(r @ sb @ r)
    return float(np.sqrt(np.clip(vals, 0, None)).sum())


def frechet_details(features_a, features_b) -> tuple[float, dict]:
    """Frechet distance between Gaussians fitted to two feature sets, with metadata.

    A diagonal jitter is added to a covariance that is numerically singular;
    the metadata records whether that happened.
    """
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    a = a[:, None] if a.ndim == 1 else a
    b = b[:, None] if b.ndim == 1 else b
    if a.shape[1] != b.shape[1]:
        raise ContractViolation(f"feature dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    dim = a.shape[1]
    if min(len(a), len(b)) < dim + 1:
        raise ContractViolation(f"need at least {dim + 1} vectors per set, got {len(a)} and {len(b)}")
    mu_a, sa = _gaussian_fit(a)
    mu_b, sb = _gaussian_fit(b)
    jitter = False
    for s in (sa, sb):
        if np.linalg.eigvalsh(s).min() <= 1e-12 * max(1.0, np.trace(s)):
            jitter = True
    if jitter:
        eye = FRECHET_JITTER * np.eye(dim)
        sa, sb = sa + eye, sb + eye
    # average both orders so swapping the arguments is bitwise symmetric
    tr_sqrt = 0.5 * (_trace_sqrt_product(sa, sb) + _trace_sqrt_product(sb, sa))
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(sa + sb) - 2.0 * tr_sqrt)
    return max(value, 0.0), {"jitter": FRECHET_JITTER if jitter else 0.0}


def frechet_feature_distance(features_a, features_b) -> float:
    return frechet_details(features_a, features_b)[0]


def _fmt(v, pct=True):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "-"
    return f"{100 * v:.2f}" if pct else f"{v:.4f}"


def render_table(rows, title="Final average accuracy / forgetting (%)") -> str:
    """Aligned text table; ``rows`` are dicts with ``label``, ``A_T``, ``F_T`` and optional ranges."""
    header = ["method", "A_T", "F_T", "runs"]
    body = []
    for r in rows:
        a = _fmt(r["A_T"])
        f = _fmt(r["F_T"])
        if r.get("A_range") is not None:
            a += f" ±{100 * r['A_range'] / 2:.2f}"
            f += f" ±{100 * r['F_range'] / 2:.2f}"
        body.append([r["label"], a, f, str(r.get("n", 1))])
    widths = [max(len(x) for x in col) for col in zip(header, *body)]
    line = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    out = [title, line(header), line(["-" * w for w in widths])]
    out += [line(b) for b in body]
    return "\n".join(out) + "\n"
