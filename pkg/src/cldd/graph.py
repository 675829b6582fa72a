"""Sparse bipartite patient-disease graph and its normalized propagation operator.

Node ordering everywhere: patients ``0..P-1`` then diseases ``P..P+D-1``.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp


class StructureError(ValueError):
    """Raised for shape or symmetry violations in sparse operands."""


@dataclass(frozen=True)
class InteractionMatrix:
    """Binary patient x disease matrix with one timestamp per stored pair."""

    num_patients: int
    num_diseases: int
    patients: np.ndarray
    diseases: np.ndarray
    timestamps: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.patients, dtype=np.int64)
        d = np.asarray(self.diseases, dtype=np.int64)
        t = np.asarray(self.timestamps, dtype=np.int64)
        if not (p.shape == d.shape == t.shape) or p.ndim != 1:
            raise StructureError("patients, diseases and timestamps must be equal-length vectors")
        if p.size:
            if p.min() < 0 or p.max() >= self.num_patients:
                raise StructureError("patient index out of range")
            if d.min() < 0 or d.max() >= self.num_diseases:
                raise StructureError("disease index out of range")
            keys = p * self.num_diseases + d
            if np.unique(keys).size != keys.size:
                raise StructureError("duplicate (patient, disease) pair")
        object.__setattr__(self, "patients", p)
        object.__setattr__(self, "diseases", d)
        object.__setattr__(self, "timestamps", t)

    @classmethod
    def from_pairs(cls, num_patients, num_diseases, pairs, timestamps=None):
        pairs = list(pairs)
        p = np.array([a for a, _ in pairs], dtype=np.int64)
        d = np.array([b for _, b in pairs], dtype=np.int64)
        t = np.zeros(len(pairs), dtype=np.int64) if timestamps is None else np.asarray(timestamps)
        return cls(num_patients, num_diseases, p, d, t)

    @property
    def nnz(self) -> int:
        return int(self.patients.size)

    def to_dense(self) -> np.ndarray:
        y = np.zeros((self.num_patients, self.num_diseases))
        y[self.patients, self.diseases] = 1.0
        return y

    def to_csr(self) -> "SparseMatrix":
        return SparseMatrix.from_coo(
            self.num_patients, self.num_diseases, self.patients, self.diseases, np.ones(self.nnz)
        )

    def patient_degrees(self) -> np.ndarray:
        return np.bincount(self.patients, minlength=self.num_patients)

    def disease_degrees(self) -> np.ndarray:
        return np.bincount(self.diseases, minlength=self.num_diseases)

    def positives(self) -> list[set[int]]:
        """Disease index set per patient."""
        out: list[set[int]] = [set() for _ in range(self.num_patients)]
        for p, d in zip(self.patients.tolist(), self.diseases.tolist()):
            out[p].add(d)
        return out

    def has_edge(self, p: int, d: int) -> bool:
        return bool(np.any((self.patients == p) & (self.diseases == d)))


@dataclass(frozen=True)
class SparseMatrix:
    """CSR matrix: ``indptr`` row offsets, sorted ``indices`` per row, ``data`` values."""

    rows: int
    cols: int
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray
    _csr: sp.csr_matrix | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        indptr = np.asarray(self.indptr, dtype=np.int64)
        indices = np.asarray(self.indices, dtype=np.int64)
        data = np.asarray(self.data, dtype=np.float64)
        if indptr.shape != (self.rows + 1,) or indptr[0] != 0 or indptr[-1] != indices.size:
            raise StructureError("row offsets must start at 0 and end at nnz")
        if np.any(np.diff(indptr) < 0):
            raise StructureError("row offsets must be monotone")
        if data.shape != indices.shape:
            raise StructureError("indices and data length differ")
        if indices.size:
            if indices.min() < 0 or indices.max() >= self.cols:
                raise StructureError("column index out of range")
            row_of = np.repeat(np.arange(self.rows), np.diff(indptr))
            same_row = row_of[1:] == row_of[:-1]
            if np.any(np.diff(indices)[same_row] <= 0):
                raise StructureError("column indices must be strictly increasing within each row")
        object.__setattr__(self, "indptr", indptr)
        object.__setattr__(self, "indices", indices)
        object.__setattr__(self, "data", data)
        csr = sp.csr_matrix((data, indices, indptr), shape=(self.rows, self.cols))
        csr.has_sorted_indices = True
        object.__setattr__(self, "_csr", csr)

    @classmethod
    def from_coo(cls, rows, cols, r, c, v) -> "SparseMatrix":
        coo = sp.coo_matrix((np.asarray(v, float), (np.asarray(r), np.asarray(c))), shape=(rows, cols))
        csr = coo.tocsr()
        csr.sum_duplicates()
        csr.sort_indices()
        return cls(rows, cols, csr.indptr, csr.indices, csr.data)

    @classmethod
    def from_dense(cls, m) -> "SparseMatrix":
        m = np.asarray(m, dtype=np.float64)
        r, c = np.nonzero(m)
        return cls.from_coo(m.shape[0], m.shape[1], r, c, m[r, c])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    def to_dense(self) -> np.ndarray:
        return self._csr.toarray()

    def row_sums(self) -> np.ndarray:
        return np.asarray(self._csr.sum(axis=1)).ravel()

    def entries(self):
        """Yield ``(i, j, value)`` for every stored entry in row-major order."""
        for i in range(self.rows):
            for pos in range(self.indptr[i], self.indptr[i + 1]):
                yield i, int(self.indices[pos]), float(self.data[pos])

    def is_symmetric(self) -> bool:
        if self.rows != self.cols:
            return False
        csr = self._csr
        diff = csr - csr.T
        return diff.count_nonzero() == 0

    def block(self, r0, r1, c0, c1) -> np.ndarray:
        return self._csr[r0:r1, c0:c1].toarray()


def build_adjacency(y: InteractionMatrix) -> SparseMatrix:
    """Symmetric ``[[0, Y], [Y^T, 0]]`` adjacency over patients then diseases."""
    n = y.num_patients + y.num_diseases
    r = np.concatenate([y.patients, y.diseases + y.num_patients])
    c = np.concatenate([y.diseases + y.num_patients, y.patients])
    return SparseMatrix.from_coo(n, n, r, c, np.ones(r.size))


def normalize(a: SparseMatrix) -> SparseMatrix:
    """Return ``D^-1/2 (A + I) D^-1/2`` where ``D`` holds row sums of ``A + I``."""
    if a.rows != a.cols:
        raise StructureError(f"adjacency must be square, got {a.shape}")
    if not a.is_symmetric():
        raise StructureError("adjacency must be symmetric")
    n = a.rows
    a_tilde = (a._csr + sp.identity(n, format="csr")).tocsr()
    a_tilde.sum_duplicates()
    a_tilde.sort_indices()
    deg = np.asarray(a_tilde.sum(axis=1)).ravel()
    rows = np.repeat(np.arange(n), np.diff(a_tilde.indptr))
    # one division per entry so stored values equal the scalar formula
    vals = a_tilde.data / np.sqrt(deg[rows] * deg[a_tilde.indices])
    return SparseMatrix(n, n, a_tilde.indptr, a_tilde.indices, vals)


def bipartite_decay(y: InteractionMatrix) -> SparseMatrix:
    """Symmetric matrix holding ``1/sqrt(|N_p||N_d|)`` on every edge, no self-loops."""
    a = build_adjacency(y)
    deg = np.diff(a.indptr).astype(np.float64)
    rows = np.repeat(np.arange(a.rows), np.diff(a.indptr))
    vals = 1.0 / np.sqrt(deg[rows] * deg[a.indices])
    return SparseMatrix(a.rows, a.cols, a.indptr, a.indices, vals)


def edge_decay(p: int, d: int, y: InteractionMatrix) -> float:
    if not y.has_edge(p, d):
        raise ValueError(f"({p}, {d}) is not an edge")
    n_p = int(np.count_nonzero(y.patients == p))
    n_d = int(np.count_nonzero(y.diseases == d))
    return 1.0 / np.sqrt(n_p * n_d)


def spmm(m: SparseMatrix, x: np.ndarray, threads: int = 1) -> np.ndarray:
    """Sparse-dense product.

    Each output row is accumulated sequentially in ascending column order,
    so the result does not depend on ``threads``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
        squeeze = True
    else:
        squeeze = False
    if m.cols != x.shape[0]:
        raise StructureError(f"cannot multiply {m.shape} by {x.shape}")
    x = np.ascontiguousarray(x)
    if threads <= 1 or m.rows < 2 * threads:
        out = m._csr @ x
    else:
        bounds = np.linspace(0, m.rows, threads + 1).astype(int)
        out = np.empty((m.rows, x.shape[1]))

        def work(i):
            lo, hi = bounds[i], bounds[i + 1]
            out[lo:hi] = m._csr[lo:hi] @ x

        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(work, range(threads)))
    out = np.asarray(out)
    return out[:, 0] if squeeze else out
