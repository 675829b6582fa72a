"""Disease-pair association analysis and embedding export."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .graph import InteractionMatrix

log = logging.getLogger(__name__)

LOW_SUPPORT = 5


@dataclass(frozen=True)
class DiscrepancyRecord:
    disease_a: int
    disease_b: int
    code_a: str
    code_b: str
    comorbidity: float
    pearson: float
    discrepancy: float
    support_a: int
    support_b: int

    @property
    def low_support(self) -> bool:
        return min(self.support_a, self.support_b) < LOW_SUPPORT


def discrepancy(comorbidity: float, pearson: float) -> float:
    return abs(comorbidity - pearson)


def _cooccurrence(y: InteractionMatrix) -> np.ndarray:
    m = sp.csr_matrix((np.ones(y.nnz), (y.patients, y.diseases)), shape=(y.num_patients, y.num_diseases))
    return np.asarray((m.T @ m).todense())


def comorbidity_rate(y: InteractionMatrix, a: int, b: int) -> float:
    """Share of patients with disease ``a`` who also have ``b``."""
    has_a = set(y.patients[y.diseases == a].tolist())
    if not has_a:
        raise ValueError(f"disease {a} has no patients")
    has_b = set(y.patients[y.diseases == b].tolist())
    return len(has_a & has_b) / len(has_a)


def comorbidity_matrix(y: InteractionMatrix) -> np.ndarray:
    """``rate[a, b]`` for all pairs; rows of diseases without patients are NaN."""
    co = _cooccurrence(y)
    support = np.diag(co).astype(np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        return co / support[:, None]


def pearson_matrix(z_d: np.ndarray) -> np.ndarray:
    """Correlation between disease embedding rows across their coordinates.

    Constant rows have undefined correlation; they get 0 everywhere, diagonal included.
    """
    z = np.asarray(z_d, dtype=np.float64)
    if z.shape[1] < 2:
        raise ValueError("need at least two embedding coordinates")
    centered = z - z.mean(axis=1, keepdims=True)
    norms = np.sqrt(np.einsum("ij,ij->i", centered, centered))
    constant = norms == 0
    if np.any(constant):
        log.warning("%d constant embedding row(s); their correlations are set to 0", int(constant.sum()))
    safe = np.where(constant, 1.0, norms)
    unit = centered / safe[:, None]
    r = unit @ unit.T
    r = 0.5 * (r + r.T)
    np.clip(r, -1.0, 1.0, out=r)
    r[constant, :] = 0.0
    r[:, constant] = 0.0
    # identical centered directions correlate exactly 1, free of rounding
    _, group = np.unique(unit, axis=0, return_inverse=True)
    same = (group[:, None] == group[None, :]) & ~constant[:, None] & ~constant[None, :]
    r[same] = 1.0
    return r


def discrepancy_rank(y: InteractionMatrix, z_d: np.ndarray, disease_codes: list[str], top_n: int | None = None):
    """All unordered disease pairs by descending ``|comorbidity - pearson|``.

    Pair comorbidity is ``max(rate(a, b), rate(b, a))``; pairs involving a disease
    with no patients are skipped.
    """
    rates = comorbidity_matrix(y)
    support = y.disease_degrees()
    r = pearson_matrix(z_d)
    a_idx, b_idx = np.triu_indices(y.num_diseases, k=1)
    ok = (support[a_idx] > 0) & (support[b_idx] > 0)
    a_idx, b_idx = a_idx[ok], b_idx[ok]
    como = np.maximum(rates[a_idx, b_idx], rates[b_idx, a_idx])
    pear = r[a_idx, b_idx]
    disc = np.abs(como - pear)
    codes = np.array(disease_codes, dtype=object)
    code_rank = np.empty(len(codes), dtype=np.int64)
    code_rank[sorted(range(len(codes)), key=lambda i: codes[i])] = np.arange(len(codes))
    lo = np.minimum(code_rank[a_idx], code_rank[b_idx])
    hi = np.maximum(code_rank[a_idx], code_rank[b_idx])
    # name each pair with its lexicographically smaller code first
    swap = code_rank[a_idx] > code_rank[b_idx]
    a_idx, b_idx = np.where(swap, b_idx, a_idx), np.where(swap, a_idx, b_idx)
    order = np.lexsort((hi, lo, -disc)).tolist()
    if top_n is not None:
        order = order[:top_n]
    return [
        DiscrepancyRecord(int(a_idx[i]), int(b_idx[i]), codes[a_idx[i]], codes[b_idx[i]],
                          float(como[i]), float(pear[i]), float(disc[i]),
                          int(support[a_idx[i]]), int(support[b_idx[i]]))
        for i in order
    ]


def write_discrepancy_csv(records, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["code_a", "code_b", "comorbidity", "pearson", "discrepancy", "support_a", "support_b"])
        for rec in records:
            w.writerow([rec.code_a, rec.code_b, format(rec.comorbidity, ".17g"), format(rec.pearson, ".17g"),
                        format(rec.discrepancy, ".17g"), rec.support_a, rec.support_b])


def export_embeddings(z: np.ndarray, patient_ids, disease_codes, y: InteractionMatrix, path, kind: str = "all") -> int:
    """Write ``id,kind,degree,dim_0..`` rows with 17 significant digits; returns rows written.

    ``degree`` counts a patient's diseases or a disease's patients.
    """
    if kind not in ("all", "patient", "disease"):
        raise ValueError("kind must be all, patient or disease")
    P = len(patient_ids)
    deg_p, deg_d = y.patient_degrees(), y.disease_degrees()
    rows = []
    if kind in ("all", "patient"):
        rows += [(pid, "patient", int(deg_p[i]), z[i]) for i, pid in enumerate(patient_ids)]
    if kind in ("all", "disease"):
        rows += [(code, "disease", int(deg_d[j]), z[P + j]) for j, code in enumerate(disease_codes)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "kind", "degree"] + [f"dim_{i}" for i in range(z.shape[1])])
        for ident, k, deg, vec in rows:
            w.writerow([ident, k, deg] + [format(x, ".17g") for x in vec])
    return len(rows)


def read_embeddings(path):
    """Inverse of :func:`export_embeddings`: ``(ids, kinds, matrix)``."""
    ids, kinds, vecs = [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            ids.append(row[0])
            kinds.append(row[1])
            vecs.append([float(x) for x in row[3:]])
    return ids, kinds, np.array(vecs)
