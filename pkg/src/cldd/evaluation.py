"""Top-K ranking metrics and per-patient AUC, macro-averaged over test patients."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .model import ModelState, PropagationGraph, final_embeddings, forward, score_matrix

log = logging.getLogger(__name__)

METRICS = ("recall", "precision", "ndcg", "hit", "auc")


def rank(scores, k: int) -> np.ndarray:
    """Indices of the ``k`` largest finite scores; ties go to the lower index."""
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    candidates = order[np.isfinite(scores[order])]
    return candidates[:k]


def _discount(rank_1based: int) -> float:
    return 1.0 / math.log2(rank_1based + 1)


def metrics_at_k(topk, test_pos, k: int) -> tuple[float, float, float, float]:
    """``(recall, precision, ndcg, hit)`` with binary relevance and truncated ideal DCG."""
    test_pos = set(int(d) for d in test_pos)
    if not test_pos:
        raise ValueError("metrics need at least one test positive")
    hits = 0
    dcg = 0.0
    for i, d in enumerate(topk, start=1):
        if int(d) in test_pos:
            hits += 1
            dcg += _discount(i)
    idcg = 0.0
    for i in range(1, min(len(test_pos), k) + 1):
        idcg += _discount(i)
    return hits / len(test_pos), hits / k, dcg / idcg, 1.0 if hits else 0.0


def auc(scores, test_pos, train_pos=()) -> float:
    """Fraction of (test positive, negative) pairs ordered correctly, ties counting half.

    Negatives are every disease outside ``test_pos`` and ``train_pos``. Returns NaN
    when no negative (or no positive) remains.
    """
    scores = np.asarray(scores, dtype=np.float64)
    pos_idx = np.array(sorted(set(int(d) for d in test_pos)), dtype=np.int64)
    neg_mask = np.ones(scores.size, dtype=bool)
    neg_mask[pos_idx] = False
    neg_mask[np.fromiter((int(d) for d in train_pos), dtype=np.int64)] = False
    neg = np.sort(scores[neg_mask])
    if pos_idx.size == 0 or neg.size == 0:
        return float("nan")
    pos = scores[pos_idx]
    below = np.searchsorted(neg, pos, side="left")
    at_or_below = np.searchsorted(neg, pos, side="right")
    # twice the win count: 2 per strictly lower negative, 1 per tie
    doubled = int(np.sum(below + at_or_below))
    return doubled / (2 * pos.size * neg.size)


@dataclass
class PatientMetrics:
    patient: int
    patient_id: str
    recall: float
    precision: float
    ndcg: float
    hit: float
    auc: float


@dataclass
class MetricReport:
    k: int
    records: list[PatientMetrics] = field(default_factory=list)

    @property
    def num_evaluated(self) -> int:
        return len(self.records)

    def mean(self, metric: str) -> float:
        vals = [getattr(r, metric) for r in self.records]
        vals = [v for v in vals if not math.isnan(v)]
        return math.fsum(vals) / len(vals) if vals else float("nan")

    def means(self) -> dict[str, float]:
        return {m: self.mean(m) for m in METRICS}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["patient_id", *METRICS])
            for r in self.records:
                w.writerow([r.patient_id] + [format(getattr(r, m), ".17g") for m in METRICS])
            means = self.means()
            fh.write(f"# mean@{self.k} over {self.num_evaluated} patients: "
                     + " ".join(f"{m}={means[m]:.6f}" for m in METRICS) + "\n")

    def summary(self, config: dict | None = None) -> dict:
        return {"k": self.k, "evaluated_patients": self.num_evaluated,
                "means": self.means(), "config": config or {}}

    def write_json(self, path, config: dict | None = None) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(config), fh, indent=2, sort_keys=True)
            fh.write("\n")


def evaluate_scores(scores: np.ndarray, dataset: Dataset, k: int = 20) -> MetricReport:
    """Evaluate a dense ``P x D`` score matrix against the dataset's test split."""
    train_pos = dataset.train.positives()
    test_pos = dataset.test.positives()
    report = MetricReport(k)
    for p in range(dataset.num_patients):
        if not test_pos[p]:
            continue
        row = np.array(scores[p], dtype=np.float64)
        if train_pos[p]:
            row[list(train_pos[p])] = -np.inf
        top = rank(row, k)
        recall, precision, ndcg, hit = metrics_at_k(top, test_pos[p], k)
        a = auc(scores[p], test_pos[p], train_pos[p])
        if math.isnan(a):
            log.warning("patient %s has no negatives; excluded from AUC", dataset.patient_ids[p])
        report.records.append(PatientMetrics(p, dataset.patient_ids[p], recall, precision, ndcg, hit, a))
    return report


def model_scores(state: ModelState, graph: PropagationGraph) -> np.ndarray:
    z = final_embeddings(forward(state, graph, train_mode=False))
    return score_matrix(z, state.num_patients)


def evaluate(state: ModelState, dataset: Dataset, k: int = 20, graph: PropagationGraph | None = None) -> MetricReport:
    graph = graph or PropagationGraph(dataset.train)
    return evaluate_scores(model_scores(state, graph), dataset, k)


@dataclass
class CaseRow:
    rank: int
    disease_code: str
    score: float
    hit: bool


def case_report(state: ModelState, dataset: Dataset, patient_id: str, k: int = 5,
                graph: PropagationGraph | None = None) -> list[CaseRow]:
    """Top-``k`` unseen diseases for one patient, flagged against the held-out interactions."""
    try:
        p = dataset.patient_ids.index(patient_id)
    except ValueError:
        raise KeyError(f"unknown patient id {patient_id!r}") from None
    graph = graph or PropagationGraph(dataset.train)
    scores = model_scores(state, graph)[p]
    train_pos = dataset.train.positives()[p]
    test_pos = dataset.test.positives()[p]
    row = scores.copy()
    if train_pos:
        row[list(train_pos)] = -np.inf
    if k > int(np.isfinite(row).sum()):
        log.warning("K=%d exceeds the %d candidate diseases; returning the full ranking", k, int(np.isfinite(row).sum()))
    top = rank(row, k)
    return [CaseRow(i + 1, dataset.disease_codes[d], float(scores[d]), int(d) in test_pos)
            for i, d in enumerate(top)]


def write_case_report(rows: list[CaseRow], path, patient_id: str, config: dict | None = None) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# patient {patient_id}; config {json.dumps(config or {}, sort_keys=True)}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "disease_code", "score", "hit"])
        for r in rows:
            w.writerow([r.rank, r.disease_code, format(r.score, ".17g"), int(r.hit)])
