"""Interaction/demographic ingestion, feature encoding, disease filtering, temporal split,
and a planted low-rank generator for desk-scale experiments."""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .graph import InteractionMatrix

INTERACTION_HEADER = ["patient_id", "disease_code", "admit_time"]
DEMOGRAPHIC_HEADER = ["patient_id", "age", "gender", "race"]
GENDERS = {"M": 0, "F": 1}
RACES = [f"race_{i:02d}" for i in range(33)]
AGE_BUCKETS = [(18, 20), (21, 30), (31, 40), (41, 50), (51, 60), (61, 70), (71, 80), (81, 89), (91, 91)]
NUM_FEATURES = len(AGE_BUCKETS) + 1 + len(RACES)
ANCHOR_AGE_CAP = 91


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class RawInteraction:
    patient_id: str
    disease_code: str
    admit_time: int


@dataclass(frozen=True)
class Demographics:
    patient_id: str
    age: int
    gender: str
    race: str


@dataclass
class RawTables:
    interactions: list[RawInteraction]
    demographics: dict[str, Demographics]


@dataclass
class Dataset:
    patient_ids: list[str]
    disease_codes: list[str]
    train: InteractionMatrix
    test: InteractionMatrix
    features: np.ndarray

    @property
    def num_patients(self) -> int:
        return len(self.patient_ids)

    @property
    def num_diseases(self) -> int:
        return len(self.disease_codes)

    def full(self) -> InteractionMatrix:
        return InteractionMatrix(
            self.num_patients,
            self.num_diseases,
            np.concatenate([self.train.patients, self.test.patients]),
            np.concatenate([self.train.diseases, self.test.diseases]),
            np.concatenate([self.train.timestamps, self.test.timestamps]),
        )


# -- ingestion ----------------------------------------------------------------


def parse_time(token: str) -> int:
    """Integer epoch seconds, or ISO-8601 (naive values are taken as UTC)."""
    token = token.strip()
    try:
        return int(token)
    except ValueError:
        pass
    try:
        ts = datetime.fromisoformat(token)
    except ValueError as exc:
        raise DataError(f"unparseable admit_time {token!r}") from exc
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return int(ts.timestamp())


def _rows(path: Path, header: list[str]):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        first = next(reader, None)
        if first is None or [h.strip() for h in first] != header:
            raise DataError(f"{path}: expected header {','.join(header)}")
        for row in reader:
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{reader.line_num}: expected {len(header)} fields, got {len(row)}")
            yield reader.line_num, [c.strip() for c in row]


def read_interactions(path) -> list[RawInteraction]:
    """Parse and deduplicate per (patient, disease), keeping the earliest admission."""
    earliest: dict[tuple[str, str], int] = {}
    for line, (pid, code, when) in _rows(path, INTERACTION_HEADER):
        if not pid or not code:
            raise DataError(f"{path}:{line}: empty patient_id or disease_code")
        try:
            t = parse_time(when)
        except DataError as exc:
            raise DataError(f"{path}:{line}: {exc}") from None
        key = (pid, code)
        if key not in earliest or t < earliest[key]:
            earliest[key] = t
    if not earliest:
        raise DataError(f"{path}: no interactions")
    return [RawInteraction(p, c, t) for (p, c), t in earliest.items()]


def read_demographics(path) -> dict[str, Demographics]:
    out: dict[str, Demographics] = {}
    for line, (pid, age, gender, race) in _rows(path, DEMOGRAPHIC_HEADER):
        try:
            age_i = int(age)
        except ValueError:
            raise DataError(f"{path}:{line}: age {age!r} is not an integer") from None
        if gender not in GENDERS:
            raise DataError(f"{path}:{line}: unknown gender {gender!r}; allowed: {', '.join(GENDERS)}")
        if race not in RACES:
            raise DataError(f"{path}:{line}: unknown race {race!r}; allowed: {RACES[0]}..{RACES[-1]}")
        if age_i < 18:
            raise DataError(f"{path}:{line}: age {age_i} below cohort minimum 18")
        if pid in out:
            raise DataError(f"{path}:{line}: duplicate patient_id {pid!r}")
        out[pid] = Demographics(pid, ANCHOR_AGE_CAP if age_i > 89 else age_i, gender, race)
    return out


def ingest(interactions_path, demographics_path) -> RawTables:
    return RawTables(read_interactions(interactions_path), read_demographics(demographics_path))


def write_interactions(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(INTERACTION_HEADER)
        for r in rows:
            w.writerow([r.patient_id, r.disease_code, r.admit_time])


def write_demographics(demographics, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DEMOGRAPHIC_HEADER)
        for d in demographics:
            w.writerow([d.patient_id, d.age, d.gender, d.race])


def dataset_interactions(ds: Dataset) -> list[RawInteraction]:
    full = ds.full()
    return [
        RawInteraction(ds.patient_ids[p], ds.disease_codes[d], int(t))
        for p, d, t in zip(full.patients.tolist(), full.diseases.tolist(), full.timestamps.tolist())
    ]


# -- processing ---------------------------------------------------------------


def filter_top_diseases(raw: RawTables, max_diseases: int) -> RawTables:
    """Keep the ``max_diseases`` diseases with most distinct patients (ties: code order)."""
    if max_diseases < 1:
        raise ValueError("max_diseases must be >= 1")
    freq = Counter(r.disease_code for r in raw.interactions)
    ranked = sorted(freq, key=lambda c: (-freq[c], c))
    keep = set(ranked[:max_diseases])
    kept = [r for r in raw.interactions if r.disease_code in keep]
    remaining = {r.patient_id for r in kept}
    demo = {pid: d for pid, d in raw.demographics.items() if pid in remaining}
    return RawTables(kept, demo)


def age_bucket(age: int) -> int:
    if age < 18:
        raise DataError(f"age {age} below 18")
    if age >= ANCHOR_AGE_CAP:
        return len(AGE_BUCKETS) - 1
    for i, (lo, hi) in enumerate(AGE_BUCKETS[:-1]):
        if lo <= age <= hi:
            return i
    raise DataError(f"age {age} falls in no bucket (anchor ages above 89 are recorded as 91)")


def encode_features(demographics) -> np.ndarray:
    """Rows of ``[age one-hot (9) | gender (1) | race one-hot (33)]``."""
    demographics = list(demographics)
    x = np.zeros((len(demographics), NUM_FEATURES))
    n_age = len(AGE_BUCKETS)
    for i, d in enumerate(demographics):
        x[i, age_bucket(d.age)] = 1.0
        x[i, n_age] = GENDERS[d.gender]
        x[i, n_age + 1 + RACES.index(d.race)] = 1.0
    return x


def train_count(n: int, ratio: float) -> int:
    # tolerance keeps products like 0.7 * 10 from rounding up past the integer
    return min(n, math.ceil(ratio * n - 1e-9))


def temporal_split(raw: RawTables, ratio: float = 0.8) -> Dataset:
    """Per patient, the chronologically first ``ceil(ratio * n)`` interactions train."""
    if not 0 < ratio < 1:
        raise ValueError("ratio must lie in (0, 1)")
    patient_index: dict[str, int] = {}
    disease_index: dict[str, int] = {}
    per_patient: dict[str, list[RawInteraction]] = {}
    for r in raw.interactions:
        patient_index.setdefault(r.patient_id, len(patient_index))
        disease_index.setdefault(r.disease_code, len(disease_index))
        per_patient.setdefault(r.patient_id, []).append(r)
    missing = [pid for pid in patient_index if pid not in raw.demographics]
    if missing:
        raise DataError(f"no demographics for {len(missing)} patient(s), e.g. {missing[0]!r}")

    parts = {"train": ([], [], []), "test": ([], [], [])}
    for pid, rows in per_patient.items():
        rows = sorted(rows, key=lambda r: (r.admit_time, r.disease_code))
        cut = train_count(len(rows), ratio)
        for j, r in enumerate(rows):
            p, d, t = parts["train" if j < cut else "test"]
            p.append(patient_index[pid])
            d.append(disease_index[r.disease_code])
            t.append(r.admit_time)
    P, D = len(patient_index), len(disease_index)
    train = InteractionMatrix(P, D, *parts["train"])
    test = InteractionMatrix(P, D, *parts["test"])
    patient_ids = list(patient_index)
    features = encode_features(raw.demographics[pid] for pid in patient_ids)
    return Dataset(patient_ids, list(disease_index), train, test, features)


def load_dataset(data_dir, max_diseases: int = 2000, ratio: float = 0.8) -> Dataset:
    data_dir = Path(data_dir)
    raw = ingest(data_dir / "interactions.csv", data_dir / "demographics.csv")
    return temporal_split(filter_top_diseases(raw, max_diseases), ratio)


# -- synthetic generator ------------------------------------------------------


@dataclass
class PlantedTruth:
    patient_factors: np.ndarray
    disease_factors: np.ndarray

    @property
    def preferences(self) -> np.ndarray:
        return self.patient_factors @ self.disease_factors.T


def synth_generate(num_patients: int, num_diseases: int, rank: int, density: float, seed: int,
                   confound: bool = False):
    """Planted low-rank interactions plus independent (or confounded) demographics.

    Returns ``(interactions, demographics, truth)``. Patient ``p`` is diagnosed with the
    ``ceil(density * D)`` diseases of highest ``u_p . v_d``, in a random order with
    increasing admission times.
    """
    if not 1 <= rank <= min(num_patients, num_diseases):
        raise ValueError("rank must lie in [1, min(P, D)]")
    if not 0 < density < 0.5:
        raise ValueError("density must lie in (0, 0.5)")
    rng = np.random.default_rng(seed)
    u = rng.standard_normal((num_patients, rank))
    v = rng.standard_normal((num_diseases, rank))
    per_patient = max(1, math.ceil(density * num_diseases - 1e-9))

    demographics = []
    for p in range(num_patients):
        prng = np.random.default_rng([seed, 1, p])
        age = int(prng.integers(18, 96))
        demographics.append(Demographics(
            f"P{p:06d}",
            ANCHOR_AGE_CAP if age > 89 else age,
            "MF"[int(prng.integers(0, 2))],
            RACES[int(prng.integers(0, len(RACES)))],
        ))
    if confound:
        offsets = rng.standard_normal((len(AGE_BUCKETS), rank))
        buckets = np.array([age_bucket(d.age) for d in demographics])
        u = u + offsets[buckets]

    prefs = u @ v.T
    interactions = []
    base = 1_600_000_000
    for p in range(num_patients):
        prng = np.random.default_rng([seed, 2, p])
        top = np.argsort(-prefs[p], kind="stable")[:per_patient]
        order = prng.permutation(top)
        times = base + np.cumsum(prng.integers(3600, 90 * 86400, size=order.size))
        for d, t in zip(order.tolist(), times.tolist()):
            interactions.append(RawInteraction(f"P{p:06d}", f"D{d:05d}", int(t)))
    return interactions, demographics, PlantedTruth(u, v)


def write_synthetic(out_dir, interactions, demographics, truth: PlantedTruth, params: dict) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_interactions(interactions, out_dir / "interactions.csv")
    write_demographics(demographics, out_dir / "demographics.csv")
    with open(out_dir / "truth.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        rank = truth.patient_factors.shape[1]
        w.writerow(["kind", "id"] + [f"f_{i}" for i in range(rank)])
        for p, row in enumerate(truth.patient_factors):
            w.writerow(["patient", f"P{p:06d}"] + [format(x, ".17g") for x in row])
        for d, row in enumerate(truth.disease_factors):
            w.writerow(["disease", f"D{d:05d}"] + [format(x, ".17g") for x in row])
    n_patients = len(demographics)
    n_diseases = truth.disease_factors.shape[0]
    manifest = {
        "format_version": 1,
        "params": params,
        "counts": {
            "patients": n_patients,
            "diseases": n_diseases,
            "interactions": len(interactions),
            "sparsity": len(interactions) / (n_patients * n_diseases),
        },
        "files": ["interactions.csv", "demographics.csv", "truth.csv"],
    }
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return [out_dir / n for n in manifest["files"]] + [out_dir / "manifest.json"]


def read_truth(path) -> PlantedTruth:
    pats, dis = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            (pats if row[0] == "patient" else dis).append([float(x) for x in row[2:]])
    return PlantedTruth(np.array(pats), np.array(dis))
