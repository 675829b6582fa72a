"""BPR objective, exact gradients through the CLDD forward pass, Adam, and the training loop."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .graph import InteractionMatrix
from .model import (
    LayerOutputs,
    ModelConfig,
    ModelState,
    PropagationGraph,
    final_embeddings,
    forward,
    init_state,
)

log = logging.getLogger(__name__)

EMBEDDING_PARAMS = ("patient_learnable", "disease_embed")


class TrainingDiverged(RuntimeError):
    def __init__(self, message, last_good: ModelState | None = None, epoch: int = 0):
        super().__init__(message)
        self.last_good = last_good
        self.epoch = epoch


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 1024
    epochs: int = 30
    reg: float = 1e-5
    reg_scope: str = "all"
    negatives_per_positive: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.reg < 0:
            raise ValueError("reg must be non-negative")
        if self.reg_scope not in ("all", "embeddings"):
            raise ValueError("reg_scope must be 'all' or 'embeddings'")
        if self.batch_size < 1 or self.negatives_per_positive < 1 or self.epochs < 0:
            raise ValueError("batch_size, negatives_per_positive must be >= 1 and epochs >= 0")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


# -- objective ----------------------------------------------------------------


def softplus(x):
    """Numerically stable ``log(1 + exp(x))``."""
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _regularized(state: ModelState, scope: str):
    if scope == "embeddings":
        return [n for n in EMBEDDING_PARAMS if n in state.params]
    return list(state.params)


def pairwise_margins(triples, z, num_patients):
    t = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    zp = z[t[:, 0]]
    return np.einsum("ij,ij->i", zp, z[num_patients + t[:, 1]] - z[num_patients + t[:, 2]])


def bpr_loss(triples, z, state: ModelState, reg: float, reg_scope: str = "all") -> float:
    """``sum -ln sigmoid(x_pos - x_neg) + reg * ||Theta||^2``."""
    margins = pairwise_margins(triples, z, state.num_patients)
    pairwise = float(np.sum(softplus(-margins)))
    if reg == 0.0:
        return pairwise
    sq = sum(float(np.sum(state.params[n] ** 2)) for n in _regularized(state, reg_scope))
    return pairwise + reg * sq


# -- gradients ----------------------------------------------------------------


def _leaky_grad(pre, slope):
    return np.where(pre > 0, 1.0, slope)


def _row_normalize_grad(dy, y, norms, keep):
    dx = np.zeros_like(dy)
    yk, dyk = y[keep], dy[keep]
    proj = np.einsum("ij,ij->i", yk, dyk)
    dx[keep] = (dyk - yk * proj[:, None]) / norms[keep, None]
    return dx


def backward(triples, outputs: LayerOutputs, state: ModelState, graph: PropagationGraph,
             reg: float = 0.0, reg_scope: str = "all") -> dict[str, np.ndarray]:
    """Gradient of :func:`bpr_loss` with respect to every trainable tensor."""
    cfg = state.config
    if not outputs.train_mode or len(outputs.caches) != cfg.num_layers:
        raise RuntimeError("backward needs the caches of a train-mode forward on this state")
    if outputs.zs[0].shape[0] != graph.num_nodes:
        raise RuntimeError("cached outputs do not match the graph")
    P = state.num_patients
    t = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    z = final_embeddings(outputs)
    zp, zpos, zneg = z[t[:, 0]], z[P + t[:, 1]], z[P + t[:, 2]]
    margins = np.einsum("ij,ij->i", zp, zpos - zneg)
    # d/dm softplus(-m) = -sigmoid(-m)
    coef = -sigmoid(-margins)[:, None]
    dz = np.zeros_like(z)
    np.add.at(dz, t[:, 0], coef * (zpos - zneg))
    np.add.at(dz, P + t[:, 1], coef * zp)
    np.add.at(dz, P + t[:, 2], -coef * zp)

    offsets = np.cumsum([0] + cfg.dims)
    dzs = [dz[:, offsets[i]:offsets[i + 1]] for i in range(len(cfg.dims))]
    grads = {n: np.zeros_like(v) for n, v in state.params.items()}
    slope = cfg.leaky_slope

    for l in range(cfg.num_layers, 1, -1):
        c = outputs.caches[l - 1]
        z_prev = outputs.zs[l - 1]
        d_drop = _row_normalize_grad(dzs[l], outputs.zs[l], c["norms"], c["keep"])
        if c["mask"] is not None:
            d_drop = d_drop * c["mask"]
        d_pre = d_drop * _leaky_grad(c["pre"], slope)
        w_gc, w_bi = state.params[f"W_gc.{l}"], state.params[f"W_bi.{l}"]
        grads[f"W_gc.{l}"] += c["s"].T @ d_pre
        grads[f"b_gc.{l}"] += d_pre.sum(axis=0)
        grads[f"W_bi.{l}"] += c["bil"].T @ d_pre
        grads[f"b_bi.{l}"] += d_pre.sum(axis=0)
        d_bil = d_pre @ w_bi.T
        d_s = d_pre @ w_gc.T + d_bil * z_prev
        d_prev = d_bil * c["s"]
        beta = c["beta"]
        d_beta = np.array([np.sum(d_s * power) for power in c["powers"]])
        grads[f"alpha.{l}"] += beta * (d_beta - np.dot(beta, d_beta))
        # Â is symmetric, so the adjoint of sum_i beta_i Â^i is itself
        r = d_s
        for b in beta:
            r = graph.mm(graph.a_hat, r)
            d_prev = d_prev + b * r
        dzs[l - 1] = dzs[l - 1] + d_prev

    if cfg.num_layers >= 1:
        c = outputs.caches[0]
        z0 = outputs.zs[0]
        d_drop = _row_normalize_grad(dzs[1], outputs.zs[1], c["norms"], c["keep"])
        if c["mask"] is not None:
            d_drop = d_drop * c["mask"]
        d_pre = d_drop * _leaky_grad(c["pre"], slope)
        grads["W_gc.1"] += c["m"].T @ d_pre
        d_m = d_pre @ state.params["W_gc.1"].T
        dzs[0] = dzs[0] + d_m * c["q"] + graph.mm(graph.decay, d_m * z0)

    d0 = dzs[0]
    learn_width = cfg.k - cfg.f
    grads["patient_learnable"] += d0[:P, :learn_width]
    grads["disease_embed"] += d0[P:]

    if reg:
        for n in _regularized(state, reg_scope):
            grads[n] += 2.0 * reg * state.params[n]
    return grads


# -- optimizer ----------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(state: ModelState, grads: dict[str, np.ndarray], adam: AdamState, config: TrainConfig) -> ModelState:
    """Bias-corrected Adam update of ``state.params`` in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient in {name!r} at step {adam.t + 1}")
    adam.t += 1
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1 ** adam.t
    bc2 = 1.0 - b2 ** adam.t
    for name, g in grads.items():
        if name not in adam.m:
            adam.m[name] = np.zeros_like(g)
            adam.v[name] = np.zeros_like(g)
        m, v = adam.m[name], adam.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        state.params[name] -= config.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + config.eps)
    return state


# -- sampling -----------------------------------------------------------------


class NegativeSampler:
    """Uniform negatives from diseases outside each patient's training positives."""

    def __init__(self, train: InteractionMatrix):
        self.num_diseases = train.num_diseases
        self.keys = np.unique(train.patients * train.num_diseases + train.diseases)
        degrees = train.patient_degrees()
        self.saturated = set(np.flatnonzero(degrees >= train.num_diseases).tolist())
        for p in sorted(self.saturated):
            log.warning("patient %d is positive on every disease; skipped in sampling", p)

    def is_positive(self, patients, diseases):
        return np.isin(patients * self.num_diseases + diseases, self.keys, assume_unique=False)

    def sample(self, patients, rng: np.random.Generator):
        patients = np.asarray(patients, dtype=np.int64)
        neg = rng.integers(0, self.num_diseases, size=patients.size)
        bad = self.is_positive(patients, neg)
        while np.any(bad):
            idx = np.flatnonzero(bad)
            neg[idx] = rng.integers(0, self.num_diseases, size=idx.size)
            bad[idx] = self.is_positive(patients[idx], neg[idx])
        return neg


def epoch_triples(train: InteractionMatrix, rng: np.random.Generator, negatives: int = 1,
                  sampler: NegativeSampler | None = None) -> np.ndarray:
    """One shuffled pass over the training positives, ``negatives`` triples per positive."""
    sampler = sampler or NegativeSampler(train)
    order = rng.permutation(train.nnz)
    p, d = train.patients[order], train.diseases[order]
    if sampler.saturated:
        ok = ~np.isin(p, list(sampler.saturated))
        p, d = p[ok], d[ok]
    p = np.repeat(p, negatives)
    d = np.repeat(d, negatives)
    return np.column_stack([p, d, sampler.sample(p, rng)])


def sample_triples(train: InteractionMatrix, rng: np.random.Generator, n: int,
                   sampler: NegativeSampler | None = None) -> np.ndarray:
    """``n`` triples with positives drawn uniformly over training interactions."""
    sampler = sampler or NegativeSampler(train)
    eligible = np.flatnonzero(~np.isin(train.patients, list(sampler.saturated)))
    pick = eligible[rng.integers(0, eligible.size, size=n)]
    p, d = train.patients[pick], train.diseases[pick]
    return np.column_stack([p, d, sampler.sample(p, rng)])


# -- loop ---------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    wall_seconds: float
    probe_loss: float


def train_step(state, graph, triples, adam, config: TrainConfig) -> float:
    outputs = forward(state, graph, train_mode=True)
    z = final_embeddings(outputs)
    loss = bpr_loss(triples, z, state, config.reg, config.reg_scope)
    if not np.isfinite(loss):
        raise TrainingDiverged(f"non-finite loss at step {adam.t + 1}")
    grads = backward(triples, outputs, state, graph, config.reg, config.reg_scope)
    adam_step(state, grads, adam, config)
    return loss


def fit(train: InteractionMatrix, features, model_config: ModelConfig, train_config: TrainConfig,
        on_epoch=None, threads: int = 1, state: ModelState | None = None):
    """Train from scratch (or from ``state``) and return ``(state, [EpochRecord])``.

    ``on_epoch(epoch, state)`` is called after every epoch, e.g. to write checkpoints.
    """
    graph = PropagationGraph(train, threads=threads)
    if state is None:
        state = init_state(model_config, features, train.num_diseases)
    rng = np.random.default_rng([train_config.seed, 1])
    sampler = NegativeSampler(train)
    probe = sample_triples(train, np.random.default_rng([train_config.seed, 2]),
                           min(256, max(1, train.nnz)), sampler)
    adam = AdamState()
    history: list[EpochRecord] = []
    last_good = state.copy()
    for epoch in range(1, train_config.epochs + 1):
        start = time.perf_counter()
        triples = epoch_triples(train, rng, train_config.negatives_per_positive, sampler)
        per_triple = []
        try:
            for lo in range(0, len(triples), train_config.batch_size):
                batch = triples[lo:lo + train_config.batch_size]
                loss = train_step(state, graph, batch, adam, train_config)
                per_triple.append(loss / len(batch))
            z = final_embeddings(forward(state, graph, train_mode=False))
            probe_loss = bpr_loss(probe, z, state, 0.0)
            if not np.isfinite(probe_loss):
                raise TrainingDiverged(f"non-finite probe loss after epoch {epoch}")
        except TrainingDiverged as exc:
            raise TrainingDiverged(str(exc), last_good=last_good, epoch=epoch) from exc
        rec = EpochRecord(epoch, float(np.mean(per_triple)), time.perf_counter() - start, probe_loss)
        history.append(rec)
        log.info("epoch %d mean_loss %.6f probe %.6f", epoch, rec.mean_loss, probe_loss)
        last_good = state.copy()
        if on_epoch is not None:
            on_epoch(epoch, state)
    return state, history


def write_log(history, path) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,mean_loss,wall_seconds\n")
        for rec in history:
            fh.write(f"{rec.epoch},{rec.mean_loss!r},{rec.wall_seconds:.6f}\n")
