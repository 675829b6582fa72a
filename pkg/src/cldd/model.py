"""CLDD forward pass: embedding tables, neighbor aggregation, hop-mixed propagation, scoring."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graph import InteractionMatrix, SparseMatrix, bipartite_decay, build_adjacency, normalize, spmm

NORM_EPS = 1e-12


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    k: int = 64
    f: int = 43
    num_layers: int = 3
    max_hop: int = 3
    layer_dims: list[int] | None = None
    dropout: list[float] | float = 0.1
    leaky_slope: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.layer_dims is None:
            self.layer_dims = [self.k] * self.num_layers
        self.layer_dims = [int(d) for d in self.layer_dims]
        if isinstance(self.dropout, (int, float)):
            self.dropout = [float(self.dropout)] * self.num_layers
        self.dropout = [float(r) for r in self.dropout]
        self.validate()

    def validate(self):
        if not 0 <= self.f < self.k:
            raise ConfigError(f"need 0 <= f < k, got f={self.f}, k={self.k}")
        # num_layers == 0 is the plain matrix-factorization baseline
        if self.num_layers < 0:
            raise ConfigError("num_layers must be >= 0")
        if self.max_hop < 1:
            raise ConfigError("max_hop must be >= 1")
        if len(self.layer_dims) != self.num_layers or any(d < 1 for d in self.layer_dims):
            raise ConfigError("layer_dims must list num_layers positive widths")
        if len(self.dropout) != self.num_layers or any(not 0 <= r < 1 for r in self.dropout):
            raise ConfigError("dropout rates must lie in [0, 1), one per layer")
        if self.leaky_slope <= 0:
            raise ConfigError("leaky_slope must be positive")

    @property
    def dims(self) -> list[int]:
        """Widths d_0..d_L with d_0 = k."""
        return [self.k] + list(self.layer_dims)

    @property
    def final_width(self) -> int:
        return sum(self.dims)

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "f": self.f,
            "num_layers": self.num_layers,
            "max_hop": self.max_hop,
            "layer_dims": list(self.layer_dims),
            "dropout": list(self.dropout),
            "leaky_slope": self.leaky_slope,
            "seed": self.seed,
        }


@dataclass
class ModelState:
    """Trainable tensors live in ``params``; ``patient_fixed`` is never updated."""

    config: ModelConfig
    params: dict[str, np.ndarray]
    patient_fixed: np.ndarray
    rng: np.random.Generator

    @property
    def num_patients(self) -> int:
        return self.patient_fixed.shape[0]

    @property
    def num_diseases(self) -> int:
        return self.params["disease_embed"].shape[0]

    def hop_weights(self, layer: int) -> np.ndarray:
        return softmax(self.params[f"alpha.{layer}"])

    def embedding_table(self) -> np.ndarray:
        """Z^(0): patient rows ``[learnable | fixed]`` stacked over disease rows."""
        patients = np.hstack([self.params["patient_learnable"], self.patient_fixed])
        return np.vstack([patients, self.params["disease_embed"]])

    def copy(self) -> "ModelState":
        rng = np.random.Generator(np.random.PCG64())
        rng.bit_generator.state = self.rng.bit_generator.state
        return ModelState(
            self.config,
            {name: v.copy() for name, v in self.params.items()},
            self.patient_fixed.copy(),
            rng,
        )


def param_names(config: ModelConfig) -> list[str]:
    names = ["patient_learnable", "disease_embed"]
    if config.num_layers >= 1:
        names.append("W_gc.1")
    for l in range(2, config.num_layers + 1):
        names += [f"W_gc.{l}", f"b_gc.{l}", f"W_bi.{l}", f"b_bi.{l}", f"alpha.{l}"]
    return names


def _glorot(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-bound, bound, size=(rows, cols))


def _keyed_rows(seed, tag, keys, n_rows, width, cols) -> np.ndarray:
    bound = np.sqrt(6.0 / (n_rows + cols))
    out = np.empty((len(keys), width))
    for i, key in enumerate(keys):
        out[i] = np.random.default_rng([seed, tag, int(key)]).uniform(-bound, bound, size=width)
    return out


def init_state(config: ModelConfig, features, num_diseases: int, patient_keys=None, disease_keys=None) -> ModelState:
    """Glorot-uniform tables and weights, zero biases, zero hop logits.

    ``features`` are copied verbatim into the frozen patient block. When
    ``patient_keys``/``disease_keys`` are given, each embedding row is drawn from
    its own stream seeded by ``(seed, key)`` so relabeling entities relabels rows.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != config.f:
        raise ConfigError(f"feature width {features.shape[-1]} does not match f={config.f}")
    P, D, k, f = features.shape[0], num_diseases, config.k, config.f
    rng = np.random.default_rng(config.seed)
    params: dict[str, np.ndarray] = {}
    if patient_keys is None:
        params["patient_learnable"] = _glorot(rng, P, k - f)
    else:
        params["patient_learnable"] = _keyed_rows(config.seed, 0, patient_keys, P, k - f, k)
    if disease_keys is None:
        params["disease_embed"] = _glorot(rng, D, k)
    else:
        params["disease_embed"] = _keyed_rows(config.seed, 1, disease_keys, D, k, k)
    dims = config.dims
    for l in range(1, config.num_layers + 1):
        d_in, d_out = dims[l - 1], dims[l]
        params[f"W_gc.{l}"] = _glorot(rng, d_in, d_out)
        if l == 1:
            continue
        params[f"b_gc.{l}"] = np.zeros(d_out)
        params[f"W_bi.{l}"] = _glorot(rng, d_in, d_out)
        params[f"b_bi.{l}"] = np.zeros(d_out)
        params[f"alpha.{l}"] = np.zeros(config.max_hop)
    dropout_rng = np.random.default_rng([config.seed, 7])
    return ModelState(config, params, features.copy(), dropout_rng)


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


def leaky_relu(x, slope):
    return np.where(x > 0, x, slope * x)


def row_normalize(x):
    """Divide each row by its l2 norm; rows with norm below the guard become zero."""
    norms = np.sqrt(np.einsum("ij,ij->i", x, x))
    keep = norms >= NORM_EPS
    out = np.zeros_like(x)
    out[keep] = x[keep] / norms[keep, None]
    return out, norms, keep


class PropagationGraph:
    """Operators derived once from the training interactions."""

    def __init__(self, y: InteractionMatrix, threads: int = 1):
        self.num_patients = y.num_patients
        self.num_diseases = y.num_diseases
        self.adjacency = build_adjacency(y)
        self.a_hat: SparseMatrix = normalize(self.adjacency)
        self.decay: SparseMatrix = bipartite_decay(y)
        self.threads = threads

    @property
    def num_nodes(self) -> int:
        return self.num_patients + self.num_diseases

    def mm(self, m: SparseMatrix, x):
        return spmm(m, x, threads=self.threads)


def first_order_aggregate(z0, w, graph: PropagationGraph, slope):
    """Pre-activation and activation of the neighbor aggregation layer.

    For node ``u``: ``sum_v w_uv (z_v * z_u) W = (z_u * sum_v w_uv z_v) W``; isolated
    nodes get zero.
    """
    q = graph.mm(graph.decay, z0)
    m = z0 * q
    pre = m @ w
    return leaky_relu(pre, slope), {"q": q, "m": m, "pre": pre}


def hop_mix(a_hat: SparseMatrix, z_prev, beta, threads: int = 1, keep_powers: bool = False):
    """``sum_i beta_i Â^i z_prev`` by repeated application of Â."""
    t = z_prev
    s = None
    powers = []
    for b in beta:
        t = spmm(a_hat, t, threads=threads)
        if keep_powers:
            powers.append(t)
        s = b * t if s is None else s + b * t
    return (s, powers) if keep_powers else s


def _dropout(h, rate, train_mode, rng):
    if not train_mode or rate == 0.0:
        return h, None
    mask = (rng.random(h.shape) >= rate).astype(np.float64) / (1.0 - rate)
    return h * mask, mask


def propagate_layer(l: int, graph: PropagationGraph, z_prev, state: ModelState, train_mode: bool):
    cfg = state.config
    p = state.params
    if z_prev.shape[1] != cfg.dims[l - 1]:
        raise ConfigError(f"layer {l} expects width {cfg.dims[l - 1]}, got {z_prev.shape[1]}")
    beta = state.hop_weights(l)
    s, powers = hop_mix(graph.a_hat, z_prev, beta, graph.threads, keep_powers=True)
    bil = z_prev * s
    pre = s @ p[f"W_gc.{l}"] + p[f"b_gc.{l}"] + bil @ p[f"W_bi.{l}"] + p[f"b_bi.{l}"]
    act = leaky_relu(pre, cfg.leaky_slope)
    dropped, mask = _dropout(act, cfg.dropout[l - 1], train_mode, state.rng)
    z, norms, keep = row_normalize(dropped)
    cache = {"s": s, "powers": powers, "beta": beta, "bil": bil, "pre": pre, "mask": mask,
             "norms": norms, "keep": keep}
    return z, cache


@dataclass
class LayerOutputs:
    zs: list[np.ndarray]
    caches: list[dict] = field(default_factory=list)
    train_mode: bool = False


def forward(state: ModelState, graph: PropagationGraph, train_mode: bool = False) -> LayerOutputs:
    cfg = state.config
    if graph.num_patients != state.num_patients or graph.num_diseases != state.num_diseases:
        raise ConfigError("state and graph disagree on node counts")
    z0 = state.embedding_table()
    zs = [z0]
    caches: list[dict] = []
    if cfg.num_layers >= 1:
        act, cache = first_order_aggregate(z0, state.params["W_gc.1"], graph, cfg.leaky_slope)
        dropped, mask = _dropout(act, cfg.dropout[0], train_mode, state.rng)
        z1, norms, keep = row_normalize(dropped)
        cache.update(mask=mask, norms=norms, keep=keep)
        zs.append(z1)
        caches.append(cache)
    for l in range(2, cfg.num_layers + 1):
        z, cache = propagate_layer(l, graph, zs[-1], state, train_mode)
        zs.append(z)
        caches.append(cache)
    return LayerOutputs(zs, caches if train_mode else [], train_mode)


def final_embeddings(outputs: LayerOutputs) -> np.ndarray:
    return np.hstack(outputs.zs)


def score(z: np.ndarray, num_patients: int, p: int, d: int) -> float:
    return float(z[p] @ z[num_patients + d])


def score_all(z: np.ndarray, num_patients: int, p: int, exclude=()) -> np.ndarray:
    """Scores of patient ``p`` against every disease; excluded entries are ``-inf``."""
    scores = z[num_patients:] @ z[p]
    excl = np.fromiter(exclude, dtype=np.int64)
    if excl.size:
        scores[excl] = -np.inf
    return scores


def score_matrix(z: np.ndarray, num_patients: int) -> np.ndarray:
    return z[:num_patients] @ z[num_patients:].T
