import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cldd.graph import InteractionMatrix  # noqa: E402
from cldd.model import ModelConfig, init_state  # noqa: E402
from oracles import random_bipartite  # noqa: E402

CRITERIA: dict[str, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """Record one acceptance line; the terminal summary prints them all."""

    def record(name: str, ok: bool, detail: str = ""):
        CRITERIA[name] = (bool(ok), detail)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    def order(name):
        tag = name.split()[0][1:]
        digits = "".join(ch for ch in tag if ch.isdigit())
        return int(digits), tag

    for name in sorted(CRITERIA, key=order):
        ok, detail = CRITERIA[name]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {name}  {detail}")


def make_instance(seed, P=5, D=6, k=8, f=3, layers=2, hops=2, dims=None, p_edge=0.4, randomize=True):
    """Random graph + state with nonzero biases and hop logits so every path is exercised."""
    rng = np.random.default_rng(seed)
    pairs = random_bipartite(rng, P, D, p_edge)
    y = InteractionMatrix.from_pairs(P, D, pairs)
    cfg = ModelConfig(k=k, f=f, num_layers=layers, max_hop=hops,
                      layer_dims=dims or [k] * layers, dropout=0.0, seed=seed)
    feats = rng.integers(0, 2, size=(P, f)).astype(float)
    state = init_state(cfg, feats, D)
    if randomize:
        for name, v in state.params.items():
            if name.startswith(("b_", "alpha")):
                state.params[name] = rng.normal(scale=0.5, size=v.shape)
    return y, pairs, state


@pytest.fixture
def instance():
    return make_instance
