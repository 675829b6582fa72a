import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cldd.graph import InteractionMatrix, spmm
from cldd.model import (
    ConfigError,
    ModelConfig,
    PropagationGraph,
    final_embeddings,
    first_order_aggregate,
    forward,
    hop_mix,
    init_state,
    propagate_layer,
    score,
    score_all,
    softmax,
)
from oracles import dense_forward, dense_laplacian, dense_adjacency, lrelu, rownorm
from conftest import make_instance


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(k=4, f=4)
    with pytest.raises(ConfigError):
        ModelConfig(k=4, f=0, max_hop=0)
    with pytest.raises(ConfigError):
        ModelConfig(k=4, f=0, num_layers=2, dropout=[0.1])


def test_init_f_zero_is_fully_learnable():
    st_ = init_state(ModelConfig(k=6, f=0, num_layers=1), np.zeros((3, 0)), 4)
    assert st_.params["patient_learnable"].shape == (3, 6)
    assert st_.embedding_table().shape == (7, 6)


def test_init_rejects_wrong_feature_width():
    with pytest.raises(ConfigError):
        init_state(ModelConfig(k=6, f=2, num_layers=1), np.zeros((3, 3)), 4)


def test_init_hop_weights_uniform_and_features_verbatim():
    cfg = ModelConfig(k=8, f=3, num_layers=2, max_hop=4)
    feats = np.array([[1.0, 0.0, 1.0], [0.0, 1.0, 0.0]])
    s = init_state(cfg, feats, 3)
    np.testing.assert_array_equal(s.hop_weights(2), [0.25] * 4)
    np.testing.assert_array_equal(s.patient_fixed, feats)
    np.testing.assert_array_equal(s.embedding_table()[:2, 5:], feats)
    assert s.patient_fixed is not feats


def test_init_deterministic():
    cfg = ModelConfig(k=8, f=2, num_layers=2, seed=11)
    a = init_state(cfg, np.ones((4, 2)), 5)
    b = init_state(cfg, np.ones((4, 2)), 5)
    for name in a.params:
        assert a.params[name].tobytes() == b.params[name].tobytes()


def test_glorot_range():
    s = init_state(ModelConfig(k=8, f=0, num_layers=2, layer_dims=[8, 4]), np.zeros((10, 0)), 6)
    assert np.abs(s.params["W_gc.2"]).max() <= np.sqrt(6 / 12)


def test_first_order_isolated_patient_is_zero():
    y = InteractionMatrix.from_pairs(2, 2, [(0, 0)])
    s = init_state(ModelConfig(k=4, f=0, num_layers=1), np.zeros((2, 0)), 2)
    act, _ = first_order_aggregate(s.embedding_table(), s.params["W_gc.1"], PropagationGraph(y), 0.2)
    np.testing.assert_array_equal(act[1], 0.0)
    np.testing.assert_array_equal(act[3], 0.0)


def test_first_order_single_edge_hand_value():
    y = InteractionMatrix.from_pairs(1, 1, [(0, 0)])
    z0 = np.ones((2, 3))
    act, _ = first_order_aggregate(z0, np.eye(3), PropagationGraph(y), 0.2)
    np.testing.assert_array_equal(act, np.ones((2, 3)))


@pytest.mark.parametrize("seed", range(3))
def test_first_order_matches_literal_loops(seed):
    y, pairs, s = make_instance(seed, P=4, D=3, k=5, f=0, layers=1, p_edge=0.5)
    cfg = s.config
    got = forward(s, PropagationGraph(y)).zs[1]
    ref = dense_forward(4, 3, pairs, s.embedding_table(), s.params, 1, cfg.max_hop, cfg.leaky_slope)[:, 5:]
    np.testing.assert_allclose(got, ref, atol=1e-12, rtol=0)


def test_hop_mix_single_hop_is_spmm_bitwise():
    y, _, s = make_instance(0, P=4, D=4)
    g = PropagationGraph(y)
    z = np.random.default_rng(0).normal(size=(8, 3))
    assert np.array_equal(hop_mix(g.a_hat, z, [1.0]), spmm(g.a_hat, z))
    assert np.array_equal(hop_mix(g.a_hat, z, [1.0, 0.0, 0.0]), spmm(g.a_hat, z))


def test_hop_mix_matches_dense_powers():
    rng = np.random.default_rng(4)
    pairs = [(0, 0), (0, 1), (1, 1), (2, 2), (1, 2)]
    y = InteractionMatrix.from_pairs(3, 3, pairs)
    z = rng.normal(size=(6, 4))
    beta = softmax(rng.normal(size=3))
    a = dense_laplacian(dense_adjacency(3, 3, pairs))
    ref = sum(beta[i] * np.linalg.matrix_power(a, i + 1) for i in range(3)) @ z
    np.testing.assert_allclose(hop_mix(PropagationGraph(y).a_hat, z, beta), ref, atol=1e-10, rtol=0)


def test_propagate_layer_branch_ablation():
    y, _, s = make_instance(1, P=4, D=4, k=4, f=0, layers=2, hops=2, randomize=False)
    s.params["W_gc.2"] = np.eye(4)
    s.params["W_bi.2"] = np.zeros((4, 4))
    s.params["alpha.2"] = np.array([50.0, -50.0])
    g = PropagationGraph(y)
    z_prev = np.random.default_rng(1).normal(size=(8, 4))
    z, _ = propagate_layer(2, g, z_prev, s, train_mode=False)
    beta = s.hop_weights(2)
    ref = rownorm(lrelu(beta[0] * (g.a_hat.to_dense() @ z_prev)
                        + beta[1] * (g.a_hat.to_dense() @ g.a_hat.to_dense() @ z_prev), 0.2))
    np.testing.assert_allclose(z, ref, atol=1e-12)


def test_propagate_layer_zero_input_gives_zero():
    y, _, s = make_instance(2, randomize=False)
    z, _ = propagate_layer(2, PropagationGraph(y), np.zeros((11, 8)), s, train_mode=False)
    np.testing.assert_array_equal(z, 0.0)


def test_propagate_layer_width_mismatch():
    y, _, s = make_instance(2)
    with pytest.raises(ConfigError):
        propagate_layer(2, PropagationGraph(y), np.zeros((11, 5)), s, train_mode=False)


@pytest.mark.parametrize("seed", range(5))
def test_forward_matches_dense_oracle(seed):
    y, pairs, s = make_instance(seed, P=5, D=6, k=6, f=2, layers=3, hops=3, dims=[5, 4, 3])
    cfg = s.config
    got = final_embeddings(forward(s, PropagationGraph(y)))
    ref = dense_forward(5, 6, pairs, s.embedding_table(), s.params, 3, 3, cfg.leaky_slope)
    np.testing.assert_allclose(got, ref, atol=1e-10, rtol=0)


def test_forward_l1_outputs_and_eval_reproducible():
    y, _, s = make_instance(0, layers=1, hops=1)
    g = PropagationGraph(y)
    out = forward(s, g)
    assert len(out.zs) == 2
    again = forward(s, g)
    assert all(a.tobytes() == b.tobytes() for a, b in zip(out.zs, again.zs))


def test_dropout_masks_reproducible_with_seed():
    y, _, s = make_instance(0)
    s.config.dropout = [0.3, 0.3]
    g = PropagationGraph(y)
    a = forward(s.copy(), g, train_mode=True)
    b = forward(s.copy(), g, train_mode=True)
    assert np.array_equal(a.caches[1]["mask"], b.caches[1]["mask"])
    assert np.any(a.caches[1]["mask"] == 0)
    kept = a.caches[1]["mask"][a.caches[1]["mask"] > 0]
    np.testing.assert_allclose(kept, 1 / 0.7)


def test_final_embedding_layout():
    y, _, s = make_instance(0, k=4, f=1, layers=2, dims=[3, 3])
    out = forward(s, PropagationGraph(y))
    z = final_embeddings(out)
    assert z.shape[1] == 10
    np.testing.assert_array_equal(z[:, 4 + 1], out.zs[1][:, 1])
    np.testing.assert_array_equal(z[:, :4], out.zs[0])


def test_final_embeddings_without_layers():
    s = init_state(ModelConfig(k=4, f=0, num_layers=0), np.zeros((2, 0)), 3)
    y = InteractionMatrix.from_pairs(2, 3, [(0, 0)])
    np.testing.assert_array_equal(final_embeddings(forward(s, PropagationGraph(y))), s.embedding_table())


def test_score_unit_and_orthogonal():
    z = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    assert score(z, 1, 0, 0) == 1.0
    assert score(z, 1, 0, 1) == 0.0


def test_score_all_against_score_and_exclusions():
    rng = np.random.default_rng(3)
    z = rng.normal(size=(7, 5))
    P = 3
    full = score_all(z, P, 1)
    for d in range(4):
        ref = sum(z[1, j] * z[P + d, j] for j in range(5))
        assert abs(full[d] - ref) <= 1e-14 * max(1.0, abs(ref)) * 10
    assert np.all(score_all(z, P, 1, exclude=range(4)) == -np.inf)
    masked = score_all(z, P, 1, exclude={0, 2})
    assert masked[0] == masked[2] == -np.inf
    assert masked[1] == full[1]


@settings(max_examples=50, deadline=None)
@given(alpha=st.lists(st.floats(-30, 30), min_size=1, max_size=6), shift=st.floats(-50, 50))
def test_softmax_properties(alpha, shift):
    b = softmax(alpha)
    assert abs(b.sum() - 1) <= 1e-12
    assert np.all(b > 0)
    np.testing.assert_allclose(softmax(np.array(alpha) + shift), b, atol=1e-12, rtol=0)


def test_propagated_rows_unit_norm():
    y, _, s = make_instance(5, P=6, D=7, layers=3, hops=2)
    out = forward(s, PropagationGraph(y))
    for z in out.zs[1:]:
        norms = np.linalg.norm(z, axis=1)
        nonzero = norms > 0
        np.testing.assert_allclose(norms[nonzero], 1.0, atol=1e-9)


def test_disease_relabeling_permutes_scores():
    rng = np.random.default_rng(9)
    P, D = 5, 6
    pairs = [(p, d) for p in range(P) for d in range(D) if rng.random() < 0.4]
    perm = rng.permutation(D)  # new index of old disease d is perm[d]
    cfg = ModelConfig(k=6, f=2, num_layers=2, max_hop=2, dropout=0.0, seed=3)
    feats = rng.integers(0, 2, size=(P, 2)).astype(float)
    inv = np.argsort(perm)

    def scores(pairs_, disease_keys):
        y = InteractionMatrix.from_pairs(P, D, pairs_)
        s = init_state(cfg, feats, D, patient_keys=range(P), disease_keys=disease_keys)
        z = final_embeddings(forward(s, PropagationGraph(y)))
        return np.array([score_all(z, P, p) for p in range(P)])

    base = scores(pairs, list(range(D)))
    moved = scores([(p, int(perm[d])) for p, d in pairs], list(inv))
    np.testing.assert_allclose(moved[:, perm], base, atol=1e-12, rtol=0)
