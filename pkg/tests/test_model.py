import os
import tempfile

import numpy as np
import pytest
from scipy.special import expit

from conftest import fd_grad, max_rel_err
from medplex.errors import DataError, NumericError
from medplex.graph import RelationGraph, build_weighted_full_graph
from medplex.model import (
    ModelDims,
    ModelState,
    attentive_pool,
    attentive_pool_backward,
    classify,
    classify_backward,
    corrupt_features,
    discriminate,
    discriminate_backward,
    gcn_backward,
    gcn_forward,
    load_checkpoint,
    normalize_adjacency,
    readout_summary,
    save_checkpoint,
    summary_backward,
)


def dense_normalized(graph):
    """Independent dense oracle for D^-1/2 (A + I) D^-1/2."""
    n = graph.n
    a = np.zeros((n, n))
    w = graph.weights if graph.weights is not None else np.ones(graph.n_edges)
    for (i, j), wij in zip(graph.edges, w):
        a[i, j] = wij
        a[j, i] = wij
    a += np.eye(n)
    d = a.sum(axis=1)
    dinv = 1.0 / np.sqrt(d)
    return a * dinv[:, None] * dinv[None, :]


# ---------------------------------------------------------------- adjacency


def test_adjacency_isolated_node():
    g = RelationGraph(n=1, edges=np.zeros((0, 2)))
    op = normalize_adjacency(g)
    assert op.toarray() == pytest.approx(np.array([[1.0]]))


def test_adjacency_edgeless_is_identity():
    g = RelationGraph(n=5, edges=np.zeros((0, 2)))
    assert np.array_equal(normalize_adjacency(g).toarray(), np.eye(5))


def test_adjacency_two_connected_nodes():
    g = RelationGraph(n=2, edges=np.array([[0, 1]]))
    op = normalize_adjacency(g).toarray()
    assert np.allclose(op, 0.5)


def test_adjacency_symmetric_bit_exact():
    rng = np.random.default_rng(0)
    for trial in range(10):
        n = int(rng.integers(2, 15))
        iu, ju = np.triu_indices(n, k=1)
        keep = rng.random(iu.shape[0]) < 0.4
        g = RelationGraph(n=n, edges=np.stack([iu[keep], ju[keep]], axis=1))
        op = normalize_adjacency(g).toarray()
        assert np.array_equal(op, op.T)


def test_adjacency_matches_dense_oracle():
    rng = np.random.default_rng(1)
    for trial in range(10):
        n = int(rng.integers(2, 12))
        iu, ju = np.triu_indices(n, k=1)
        keep = rng.random(iu.shape[0]) < 0.5
        g = RelationGraph(n=n, edges=np.stack([iu[keep], ju[keep]], axis=1))
        assert normalize_adjacency(g).toarray() == pytest.approx(dense_normalized(g), abs=1e-12)


def test_adjacency_weighted_matches_oracle():
    rng = np.random.default_rng(2)
    block = rng.normal(size=(8, 3))
    g = build_weighted_full_graph(block)
    assert normalize_adjacency(g).toarray() == pytest.approx(dense_normalized(g), abs=1e-12)


# ---------------------------------------------------------------- gcn layer


def identity_op(n):
    return normalize_adjacency(RelationGraph(n=n, edges=np.zeros((0, 2))))


def test_gcn_identity_operator():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(6, 4))
    w = rng.normal(size=(4, 3))
    h, _ = gcn_forward(identity_op(6), x, w)
    assert h == pytest.approx(np.maximum(x @ w, 0.0))


def test_gcn_relu_kills_negative():
    x = np.array([[1.0]])
    w = np.array([[-2.0]])
    h, cache = gcn_forward(identity_op(1), x, w)
    assert h[0, 0] == 0.0
    dw, dx = gcn_backward(cache, np.ones_like(h))
    assert dw[0, 0] == 0.0 and dx[0, 0] == 0.0


def test_gcn_gradients_match_fd():
    rng = np.random.default_rng(4)
    n, f, d = 7, 5, 3
    iu, ju = np.triu_indices(n, k=1)
    keep = rng.random(iu.shape[0]) < 0.5
    op = normalize_adjacency(RelationGraph(n=n, edges=np.stack([iu[keep], ju[keep]], axis=1)))
    x = rng.normal(size=(n, f))
    w = rng.normal(size=(f, d))
    r = rng.normal(size=(n, d))  # random projection so the loss is scalar

    h, cache = gcn_forward(op, x, w)
    dw, dx = gcn_backward(cache, r)

    fd_w = fd_grad(lambda v: float(np.sum(gcn_forward(op, x, v.reshape(f, d))[0] * r)), w.ravel())
    fd_x = fd_grad(lambda v: float(np.sum(gcn_forward(op, v.reshape(n, f), w)[0] * r)), x.ravel())
    assert max_rel_err(dw.ravel(), fd_w) < 1e-4
    assert max_rel_err(dx.ravel(), fd_x) < 1e-4


# ---------------------------------------------------------------- readout


def test_summary_of_zeros_is_half():
    s, _ = readout_summary(np.zeros((5, 4)))
    assert np.allclose(s, 0.5)


def test_summary_single_row():
    h = np.array([[2.0, -1.0]])
    s, _ = readout_summary(h)
    assert s == pytest.approx(expit(h[0]))


def test_summary_gradient_matches_fd():
    rng = np.random.default_rng(5)
    h = rng.normal(size=(6, 3))
    r = rng.normal(size=3)
    s, cache = readout_summary(h)
    dh = summary_backward(cache, r)
    fd = fd_grad(lambda v: float(np.dot(readout_summary(v.reshape(6, 3))[0], r)), h.ravel())
    assert max_rel_err(dh.ravel(), fd) < 1e-4


# ---------------------------------------------------------------- discriminator


def test_discriminate_zero_inputs_score_half():
    scores, _ = discriminate(np.zeros((4, 3)), np.zeros(3), np.zeros((3, 3)))
    assert np.allclose(scores, 0.5)


def test_discriminate_unit_example():
    h = np.zeros((1, 3))
    h[0, 0] = 1.0
    s = np.array([1.0, 0.0, 0.0])
    scores, _ = discriminate(h, s, np.eye(3))
    assert abs(scores[0] - 0.73106) < 1e-5


def test_discriminate_gradients_match_fd():
    rng = np.random.default_rng(6)
    n, d = 5, 4
    h = rng.normal(size=(n, d))
    s = rng.normal(size=d)
    m = rng.normal(size=(d, d))
    r = rng.normal(size=n)

    _, cache = discriminate(h, s, m)
    dh, ds, dm = discriminate_backward(cache, r)

    fd_h = fd_grad(lambda v: float(np.dot(discriminate(v.reshape(n, d), s, m)[0], r)), h.ravel())
    fd_s = fd_grad(lambda v: float(np.dot(discriminate(h, v, m)[0], r)), s)
    fd_m = fd_grad(lambda v: float(np.dot(discriminate(h, s, v.reshape(d, d))[0], r)), m.ravel())
    assert max_rel_err(dh.ravel(), fd_h) < 1e-4
    assert max_rel_err(ds, fd_s) < 1e-4
    assert max_rel_err(dm.ravel(), fd_m) < 1e-4


def test_discriminate_shape_mismatch():
    with pytest.raises(DataError):
        discriminate(np.zeros((2, 3)), np.zeros(3), np.zeros((2, 3)))


# ---------------------------------------------------------------- corruption


def test_corrupt_preserves_multiset():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(9, 4))
    xt, perm = corrupt_features(x, seed=[3, 0])
    assert np.array_equal(np.sort(xt, axis=0), np.sort(x, axis=0))
    assert np.array_equal(xt, x[perm])


def test_corrupt_deterministic():
    x = np.arange(20.0).reshape(10, 2)
    a, pa = corrupt_features(x, seed=[5, 1])
    b, pb = corrupt_features(x, seed=[5, 1])
    assert np.array_equal(a, b) and np.array_equal(pa, pb)
    c, _ = corrupt_features(x, seed=[5, 2])
    assert not np.array_equal(a, c)


def test_corrupt_single_row():
    x = np.array([[1.0, 2.0]])
    xt, perm = corrupt_features(x, seed=[0, 0])
    assert np.array_equal(xt, x) and perm.tolist() == [0]


# ---------------------------------------------------------------- attention pool


def test_pool_uniform_weights_give_mean():
    rng = np.random.default_rng(8)
    hs = [rng.normal(size=(5, 3)) for _ in range(4)]
    pooled, weights, _ = attentive_pool(hs, np.zeros(4))
    assert np.allclose(weights, 0.25)
    assert pooled == pytest.approx(sum(hs) / 4.0)


def test_pool_saturated_logit_picks_one_relation():
    rng = np.random.default_rng(9)
    hs = [rng.normal(size=(4, 2)) for _ in range(3)]
    pooled, weights, _ = attentive_pool(hs, np.array([40.0, 0.0, -5.0]))
    assert abs(weights[0] - 1.0) < 1e-9
    assert np.abs(pooled - hs[0]).max() < 1e-9


def test_pool_weights_sum_to_one():
    rng = np.random.default_rng(10)
    for trial in range(20):
        k = int(rng.integers(1, 6))
        hs = [rng.normal(size=(3, 2)) for _ in range(k)]
        _, weights, _ = attentive_pool(hs, rng.normal(size=k) * 10)
        assert abs(weights.sum() - 1.0) < 1e-9


def test_pool_shift_invariance():
    rng = np.random.default_rng(11)
    hs = [rng.normal(size=(4, 3)) for _ in range(3)]
    logits = rng.normal(size=3)
    _, w1, _ = attentive_pool(hs, logits)
    _, w2, _ = attentive_pool(hs, logits + 123.0)
    assert np.abs(w1 - w2).max() < 1e-12


def test_pool_gradients_match_fd():
    rng = np.random.default_rng(12)
    k, n, d = 3, 4, 2
    hs = [rng.normal(size=(n, d)) for _ in range(k)]
    logits = rng.normal(size=k)
    r = rng.normal(size=(n, d))

    _, _, cache = attentive_pool(hs, logits)
    dhs, dlogits = attentive_pool_backward(cache, r)

    fd_l = fd_grad(lambda v: float(np.sum(attentive_pool(hs, v)[0] * r)), logits)
    assert max_rel_err(dlogits, fd_l) < 1e-4
    for j in range(k):
        def f(v, j=j):
            trial = [h.copy() for h in hs]
            trial[j] = v.reshape(n, d)
            return float(np.sum(attentive_pool(trial, logits)[0] * r))
        assert max_rel_err(dhs[j].ravel(), fd_grad(f, hs[j].ravel())) < 1e-4


def test_pool_logit_count_mismatch():
    with pytest.raises(DataError):
        attentive_pool([np.zeros((2, 2))], np.zeros(2))


# ---------------------------------------------------------------- classifier


def test_classify_uniform():
    probs, _ = classify(np.zeros((4, 3)), np.zeros((3, 2)), np.zeros(2))
    assert np.allclose(probs, 0.5)


def test_classify_rows_sum_to_one():
    rng = np.random.default_rng(13)
    probs, _ = classify(rng.normal(size=(6, 4)), rng.normal(size=(4, 3)), rng.normal(size=3))
    assert np.allclose(probs.sum(axis=1), 1.0)


def test_classify_bias_shifts_argmax():
    o = np.zeros((1, 2))
    w = np.zeros((2, 3))
    probs, _ = classify(o, w, np.array([0.0, 5.0, 0.0]))
    assert probs[0].argmax() == 1


def test_classify_gradients_match_fd():
    rng = np.random.default_rng(14)
    n, d, c = 5, 3, 4
    o = rng.normal(size=(n, d))
    w = rng.normal(size=(d, c))
    b = rng.normal(size=c)
    r = rng.normal(size=(n, c))

    _, cache = classify(o, w, b)
    do, dw, db = classify_backward(cache, r)

    fd_o = fd_grad(lambda v: float(np.sum(classify(v.reshape(n, d), w, b)[0] * r)), o.ravel())
    fd_w = fd_grad(lambda v: float(np.sum(classify(o, v.reshape(d, c), b)[0] * r)), w.ravel())
    fd_b = fd_grad(lambda v: float(np.sum(classify(o, w, v)[0] * r)), b)
    assert max_rel_err(do.ravel(), fd_o) < 1e-4
    assert max_rel_err(dw.ravel(), fd_w) < 1e-4
    assert max_rel_err(db, fd_b) < 1e-4


# ---------------------------------------------------------------- model state


def test_param_order_frozen():
    state = ModelState(ModelDims(5, 4, 3, 2, 2), seed=0)
    assert state.param_order == [
        "enc_w_0", "enc_w_1", "disc_m_0", "disc_m_1",
        "consensus", "att_logits", "cls_w", "cls_b",
    ]


def test_flatten_unflatten_roundtrip():
    state = ModelState(ModelDims(6, 4, 3, 2, 3), seed=1)
    flat = state.flatten()
    other = ModelState(ModelDims(6, 4, 3, 2, 3), seed=99)
    other.unflatten(flat)
    for name in state.param_order:
        assert np.array_equal(other.params[name], state.params[name])
    with pytest.raises(DataError):
        other.unflatten(np.zeros(flat.size + 1))


def test_check_finite_names_offender():
    state = ModelState(ModelDims(4, 3, 2, 1, 2), seed=0)
    state.params["cls_w"][0, 0] = np.nan
    with pytest.raises(NumericError, match="cls_w"):
        state.check_finite()


def test_l2_is_sum_of_squares():
    state = ModelState(ModelDims(4, 3, 2, 2, 2), seed=2)
    expected = sum(float(np.sum(p * p)) for p in state.params.values())
    assert state.l2() == pytest.approx(expected, rel=1e-12)


def test_state_deterministic_init():
    a = ModelState(ModelDims(5, 4, 3, 2, 2), seed=7)
    b = ModelState(ModelDims(5, 4, 3, 2, 2), seed=7)
    assert np.array_equal(a.flatten(), b.flatten())
    c = ModelState(ModelDims(5, 4, 3, 2, 2), seed=8)
    assert not np.array_equal(a.flatten(), c.flatten())


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_roundtrip_byte_exact():
    state = ModelState(ModelDims(6, 5, 4, 2, 3), seed=3)
    fd, path = tempfile.mkstemp(suffix=".bin")
    os.close(fd)
    try:
        save_checkpoint(path, state, config_hash="abc123")
        back, header = load_checkpoint(path)
        assert np.array_equal(back.flatten(), state.flatten())
        assert header["config_hash"] == "abc123"
        # saving the loaded state reproduces the file byte for byte
        path2 = path + ".again"
        save_checkpoint(path2, back, config_hash="abc123")
        with open(path, "rb") as fh:
            one = fh.read()
        with open(path2, "rb") as fh:
            two = fh.read()
        os.unlink(path2)
        assert one == two
    finally:
        os.unlink(path)


def test_checkpoint_bad_version():
    state = ModelState(ModelDims(3, 2, 2, 1, 2), seed=0)
    fd, path = tempfile.mkstemp(suffix=".bin")
    os.close(fd)
    try:
        save_checkpoint(path, state)
        with open(path, "rb") as fh:
            raw = fh.read()
        nl = raw.find(b"\n")
        hacked = raw[:nl].replace(b'"format_version": 1', b'"format_version": 9')
        with open(path, "wb") as fh:
            fh.write(hacked + raw[nl:])
        with pytest.raises(DataError, match="version"):
            load_checkpoint(path)
    finally:
        os.unlink(path)


def test_checkpoint_truncated_blob():
    state = ModelState(ModelDims(3, 2, 2, 1, 2), seed=0)
    fd, path = tempfile.mkstemp(suffix=".bin")
    os.close(fd)
    try:
        save_checkpoint(path, state)
        with open(path, "rb") as fh:
            raw = fh.read()
        with open(path, "wb") as fh:
            fh.write(raw[:-16])
        with pytest.raises(DataError, match="blob"):
            load_checkpoint(path)
    finally:
        os.unlink(path)


def test_checkpoint_missing_header():
    fd, path = tempfile.mkstemp(suffix=".bin")
    with os.fdopen(fd, "wb") as fh:
        fh.write(b"\x00" * 64)
    try:
        with pytest.raises(DataError):
            load_checkpoint(path)
    finally:
        os.unlink(path)
