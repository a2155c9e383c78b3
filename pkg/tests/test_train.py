import json
import math

import numpy as np
import pytest

from conftest import fd_grad, max_rel_err
from medplex import data as D
from medplex.data import LabelVector, SynthConfig, generate_synthetic_cohort, split_masks
from medplex.errors import DataError, NumericError
from medplex.model import ModelDims, ModelState, normalize_adjacency
from medplex.graph import RelationGraph
from medplex.pipeline import assign_masks, build_graph_for
from medplex.train import (
    AdamState,
    TrainingConfig,
    adam_step,
    consensus_loss,
    fit,
    infomax_backward,
    infomax_loss,
    loss_and_grads,
    micle_loss,
    preset_config,
    supervised_loss,
    total_loss,
)


def softmax_rows(logits):
    z = np.exp(logits - logits.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def labeled_vector(labels, mask):
    return LabelVector(np.asarray(labels), np.asarray(mask, dtype=np.int8),
                       int(np.max(labels)) + 1)


# ---------------------------------------------------------------- config


def test_config_validation():
    with pytest.raises(DataError):
        TrainingConfig(learning_rate=0.0)
    with pytest.raises(DataError):
        TrainingConfig(n_relations=2, thetas=(0.5, 0.5, 0.5))
    with pytest.raises(DataError):
        TrainingConfig(alpha=-1.0)
    with pytest.raises(DataError):
        TrainingConfig(tau=0.0)
    with pytest.raises(DataError):
        TrainingConfig(train_frac=0.5, val_frac=0.5, test_frac=0.5)


def test_config_single_theta_broadcasts():
    cfg = TrainingConfig(n_relations=3, thetas=(0.8,))
    assert cfg.thetas == (0.8, 0.8, 0.8)


def test_config_json_roundtrip_and_hash():
    cfg = TrainingConfig(n_relations=2, thetas=(0.5, 0.7), alpha=2.0, seed=3)
    back = TrainingConfig.from_json_dict(json.loads(json.dumps(cfg.to_json_dict())))
    assert back == cfg
    assert back.config_hash() == cfg.config_hash()
    other = TrainingConfig(n_relations=2, thetas=(0.5, 0.7), alpha=2.5, seed=3)
    assert other.config_hash() != cfg.config_hash()
    with pytest.raises(DataError):
        TrainingConfig.from_json_dict({"learning_rate": 0.1, "bogus": 1})


def test_config_fractions():
    cfg = TrainingConfig(n_relations=1, thetas=(0.9,))
    assert cfg.fractions() == (0.6, 0.1, 0.3)


def test_presets():
    with pytest.raises(DataError):
        preset_config("nope")
    cfg = preset_config("synth")
    assert cfg.n_relations == 2 and cfg.embed_dim == 32
    over = preset_config("synth", seed=9, epochs=5)
    assert over.seed == 9 and over.epochs == 5


# ---------------------------------------------------------------- infomax


def test_infomax_zero_inputs_is_ln2():
    h = np.zeros((6, 4))
    s = np.zeros(4)
    m = np.zeros((4, 4))
    loss, _ = infomax_loss(h, h, s, m)
    assert loss == pytest.approx(math.log(2.0), abs=1e-12)


def test_infomax_saturated_is_tiny():
    d = 3
    h = np.zeros((4, d))
    h[:, 0] = 40.0
    ht = -h
    s = np.zeros(d)
    s[0] = 1.0
    loss, _ = infomax_loss(h, ht, s, np.eye(d))
    assert 0.0 <= loss < 1e-6


def test_infomax_clamp_kills_gradient():
    d = 2
    h = np.zeros((3, d))
    h[:, 0] = 50.0
    ht = -h
    s = np.array([1.0, 0.0])
    _, cache = infomax_loss(h, ht, s, np.eye(d))
    dh, dht, ds, dm = infomax_backward(cache)
    assert np.all(dh == 0.0) and np.all(dht == 0.0)
    assert np.all(ds == 0.0) and np.all(dm == 0.0)


def test_infomax_gradients_match_fd():
    rng = np.random.default_rng(20)
    n, d = 5, 3
    h = rng.normal(size=(n, d))
    ht = rng.normal(size=(n, d))
    s = rng.normal(size=d)
    m = rng.normal(size=(d, d))

    _, cache = infomax_loss(h, ht, s, m)
    dh, dht, ds, dm = infomax_backward(cache)

    fd_h = fd_grad(lambda v: infomax_loss(v.reshape(n, d), ht, s, m)[0], h.ravel())
    fd_ht = fd_grad(lambda v: infomax_loss(h, v.reshape(n, d), s, m)[0], ht.ravel())
    fd_s = fd_grad(lambda v: infomax_loss(h, ht, v, m)[0], s)
    fd_m = fd_grad(lambda v: infomax_loss(h, ht, s, v.reshape(d, d))[0], m.ravel())
    assert max_rel_err(dh.ravel(), fd_h) < 1e-4
    assert max_rel_err(dht.ravel(), fd_ht) < 1e-4
    assert max_rel_err(ds, fd_s) < 1e-4
    assert max_rel_err(dm.ravel(), fd_m) < 1e-4


# ---------------------------------------------------------------- consensus


def test_consensus_zero_when_views_agree():
    rng = np.random.default_rng(21)
    o = rng.normal(size=(4, 3))
    loss, do, dp, dpt = consensus_loss(o, o.copy(), o.copy())
    assert loss == 0.0
    assert np.all(do == 0.0)


def test_consensus_minus_one_closed_form():
    o = np.zeros((5, 2))
    pooled = np.zeros((5, 2))
    tilde = np.ones((5, 2))
    loss, _, _, _ = consensus_loss(o, pooled, tilde)
    assert loss == pytest.approx(-1.0, abs=1e-12)


def test_consensus_gradients_match_fd():
    rng = np.random.default_rng(22)
    o = rng.normal(size=(4, 3))
    p = rng.normal(size=(4, 3))
    pt = rng.normal(size=(4, 3))
    _, do, dp, dpt = consensus_loss(o, p, pt)
    fd_o = fd_grad(lambda v: consensus_loss(v.reshape(4, 3), p, pt)[0], o.ravel())
    fd_p = fd_grad(lambda v: consensus_loss(o, v.reshape(4, 3), pt)[0], p.ravel())
    fd_pt = fd_grad(lambda v: consensus_loss(o, p, v.reshape(4, 3))[0], pt.ravel())
    assert max_rel_err(do.ravel(), fd_o) < 1e-4
    assert max_rel_err(dp.ravel(), fd_p) < 1e-4
    assert max_rel_err(dpt.ravel(), fd_pt) < 1e-4


def test_consensus_shape_mismatch():
    with pytest.raises(DataError):
        consensus_loss(np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((3, 2)))


# ---------------------------------------------------------------- supervised


def test_supervised_uniform_is_ln_nclasses():
    probs = np.full((6, 3), 1.0 / 3.0)
    lv = labeled_vector([0, 1, 2, 0, 1, 2], [D.TRAIN] * 6)
    loss, _ = supervised_loss(probs, lv)
    assert loss == pytest.approx(math.log(3.0), abs=1e-12)


def test_supervised_confident_is_tiny():
    eps = 1e-9
    probs = np.full((4, 2), eps)
    truth = np.array([0, 1, 0, 1])
    probs[np.arange(4), truth] = 1.0 - eps
    lv = labeled_vector(truth, [D.TRAIN] * 4)
    loss, _ = supervised_loss(probs, lv)
    assert loss < 1e-6


def test_supervised_ignores_non_train_rows():
    rng = np.random.default_rng(23)
    logits = rng.normal(size=(5, 3))
    probs = softmax_rows(logits)
    lv = labeled_vector([0, 1, 2, 0, 1],
                        [D.TRAIN, D.VAL, D.TEST, D.TRAIN, D.UNLABELED])
    _, dlogits = supervised_loss(probs, lv)
    assert np.all(dlogits[[1, 2, 4]] == 0.0)
    assert np.any(dlogits[0] != 0.0) and np.any(dlogits[3] != 0.0)


def test_supervised_gradient_matches_fd_through_softmax():
    rng = np.random.default_rng(24)
    n, c = 6, 3
    logits = rng.normal(size=(n, c))
    lv = labeled_vector(rng.integers(0, c, size=n),
                        [D.TRAIN, D.TRAIN, D.VAL, D.TRAIN, D.TEST, D.TRAIN])

    _, dlogits = supervised_loss(softmax_rows(logits), lv)
    fd = fd_grad(lambda v: supervised_loss(softmax_rows(v.reshape(n, c)), lv)[0],
                 logits.ravel())
    assert max_rel_err(dlogits.ravel(), fd) < 1e-4


def test_supervised_needs_train_rows():
    lv = labeled_vector([0, 1], [D.TEST, D.TEST])
    with pytest.raises(DataError):
        supervised_loss(np.full((2, 2), 0.5), lv)


# ---------------------------------------------------------------- totals


def test_total_loss_composition():
    cfg = TrainingConfig(n_relations=1, thetas=(0.9,), alpha=2.0, beta=0.5, gamma=0.01)
    got = total_loss(1.2, -0.3, 0.7, 10.0, cfg)
    assert got == pytest.approx(1.2 + 2.0 * -0.3 + 0.5 * 0.7 + 0.01 * 10.0, abs=1e-12)
    off = TrainingConfig(n_relations=1, thetas=(0.9,), alpha=0.0, beta=0.0, gamma=0.0)
    assert total_loss(1.2, -0.3, 0.7, 10.0, off) == 1.2


# ---------------------------------------------------------------- contrastive


def test_micle_identical_rows_hits_log_2n_minus_1():
    for n in (2, 3, 5):
        z = np.tile(np.array([[1.0, 2.0, 3.0]]), (n, 1))
        loss = micle_loss(z, z.copy(), tau=0.5)
        assert loss == pytest.approx(math.log(2 * n - 1), abs=1e-9)


def test_micle_separated_views_near_zero():
    n = 3
    z = np.eye(n) * 4.0  # orthogonal items, both views aligned
    loss = micle_loss(z, z * 2.0, tau=0.1)
    assert 0.0 <= loss < 1e-3


def test_micle_row_scale_invariance():
    rng = np.random.default_rng(25)
    z1 = rng.normal(size=(4, 3))
    z2 = rng.normal(size=(4, 3))
    base = micle_loss(z1, z2, tau=0.3)
    s1 = rng.uniform(0.1, 9.0, size=(4, 1))
    s2 = rng.uniform(0.1, 9.0, size=(4, 1))
    assert micle_loss(z1 * s1, z2 * s2, tau=0.3) == pytest.approx(base, abs=1e-9)


def test_micle_validation():
    z = np.ones((1, 2))
    with pytest.raises(DataError):
        micle_loss(z, z, tau=0.5)
    z2 = np.ones((3, 2))
    with pytest.raises(DataError):
        micle_loss(z2, z2, tau=0.0)
    with pytest.raises(DataError):
        micle_loss(z2, np.ones((3, 3)), tau=0.5)


# ---------------------------------------------------------------- adam


def tiny_state():
    return ModelState(ModelDims(4, 3, 2, 1, 2), seed=0)


def test_adam_zero_gradient_is_fixed_point():
    state = tiny_state()
    before = state.flatten()
    adam = AdamState.for_model(state)
    state.zero_grads()
    adam_step(state, adam, lr=0.05)
    assert np.array_equal(state.flatten(), before)


def test_adam_first_step_is_signed_lr():
    state = tiny_state()
    before = state.flatten()
    adam = AdamState.for_model(state)
    state.zero_grads()
    for name in state.param_order:
        state.grads[name] = np.full_like(state.params[name], 3.7)
    adam_step(state, adam, lr=0.01)
    delta = state.flatten() - before
    assert np.abs(delta + 0.01).max() < 1e-6


def test_adam_minimizes_quadratic_bowl():
    state = tiny_state()
    adam = AdamState.for_model(state)
    for _ in range(2000):
        for name in state.param_order:
            state.grads[name] = 2.0 * state.params[name]
        adam_step(state, adam, lr=0.01)
    assert np.abs(state.flatten()).max() < 1e-3


def test_adam_rejects_non_finite_gradient():
    state = tiny_state()
    adam = AdamState.for_model(state)
    state.zero_grads()
    state.grads["att_logits"][0] = np.inf
    with pytest.raises(NumericError, match="att_logits"):
        adam_step(state, adam, lr=0.01)


# ---------------------------------------------------------------- full objective


def random_ops(rng, n, r_count):
    ops = []
    for _ in range(r_count):
        iu, ju = np.triu_indices(n, k=1)
        keep = rng.random(iu.shape[0]) < 0.4
        g = RelationGraph(n=n, edges=np.stack([iu[keep], ju[keep]], axis=1))
        ops.append(normalize_adjacency(g))
    return ops


def test_full_objective_gradient_matches_fd():
    rng = np.random.default_rng(26)
    n, f, d, r_count, c = 12, 8, 4, 2, 3
    cfg = TrainingConfig(learning_rate=0.01, embed_dim=d, n_relations=r_count,
                         thetas=(0.5, 0.5), alpha=0.7, beta=0.9, gamma=0.02)
    state = ModelState(ModelDims(n, f, d, r_count, c), seed=5)
    ops = random_ops(rng, n, r_count)
    x = rng.normal(size=(n, f))
    mask = np.array([D.TRAIN] * 6 + [D.VAL, D.VAL] + [D.TEST] * 2 + [D.UNLABELED] * 2)
    labels = labeled_vector(rng.integers(0, c, size=n), mask)
    perm = rng.permutation(n)

    loss_and_grads(state, ops, x, labels, cfg, perm)
    analytic = np.concatenate([state.grads[k].ravel() for k in state.param_order])
    base = state.flatten()

    def f_total(v):
        probe = ModelState(ModelDims(n, f, d, r_count, c), seed=5)
        probe.unflatten(v)
        return loss_and_grads(probe, ops, x, labels, cfg, perm).total

    numeric = fd_grad(f_total, base)
    assert max_rel_err(analytic, numeric, floor=1e-5) < 1e-4


def test_beta_zero_leaves_only_l2_on_head():
    rng = np.random.default_rng(27)
    n, f, d, c = 10, 6, 3, 2
    cfg = TrainingConfig(learning_rate=0.01, embed_dim=d, n_relations=1,
                         thetas=(0.5,), alpha=1.0, beta=0.0, gamma=0.003)
    state = ModelState(ModelDims(n, f, d, 1, c), seed=6)
    ops = random_ops(rng, n, 1)
    x = rng.normal(size=(n, f))
    labels = labeled_vector(rng.integers(0, c, size=n), [D.TRAIN] * n)
    loss_and_grads(state, ops, x, labels, cfg, rng.permutation(n))
    assert np.array_equal(state.grads["cls_w"], 2.0 * cfg.gamma * state.params["cls_w"])
    assert np.array_equal(state.grads["cls_b"], 2.0 * cfg.gamma * state.params["cls_b"])


# ---------------------------------------------------------------- fit


def synth_setup(seed=0, epochs=60, **cfg_over):
    scfg = SynthConfig(n=60, n_classes=2, n_types=2, cols_per_type=4,
                       separations=(3.0, 3.0), noise_std=1.0,
                       embed_dim=4, embed_separation=2.0, embed_noise_std=1.0,
                       seed=seed)
    table, embeddings, labels, _ = generate_synthetic_cohort(scfg)
    cfg = preset_config("synth", embed_dim=8, epochs=epochs, seed=seed, **cfg_over)
    masked = assign_masks(labels, cfg)
    graph = build_graph_for(table, embeddings, cfg)
    return graph, masked, cfg


def test_fit_learns_separable_cohort():
    graph, masked, cfg = synth_setup(seed=0, epochs=200)
    state, report = fit(graph, masked, cfg)
    assert report.best_val_micro >= 0.9
    assert report.test_metrics["micro_f1"] >= 0.8


def test_fit_is_deterministic():
    graph, masked, cfg = synth_setup(seed=1, epochs=10)
    s1, r1 = fit(graph, masked, cfg)
    s2, r2 = fit(graph, masked, cfg)
    assert np.array_equal(s1.flatten(), s2.flatten())
    assert r1.rows == r2.rows
    assert r1.att_weights == r2.att_weights


def test_fit_zero_epochs():
    graph, masked, cfg = synth_setup(seed=2, epochs=0)
    state, report = fit(graph, masked, cfg)
    assert report.epochs_run == 0
    assert not report.rows
    fresh = ModelState(state.dims, seed=cfg.seed)
    assert np.array_equal(state.flatten(), fresh.flatten())


def test_fit_rows_decompose_total():
    graph, masked, cfg = synth_setup(seed=3, epochs=8)
    _, report = fit(graph, masked, cfg)
    assert len(report.rows) == 8
    for row in report.rows:
        recomposed = (row["infomax"] + cfg.alpha * row["consensus"]
                      + cfg.beta * row["supervised"] + cfg.gamma * row["l2"])
        assert row["total"] == pytest.approx(recomposed, abs=1e-9)


def test_fit_early_stopping_with_flat_validation():
    graph, masked, cfg = synth_setup(seed=4, epochs=80, learning_rate=1e-12,
                                     patience=5)
    _, report = fit(graph, masked, cfg)
    assert report.stopped_early
    assert report.epochs_run == 6
    assert report.best_epoch == 0


def test_fit_attention_weights_sum_to_one():
    graph, masked, cfg = synth_setup(seed=5, epochs=5)
    _, report = fit(graph, masked, cfg)
    assert len(report.att_weights) == cfg.n_relations
    assert sum(report.att_weights) == pytest.approx(1.0, abs=1e-9)


def test_fit_rejects_mismatched_shapes():
    graph, masked, cfg = synth_setup(seed=6, epochs=2)
    short = LabelVector(masked.labels[:-1], masked.mask[:-1], masked.n_classes)
    with pytest.raises(DataError):
        fit(graph, short, cfg)
    bad = preset_config("synth", n_relations=3, thetas=(0.5, 0.5, 0.5), epochs=2)
    with pytest.raises(DataError):
        fit(graph, masked, bad)
