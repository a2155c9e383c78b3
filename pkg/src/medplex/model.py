"""Model parameters and differentiable building blocks.

Every forward op returns a cache holding exactly what its hand-written
backward needs. Gradients are accumulated into ModelState.grads as plain
dense arrays; the only sparse object is the normalized adjacency operator,
which is symmetric, so transposes never appear in the backward passes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .errors import DataError, NumericError
from .graph import RelationGraph

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelDims:
    n_nodes: int
    in_dim: int
    hidden_dim: int
    n_relations: int
    n_classes: int

    def validate(self):
        if min(self.n_nodes, self.in_dim, self.hidden_dim, self.n_relations, self.n_classes) < 1:
            raise DataError("all model dimensions must be positive")


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class ModelState:
    """All trainable parameters, their gradients, and the parameter order.

    Order is frozen (it is also the checkpoint blob order): per-relation
    encoder weights, per-relation discriminator forms, consensus matrix,
    attention logits, classifier weights, classifier bias.
    """

    def __init__(self, dims: ModelDims, seed: int = 0):
        dims.validate()
        self.dims = dims
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.params: dict[str, np.ndarray] = {}
        for r in range(dims.n_relations):
            self.params["enc_w_%d" % r] = _xavier(rng, dims.in_dim, dims.hidden_dim)
        for r in range(dims.n_relations):
            self.params["disc_m_%d" % r] = _xavier(rng, dims.hidden_dim, dims.hidden_dim)
        self.params["consensus"] = rng.normal(0.0, 0.01, size=(dims.n_nodes, dims.hidden_dim))
        self.params["att_logits"] = np.zeros(dims.n_relations)
        self.params["cls_w"] = _xavier(rng, dims.hidden_dim, dims.n_classes)
        self.params["cls_b"] = np.zeros(dims.n_classes)
        self.grads: dict[str, np.ndarray] = {}
        self.zero_grads()

    @property
    def param_order(self) -> list[str]:
        r = self.dims.n_relations
        return (
            ["enc_w_%d" % i for i in range(r)]
            + ["disc_m_%d" % i for i in range(r)]
            + ["consensus", "att_logits", "cls_w", "cls_b"]
        )

    def zero_grads(self) -> None:
        for name, p in self.params.items():
            self.grads[name] = np.zeros_like(p)

    def l2(self) -> float:
        return float(sum(np.sum(p * p) for p in self.params.values()))

    def add_l2_grads(self, gamma: float) -> None:
        if gamma == 0.0:
            return
        for name, p in self.params.items():
            self.grads[name] += 2.0 * gamma * p

    def check_finite(self, what: str = "parameter") -> None:
        for name in self.param_order:
            if not np.all(np.isfinite(self.params[name])):
                raise NumericError("non-finite %s: %s" % (what, name))

    def copy_params(self) -> dict:
        return {k: v.copy() for k, v in self.params.items()}

    def load_params(self, params: dict) -> None:
        for name in self.param_order:
            if name not in params:
                raise DataError("missing parameter %s" % name)
            if params[name].shape != self.params[name].shape:
                raise DataError("parameter %s has wrong shape" % name)
            self.params[name] = params[name].copy()

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in self.param_order])

    def unflatten(self, flat: np.ndarray) -> None:
        pos = 0
        for name in self.param_order:
            size = self.params[name].size
            self.params[name] = flat[pos : pos + size].reshape(self.params[name].shape).copy()
            pos += size
        if pos != flat.size:
            raise DataError("flat vector has %d values, expected %d" % (flat.size, pos))


def normalize_adjacency(graph: RelationGraph) -> sp.csr_matrix:
    """Symmetric operator D^-1/2 (A + I) D^-1/2 with degrees from A + I.

    Weighted graphs contribute their weights to A; the self loop is always 1,
    so degrees stay strictly positive.
    """
    n = graph.n
    if graph.edges.size:
        i = graph.edges[:, 0]
        j = graph.edges[:, 1]
        w = graph.weights if graph.weights is not None else np.ones(i.shape[0])
        rows = np.concatenate([i, j, np.arange(n)])
        cols = np.concatenate([j, i, np.arange(n)])
        vals = np.concatenate([w, w, np.ones(n)])
    else:
        rows = cols = np.arange(n)
        vals = np.ones(n)
    a_hat = sp.coo_matrix((vals, (rows, cols)), shape=(n, n))
    deg = np.asarray(a_hat.sum(axis=1)).ravel()
    if np.any(deg <= 0):
        raise NumericError("non-positive degree in normalized adjacency")
    dinv = 1.0 / np.sqrt(deg)
    vals = a_hat.data * dinv[a_hat.row] * dinv[a_hat.col]
    return sp.coo_matrix((vals, (a_hat.row, a_hat.col)), shape=(n, n)).tocsr()


@dataclass
class GcnCache:
    op: sp.csr_matrix
    x: np.ndarray
    w: np.ndarray
    pre: np.ndarray


def gcn_forward(op: sp.csr_matrix, x: np.ndarray, w: np.ndarray):
    """H = relu(op @ X @ W); returns (H, cache)."""
    if x.shape[1] != w.shape[0]:
        raise DataError("input width %d does not match weight rows %d" % (x.shape[1], w.shape[0]))
    if op.shape[0] != x.shape[0]:
        raise DataError("operator size %d does not match %d rows" % (op.shape[0], x.shape[0]))
    pre = op @ (x @ w)
    return np.maximum(pre, 0.0), GcnCache(op, x, w, pre)


def gcn_backward(cache: GcnCache, dh: np.ndarray):
    """Returns (dW, dX). Relies on the operator being symmetric."""
    dpre = np.where(cache.pre > 0.0, dh, 0.0)
    dxw = cache.op @ dpre
    dw = cache.x.T @ dxw
    dx = dxw @ cache.w.T
    return dw, dx


@dataclass
class SummaryCache:
    s: np.ndarray
    n: int


def readout_summary(h: np.ndarray):
    """s = sigmoid(column means of H); returns (s, cache)."""
    s = expit(h.mean(axis=0))
    return s, SummaryCache(s, h.shape[0])


def summary_backward(cache: SummaryCache, ds: np.ndarray) -> np.ndarray:
    row = ds * cache.s * (1.0 - cache.s) / cache.n
    return np.broadcast_to(row, (cache.n, row.shape[0])).copy()


@dataclass
class DiscCache:
    h: np.ndarray
    s: np.ndarray
    m: np.ndarray
    scores: np.ndarray
    ms: np.ndarray


def discriminate(h: np.ndarray, s: np.ndarray, m: np.ndarray):
    """Bilinear probe: sigmoid(h_i^T M s) per row; returns (scores, cache)."""
    if m.shape != (h.shape[1], s.shape[0]):
        raise DataError("discriminator shape mismatch")
    ms = m @ s
    scores = expit(h @ ms)
    return scores, DiscCache(h, s, m, scores, ms)


def discriminate_backward_pre(cache: DiscCache, da: np.ndarray):
    """Backward with gradients already at the pre-sigmoid activations."""
    dh = np.outer(da, cache.ms)
    hda = cache.h.T @ da
    dm = np.outer(hda, cache.s)
    ds = cache.m.T @ hda
    return dh, ds, dm


def discriminate_backward(cache: DiscCache, dscores: np.ndarray):
    """Returns (dh, ds, dm) for gradients arriving at the sigmoid outputs."""
    da = dscores * cache.scores * (1.0 - cache.scores)
    return discriminate_backward_pre(cache, da)


def corrupt_features(x: np.ndarray, seed) -> tuple:
    """Row-shuffled copy of X plus the permutation used (one per step)."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(x.shape[0])
    return x[perm], perm


@dataclass
class PoolCache:
    hs: list
    weights: np.ndarray


def attentive_pool(hs: list, att_logits: np.ndarray):
    """Relation-weighted sum of embeddings, weights = softmax of the logits.

    Returns (pooled, weights, cache). Weights are shared across nodes; they
    are the model's estimate of how informative each relation is.
    """
    if len(hs) != att_logits.shape[0]:
        raise DataError("one attention logit per relation required")
    z = att_logits - att_logits.max()
    e = np.exp(z)
    weights = e / e.sum()
    pooled = np.tensordot(weights, np.stack(hs), axes=1)
    return pooled, weights, PoolCache(list(hs), weights)


def attentive_pool_backward(cache: PoolCache, dpooled: np.ndarray):
    """Returns (dhs list, dlogits)."""
    w = cache.weights
    dhs = [w[r] * dpooled for r in range(w.shape[0])]
    dw = np.array([float(np.sum(dpooled * h)) for h in cache.hs])
    dlogits = w * (dw - float(np.dot(w, dw)))
    return dhs, dlogits


@dataclass
class ClassifyCache:
    o: np.ndarray
    w: np.ndarray
    probs: np.ndarray


def classify(o: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Row-wise softmax of O @ W + b; returns (probs, cache)."""
    if o.shape[1] != w.shape[0]:
        raise DataError("embedding width %d does not match head rows %d" % (o.shape[1], w.shape[0]))
    logits = o @ w + b
    logits = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    probs = e / e.sum(axis=1, keepdims=True)
    return probs, ClassifyCache(o, w, probs)


def classify_backward(cache: ClassifyCache, dprobs: np.ndarray):
    """Returns (do, dw, db) through the softmax and the affine map."""
    p = cache.probs
    dlogits = p * (dprobs - np.sum(dprobs * p, axis=1, keepdims=True))
    dw = cache.o.T @ dlogits
    db = dlogits.sum(axis=0)
    do = dlogits @ cache.w.T
    return do, dw, db


def classify_backward_from_logits(cache: ClassifyCache, dlogits: np.ndarray):
    """Same as classify_backward but with gradients already at the logits."""
    dw = cache.o.T @ dlogits
    db = dlogits.sum(axis=0)
    do = dlogits @ cache.w.T
    return do, dw, db


@dataclass
class ForwardCache:
    """Everything one training step computes before the losses."""

    h: list  # per-relation clean embeddings
    h_tilde: list  # per-relation corrupted embeddings
    summaries: list
    gcn_caches: list
    gcn_caches_tilde: list
    summary_caches: list
    pooled: np.ndarray
    pooled_tilde: np.ndarray
    pool_cache: PoolCache
    pool_cache_tilde: PoolCache
    att_weights: np.ndarray
    perm: np.ndarray


def model_forward(state: ModelState, ops: list, x: np.ndarray, perm: np.ndarray) -> ForwardCache:
    """Run every relation encoder on clean and corrupted inputs, then pool."""
    if len(ops) != state.dims.n_relations:
        raise DataError("operator count does not match n_relations")
    x_tilde = x[perm]
    h, h_t, s_list = [], [], []
    gc, gct, sc = [], [], []
    for r in range(state.dims.n_relations):
        w = state.params["enc_w_%d" % r]
        hr, c1 = gcn_forward(ops[r], x, w)
        ht, c2 = gcn_forward(ops[r], x_tilde, w)
        sr, c3 = readout_summary(hr)
        h.append(hr)
        h_t.append(ht)
        s_list.append(sr)
        gc.append(c1)
        gct.append(c2)
        sc.append(c3)
    pooled, att_w, pc = attentive_pool(h, state.params["att_logits"])
    pooled_t, _, pct = attentive_pool(h_t, state.params["att_logits"])
    return ForwardCache(
        h=h,
        h_tilde=h_t,
        summaries=s_list,
        gcn_caches=gc,
        gcn_caches_tilde=gct,
        summary_caches=sc,
        pooled=pooled,
        pooled_tilde=pooled_t,
        pool_cache=pc,
        pool_cache_tilde=pct,
        att_weights=att_w,
        perm=perm,
    )


def save_checkpoint(path, state: ModelState, config_hash: str = "", extra: dict | None = None):
    """One sorted-key JSON header line, then the little-endian float64 blob."""
    header = {
        "format_version": CHECKPOINT_VERSION,
        "dims": {
            "n_nodes": state.dims.n_nodes,
            "in_dim": state.dims.in_dim,
            "hidden_dim": state.dims.hidden_dim,
            "n_relations": state.dims.n_relations,
            "n_classes": state.dims.n_classes,
        },
        "seed": state.seed,
        "config_hash": config_hash,
        "params": [
            {"name": name, "shape": list(state.params[name].shape)}
            for name in state.param_order
        ],
    }
    if extra:
        header["extra"] = extra
    blob = state.flatten().astype("<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write(blob)


def load_checkpoint(path):
    """Returns (ModelState, header dict). Shape mismatches are hard errors."""
    with open(path, "rb") as fh:
        raw = fh.read()
    nl = raw.find(b"\n")
    if nl < 0:
        raise DataError("%s: missing checkpoint header line" % path)
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError("%s: bad checkpoint header (%s)" % (path, exc)) from None
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise DataError("%s: unsupported checkpoint version %r" % (path, header.get("format_version")))
    d = header["dims"]
    dims = ModelDims(
        n_nodes=d["n_nodes"],
        in_dim=d["in_dim"],
        hidden_dim=d["hidden_dim"],
        n_relations=d["n_relations"],
        n_classes=d["n_classes"],
    )
    state = ModelState(dims, seed=header.get("seed", 0))
    flat = np.frombuffer(raw[nl + 1 :], dtype="<f8")
    expected = sum(np.prod(p["shape"], dtype=int) for p in header["params"])
    if flat.size != expected:
        raise DataError("%s: blob has %d values, header says %d" % (path, flat.size, expected))
    names = [p["name"] for p in header["params"]]
    if names != state.param_order:
        raise DataError("%s: parameter order does not match this version" % path)
    for p in header["params"]:
        if list(state.params[p["name"]].shape) != list(p["shape"]):
            raise DataError("%s: parameter %s has shape %s, expected %s"
                            % (path, p["name"], p["shape"], list(state.params[p["name"]].shape)))
    state.unflatten(flat.astype(np.float64))
    return state, header
