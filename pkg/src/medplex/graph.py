"""Patient-similarity graphs: one relation per feature type, shared node set.

Edges connect pairs whose cosine similarity over a type's columns is strictly
above that type's threshold. All relations see the same patients; only the
edge sets differ.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .data import (
    EmbeddingTable,
    FeatureTable,
    NodeAttributes,
    Normalizer,
    concat_attributes,
    normalize_columns,
    normalize_embeddings,
)
from .clustering import ClusterPartition


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two vectors; zero vectors score 0."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise DataError("cosine_similarity needs vectors of equal length")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    # rounding can push the ratio past +/-1, which must stay unreachable
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def _unit_rows(values: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(values, axis=1, keepdims=True)
    safe = np.where(norms > 0, norms, 1.0)
    return values / safe


def cosine_matrix(a: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """All-pairs cosine similarities between rows of a and rows of b (or a)."""
    a = np.asarray(a, dtype=np.float64)
    ua = _unit_rows(a)
    ub = ua if b is None else _unit_rows(np.asarray(b, dtype=np.float64))
    return np.clip(ua @ ub.T, -1.0, 1.0)


@dataclass
class RelationGraph:
    """Undirected simple graph over n nodes, edges stored once as i < j."""

    n: int
    edges: np.ndarray
    relation_index: int = 0
    threshold: float | None = None
    weights: np.ndarray | None = None

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if self.n < 1:
            raise DataError("graph needs at least one node")
        if self.edges.size:
            if self.edges.min() < 0 or self.edges.max() >= self.n:
                raise DataError("edge endpoint outside [0, n)")
            if np.any(self.edges[:, 0] >= self.edges[:, 1]):
                raise DataError("edges must satisfy i < j (no self loops)")
            keys = self.edges[:, 0] * self.n + self.edges[:, 1]
            if np.unique(keys).size != keys.size:
                raise DataError("duplicate edges")
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=np.float64).ravel()
            if self.weights.shape[0] != self.edges.shape[0]:
                raise DataError("weight count does not match edge count")
            if not np.all(np.isfinite(self.weights)):
                raise DataError("non-finite edge weights")

    @property
    def n_edges(self) -> int:
        return self.edges.shape[0]

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.n, dtype=np.int64)
        if self.edges.size:
            np.add.at(deg, self.edges[:, 0], 1)
            np.add.at(deg, self.edges[:, 1], 1)
        return deg

    def edge_set(self) -> set:
        return {(int(i), int(j)) for i, j in self.edges}


def build_relation_graph(block: np.ndarray, theta: float, relation_index: int = 0) -> RelationGraph:
    """Threshold the all-pairs cosine similarity of block's rows at theta.

    Strict inequality: an edge appears only when similarity > theta, so
    theta = 1.0 yields an edgeless graph even for duplicate rows.
    """
    block = np.asarray(block, dtype=np.float64)
    if block.ndim != 2 or block.shape[1] < 1:
        raise DataError("relation block must be 2-d with at least one column")
    sims = cosine_matrix(block)
    n = block.shape[0]
    iu, ju = np.triu_indices(n, k=1)
    keep = sims[iu, ju] > theta
    edges = np.stack([iu[keep], ju[keep]], axis=1)
    return RelationGraph(n=n, edges=edges, relation_index=relation_index, threshold=float(theta))


def build_weighted_full_graph(block: np.ndarray, relation_index: int = 0) -> RelationGraph:
    """Fully connected variant: every pair gets an edge weighted by similarity.

    Negative similarities clamp to zero so the normalized operator's degrees
    stay positive.
    """
    block = np.asarray(block, dtype=np.float64)
    if block.ndim != 2 or block.shape[1] < 1:
        raise DataError("relation block must be 2-d with at least one column")
    sims = cosine_matrix(block)
    n = block.shape[0]
    iu, ju = np.triu_indices(n, k=1)
    weights = np.maximum(sims[iu, ju], 0.0)
    edges = np.stack([iu, ju], axis=1)
    return RelationGraph(
        n=n, edges=edges, relation_index=relation_index, threshold=None, weights=weights
    )


@dataclass
class MultiplexGraph:
    """All relation graphs plus everything needed to score unseen patients."""

    relations: list[RelationGraph]
    attributes: NodeAttributes
    partition: ClusterPartition
    thetas: tuple
    table: FeatureTable  # normalized features, column order matches partition
    feat_normalizer: Normalizer | None = None
    embed_normalizer: Normalizer | None = None

    def __post_init__(self):
        if not self.relations:
            raise DataError("multiplex graph needs at least one relation")
        n = self.attributes.x.shape[0]
        for g in self.relations:
            if g.n != n:
                raise DataError("relation %d has %d nodes, expected %d" % (g.relation_index, g.n, n))
        if len(self.thetas) != len(self.relations):
            raise DataError("one threshold per relation required")
        if self.table.n_rows != n:
            raise DataError("feature table rows do not match attribute rows")

    @property
    def n_nodes(self) -> int:
        return self.attributes.x.shape[0]

    @property
    def n_relations(self) -> int:
        return len(self.relations)


def build_multiplex(
    table: FeatureTable,
    partition: ClusterPartition,
    thetas,
    embeddings: EmbeddingTable,
    feat_normalizer: Normalizer | None = None,
    embed_normalizer: Normalizer | None = None,
    weighted_full: bool = False,
) -> MultiplexGraph:
    """Build one relation graph per type over an already-normalized table.

    `table` and `embeddings` are expected normalized; pass the fitted
    normalizers so inductive attachment can reuse them.
    """
    if partition.column_names != table.column_names:
        raise DataError("partition was computed on different columns")
    thetas = tuple(float(t) for t in thetas)
    if len(thetas) != partition.n_types:
        raise DataError(
            "%d thresholds for %d types" % (len(thetas), partition.n_types)
        )
    relations = []
    for r in range(partition.n_types):
        block = table.values[:, partition.columns_of(r)]
        if weighted_full:
            relations.append(build_weighted_full_graph(block, relation_index=r))
        else:
            relations.append(build_relation_graph(block, thetas[r], relation_index=r))
    attributes = concat_attributes(embeddings, table)
    return MultiplexGraph(
        relations=relations,
        attributes=attributes,
        partition=partition,
        thetas=thetas,
        table=table,
        feat_normalizer=feat_normalizer,
        embed_normalizer=embed_normalizer,
    )


def attach_new_nodes(
    g: MultiplexGraph,
    new_features: FeatureTable,
    new_embeddings: EmbeddingTable,
) -> MultiplexGraph:
    """Extend the multiplex with unseen patients, appended after existing rows.

    New rows are normalized with the stored training transforms, then linked
    to existing nodes wherever the per-type similarity clears that type's
    threshold. New nodes never link to each other, matching the inductive
    setting where each arrival is scored against the training cohort.
    """
    if g.feat_normalizer is None:
        raise DataError("multiplex graph lacks a stored feature transform")
    if new_features.column_names != g.table.column_names:
        raise DataError("new rows have different feature columns")
    overlap = set(new_features.row_ids) & set(g.table.row_ids)
    if overlap:
        raise DataError("new row ids collide with existing: %s" % sorted(overlap)[:5])
    if new_embeddings.row_ids != new_features.row_ids:
        raise DataError("new embeddings and features disagree on row ids")
    expected_width = g.attributes.n_embed_cols
    if new_embeddings.n_cols != expected_width:
        raise DataError(
            "new embeddings have width %d, trained with %d"
            % (new_embeddings.n_cols, expected_width)
        )

    new_norm, _ = normalize_columns(new_features, g.feat_normalizer)
    if expected_width > 0:
        if g.embed_normalizer is None:
            raise DataError("multiplex graph lacks a stored embedding transform")
        new_emb, _ = normalize_embeddings(new_embeddings, g.embed_normalizer)
    else:
        new_emb = new_embeddings

    n_old = g.n_nodes
    m = new_norm.n_rows
    relations = []
    for r, old in enumerate(g.relations):
        cols = g.partition.columns_of(r)
        sims = cosine_matrix(g.table.values[:, cols], new_norm.values[:, cols])  # (n_old, m)
        if old.weights is not None:
            oi, nj = np.nonzero(np.ones_like(sims, dtype=bool))
            w_new = np.maximum(sims[oi, nj], 0.0)
            edges = np.concatenate([old.edges, np.stack([oi, n_old + nj], axis=1)])
            weights = np.concatenate([old.weights, w_new])
        else:
            oi, nj = np.nonzero(sims > g.thetas[r])
            edges = np.concatenate([old.edges, np.stack([oi, n_old + nj], axis=1)])
            weights = None
        relations.append(
            RelationGraph(
                n=n_old + m,
                edges=edges,
                relation_index=r,
                threshold=old.threshold,
                weights=weights,
            )
        )

    table_ext = FeatureTable(
        values=np.vstack([g.table.values, new_norm.values]),
        column_names=list(g.table.column_names),
        column_kinds=list(g.table.column_kinds),
        row_ids=list(g.table.row_ids) + list(new_norm.row_ids),
    )
    emb_ext = EmbeddingTable(
        values=np.vstack([g.attributes.x[:, :expected_width], new_emb.values]),
        row_ids=table_ext.row_ids,
    )
    attributes = concat_attributes(emb_ext, table_ext)
    return MultiplexGraph(
        relations=relations,
        attributes=attributes,
        partition=g.partition,
        thetas=g.thetas,
        table=table_ext,
        feat_normalizer=g.feat_normalizer,
        embed_normalizer=g.embed_normalizer,
    )


def pairwise_class_similarity(
    table: FeatureTable, labels, columns: np.ndarray | None = None
) -> np.ndarray:
    """Mean cosine similarity between members of class a and class b.

    Diagonal cells average within-class pairs excluding self-similarity, so
    every class needs at least two labeled rows. `columns` restricts the
    similarity to a subset of feature columns (a single type, usually).
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape[0] != table.n_rows:
        raise DataError("labels do not match table rows")
    valid = labels >= 0
    if not valid.any():
        raise DataError("no labeled rows")
    values = table.values if columns is None else table.values[:, np.asarray(columns, dtype=int)]
    u = _unit_rows(values)
    classes = np.unique(labels[valid])
    c = int(classes.max()) + 1
    members = [np.flatnonzero(valid & (labels == k)) for k in range(c)]
    for k, idx in enumerate(members):
        if idx.size < 2:
            raise DataError("class %d has %d labeled rows, need at least 2" % (k, idx.size))
    out = np.empty((c, c))
    for a in range(c):
        ua = u[members[a]]
        for b in range(a, c):
            gram = ua @ u[members[b]].T
            if a == b:
                mm = gram.shape[0]
                val = (gram.sum() - np.trace(gram)) / (mm * (mm - 1))
            else:
                val = gram.mean()
            out[a, b] = val
            out[b, a] = val
    return out


def write_edge_list(path, graph: RelationGraph) -> None:
    """One `i j [weight]` line per edge, i < j, row-major order."""
    with open(path, "w") as fh:
        if graph.weights is None:
            for i, j in graph.edges:
                fh.write("%d %d\n" % (i, j))
        else:
            for (i, j), w in zip(graph.edges, graph.weights):
                fh.write("%d %d %.17g\n" % (i, j, w))


def write_multiplex(out_dir, g: MultiplexGraph) -> dict:
    """Write per-relation edge lists plus a JSON manifest; returns the manifest."""
    os.makedirs(out_dir, exist_ok=True)
    rel_meta = []
    for r, graph in enumerate(g.relations):
        fname = "edges_r%d.txt" % r
        write_edge_list(os.path.join(out_dir, fname), graph)
        deg = graph.degrees()
        rel_meta.append(
            {
                "relation": r,
                "file": fname,
                "threshold": g.thetas[r] if graph.weights is None else None,
                "weighted": graph.weights is not None,
                "n_edges": int(graph.n_edges),
                "mean_degree": float(deg.mean()),
                "isolated_nodes": int((deg == 0).sum()),
                "columns": [g.table.column_names[j] for j in g.partition.columns_of(r)],
            }
        )
    manifest = {
        "n_nodes": g.n_nodes,
        "n_relations": g.n_relations,
        "partition_source": g.partition.source,
        "relations": rel_meta,
    }
    with open(os.path.join(out_dir, "multiplex.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest
