"""Local self-aware (hypergraph transformer) and global relation-aware hypergraph encoders."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .graph import clique_mean_operator, neighborhoods, normalized_operator

DENSE_ATTENTION_LIMIT = 4096


@dataclass
class EncoderOutput:
    layers: list  # hidden states H^(0..L)
    output: ad.Tensor  # H^(L) + residual


@dataclass
class LocalGraph:
    """Precomputed structure for running the local encoder on one snapshot."""

    n_nodes: int
    operator: object  # scipy sparse, |V| x |V|
    dst: np.ndarray  # attention pairs: node <- neighbour
    src: np.ndarray
    mask: np.ndarray | None  # dense boolean neighbourhood mask when small enough


def prepare_local(snapshot, laplacian=True, simple_conv=False, dense_limit=DENSE_ATTENTION_LIMIT):
    if simple_conv:
        op = clique_mean_operator(snapshot)
    else:
        op = normalized_operator(snapshot, laplacian=laplacian)
    dst, src = neighborhoods(snapshot)
    mask = None
    if snapshot.n_nodes <= dense_limit:
        mask = np.zeros((snapshot.n_nodes, snapshot.n_nodes), dtype=bool)
        mask[dst, src] = True
    return LocalGraph(snapshot.n_nodes, op, dst, src, mask)


def self_attention(H, graph, params):
    """Scaled dot-product attention restricted to hypergraph neighbourhoods.

    Returns ``LayerNorm(H + sum_n alpha_vn * (H V)_n)``.
    """
    d = H.shape[1]
    if d == 0:
        raise ValueError("self_attention: embedding dimension is 0")
    return ad.layer_norm(H + attend(H, graph, params))


def attend(H, graph, params):
    """The attention aggregate alone (no residual, no normalisation)."""
    d = H.shape[1]
    q = H @ params["Q"]
    k = H @ params["K"]
    v = H @ params["V"]
    scale = 1.0 / np.sqrt(d)
    if graph.mask is not None:
        scores = (q @ k.T) * scale
        alpha = ad.masked_softmax(scores, graph.mask)
        return alpha @ v
    scores = ad.sum(ad.gather(q, graph.dst) * ad.gather(k, graph.src), axis=1) * scale
    alpha = ad.segment_softmax(scores, graph.dst, graph.n_nodes)
    msg = ad.reshape(alpha, (-1, 1)) * ad.gather(v, graph.src)
    return ad.scatter_add(msg, graph.dst, graph.n_nodes)


def transition(H, params):
    """``LayerNorm(H + FFN(H))`` with a two-layer leaky-ReLU feed-forward network."""
    hidden = ad.leaky_relu(H @ params["W1"] + params["b1"])
    return ad.layer_norm(H + (hidden @ params["W2"] + params["b2"]))


def hgconv(H, operator, P):
    if operator.shape[1] != H.shape[0] or P.shape[0] != H.shape[1]:
        raise ad.ShapeError("hgconv", operator.shape, H.shape, P.shape)
    return ad.leaky_relu(ad.sparse_matmul(operator, H) @ P)


def hgtn_forward(graph, X, layers):
    """Stacked attention -> transition -> convolution layers with an identity residual."""
    if len(layers) < 1:
        raise ValueError("hgtn_forward needs at least one layer")
    states = [X]
    H = X
    for params in layers:
        H = transition(self_attention(H, graph, params), params)
        H = hgconv(H, graph.operator, params["P"])
        states.append(H)
    return EncoderOutput(states, H + X)


@dataclass
class GlobalGraph:
    """Entity-snapshot incidences: tail ``nodes`` inside hyperedge ``edges`` keyed by ``heads``."""

    n_nodes: int
    n_edges: int
    nodes: np.ndarray
    edges: np.ndarray
    heads: np.ndarray
    relations: np.ndarray
    weights: np.ndarray
    simple_operator: object = None


def prepare_global(snapshot, simple_conv=False):
    return GlobalGraph(
        snapshot.n_nodes,
        snapshot.n_edges,
        snapshot.nodes,
        snapshot.edges,
        snapshot.edge_heads[snapshot.edges],
        snapshot.relations,
        snapshot.weights,
        clique_mean_operator(snapshot) if simple_conv else None,
    )


def _check_relations(relations, W_rel):
    relations = np.asarray(relations, dtype=np.int64)
    n = W_rel.shape[0]
    if relations.size and (relations.min() < 0 or relations.max() >= n):
        bad = relations[(relations < 0) | (relations >= n)][0]
        raise KeyError(f"unknown relation id {int(bad)} (have {n})")
    return relations


def _by_relation(relations, fn):
    """Evaluate ``fn(positions, r) -> Tensor`` per relation group, reassembled in input order."""
    if len(relations) == 0:
        return ad.Tensor(np.zeros(0))
    order = np.argsort(relations, kind="stable")
    sorted_rel = relations[order]
    cuts = np.flatnonzero(np.r_[True, sorted_rel[1:] != sorted_rel[:-1]])
    ends = np.r_[cuts[1:], len(order)]
    pieces = [fn(order[s:e], int(sorted_rel[s])) for s, e in zip(cuts, ends)]
    stacked = pieces[0] if len(pieces) == 1 else ad.concat(pieces, axis=0)
    inverse = np.empty_like(order)
    inverse[order] = np.arange(len(order))
    return ad.gather(stacked, inverse)


def _relation_matrix(W_rel, r):
    d = W_rel.shape[1]
    return ad.reshape(ad.gather(W_rel, [r]), (d, d))


def _relation_vector(e_rel, r):
    return ad.gather(e_rel, [r])


def attention_scores(X, heads, relations, tails, W_rel, e_rel):
    """Unnormalised impact factors ``(W_r e_t)^T tanh(W_r e_h + e_r)`` for many triples."""
    relations = _check_relations(relations, W_rel)
    heads = np.asarray(heads, dtype=np.int64)
    tails = np.asarray(tails, dtype=np.int64)

    def group(pos, r):
        Wt = ad.transpose(_relation_matrix(W_rel, r))
        gate = ad.tanh(ad.gather(X, heads[pos]) @ Wt + _relation_vector(e_rel, r))
        return ad.sum((ad.gather(X, tails[pos]) @ Wt) * gate, axis=1)

    return _by_relation(relations, group)


def relational_attention(e_h, r, e_t, W_rel, e_rel):
    """Impact factor of one triple given head/tail embedding vectors."""
    X = ad.concat([ad.reshape(ad.as_tensor(e_h), (1, -1)), ad.reshape(ad.as_tensor(e_t), (1, -1))])
    return ad.reshape(attention_scores(X, [0], [r], [1], W_rel, e_rel), ())


def normalize_attention(scores, segments, n_segments):
    """Softmax of impact factors within each head's ego-network."""
    segments = np.asarray(segments, dtype=np.int64)
    counts = np.bincount(segments, minlength=n_segments)
    if np.any(counts == 0):
        raise ValueError(f"empty neighbourhood for head segment {int(np.flatnonzero(counts == 0)[0])}")
    return ad.segment_softmax(scores, segments, n_segments)


def relation_aware_weights(X, graph, W_rel, e_rel):
    """Normalised attention pi per incidence of the entity snapshot."""
    scores = attention_scores(X, graph.heads, graph.relations, graph.nodes, W_rel, e_rel)
    return ad.segment_softmax(scores, graph.edges, graph.n_edges)


def attentive_incidence(graph, pi):
    """Nonzeros of the gated incidence B∘A: (values, node rows, edge cols)."""
    if pi.shape[0] != len(graph.nodes):
        raise ad.ShapeError("attentive_incidence", pi.shape, graph.nodes.shape)
    return pi, graph.nodes, graph.edges


def attentive_smoothing(H, graph, pi):
    """``D_v^{-1/2} Ã W D_e^{-1} Ã^T D_v^{-1/2} H`` with degrees taken from Ã."""
    values, rows, cols = attentive_incidence(graph, pi)
    w = graph.weights
    dv = ad.scatter_add(values * w[cols], rows, graph.n_nodes)
    de = ad.scatter_add(values, cols, graph.n_edges)
    dv_is = ad.reshape(ad.safe_pow(dv, -0.5), (-1, 1))
    edge_scale = ad.reshape(ad.safe_pow(de, -1.0) * w, (-1, 1))
    E = ad.spmm(values, cols, rows, graph.n_edges, H * dv_is) * edge_scale
    return ad.spmm(values, rows, cols, graph.n_nodes, E) * dv_is


def rhgat_conv(H, graph, pi, P):
    return ad.leaky_relu(attentive_smoothing(H, graph, pi) @ P)


def rhgat_forward(graph, X, W_rel, e_rel, Ps, pi=None):
    """Stacked relation-aware hypergraph attention convolutions with identity residual.

    Attention weights are computed once per call from the current ``X`` unless
    given. With ``graph.simple_operator`` set, the attention-gated operator is
    swapped for plain clique-expansion averaging.
    """
    if len(Ps) < 1:
        raise ValueError("rhgat_forward needs at least one layer")
    if pi is None and graph.simple_operator is None:
        pi = relation_aware_weights(X, graph, W_rel, e_rel)
    states = [X]
    H = X
    for P in Ps:
        if graph.simple_operator is not None:
            H = hgconv(H, graph.simple_operator, P)
        else:
            H = rhgat_conv(H, graph, pi, P)
        states.append(H)
    return EncoderOutput(states, H + X), pi


def transr_energy(X, heads, relations, tails, W_rel, e_rel):
    """``||W_r e_h + e_r - W_r e_t||^2`` per triple."""
    relations = _check_relations(relations, W_rel)
    heads = np.asarray(heads, dtype=np.int64)
    tails = np.asarray(tails, dtype=np.int64)
    n = X.shape[0]
    for ids in (heads, tails):
        if ids.size and (ids.min() < 0 or ids.max() >= n):
            raise KeyError(f"unknown entity id (have {n} entities)")

    def group(pos, r):
        diff = ad.gather(X, heads[pos]) - ad.gather(X, tails[pos])
        proj = diff @ ad.transpose(_relation_matrix(W_rel, r)) + _relation_vector(e_rel, r)
        return ad.sum(ad.square(proj), axis=1)

    return _by_relation(relations, group)


def kg_loss(energy_pos, energy_neg, reduction="sum"):
    """Pairwise ranking loss ``-ln sigmoid(delta(neg) - delta(pos))``."""
    terms = ad.neg(ad.log_sigmoid(energy_neg - energy_pos))
    return ad.sum(terms) if reduction == "sum" else ad.mean(terms)
