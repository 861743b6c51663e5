"""Small random hypergraphs, parameter sets and dense re-implementations used as oracles."""

import math

import numpy as np

from khgrec import autodiff as ad
from khgrec.encoders import prepare_global, prepare_local
from khgrec.graph import HypergraphSnapshot


def random_snapshot(rng, max_nodes=10, max_edges=5, p=0.4):
    n = int(rng.integers(2, max_nodes + 1))
    m = int(rng.integers(1, max_edges + 1))
    A = rng.random((n, m)) < p
    A[rng.integers(0, n), :] |= ~A.any(axis=0)  # no empty hyperedge
    nodes, edges = np.nonzero(A)
    return HypergraphSnapshot("test", n, m, nodes, edges, rng.random(m) + 0.5)


def random_entity_snapshot(rng, max_nodes=10, max_edges=5, n_relations=3):
    """Entity-style snapshot: each hyperedge keyed by a head node, tails labelled by relation."""
    n = int(rng.integers(3, max_nodes + 1))
    m = int(rng.integers(1, min(max_edges, n) + 1))
    heads = np.sort(rng.choice(n, size=m, replace=False))
    nodes, edges, rels = [], [], []
    for e, h in enumerate(heads):
        others = np.delete(np.arange(n), h)
        k = int(rng.integers(1, min(4, len(others)) + 1))
        for t in rng.choice(others, size=k, replace=False):
            nodes.append(t)
            edges.append(e)
            rels.append(int(rng.integers(n_relations)))
    return HypergraphSnapshot(
        "entity", n, m, np.array(nodes), np.array(edges), rng.random(m) + 0.5, np.array(rels), heads
    )


def local_params(rng, d, scale=0.5):
    return {
        "Q": ad.parameter(rng.normal(size=(d, d)) * scale),
        "K": ad.parameter(rng.normal(size=(d, d)) * scale),
        "V": ad.parameter(rng.normal(size=(d, d)) * scale),
        "W1": ad.parameter(rng.normal(size=(d, d)) * scale),
        "b1": ad.parameter(rng.normal(size=d) * 0.1),
        "W2": ad.parameter(rng.normal(size=(d, d)) * scale),
        "b2": ad.parameter(rng.normal(size=d) * 0.1),
        "P": ad.parameter(rng.normal(size=(d, d)) * scale),
    }


def relation_params(rng, n_relations, d, scale=0.5):
    W = ad.parameter(rng.normal(size=(n_relations, d, d)) * scale)
    e = ad.parameter(rng.normal(size=(n_relations, d)) * scale)
    return W, e


def local_graph(snapshot, laplacian=True, dense=True):
    return prepare_local(snapshot, laplacian=laplacian, dense_limit=10**6 if dense else 0)


def global_graph(snapshot):
    return prepare_global(snapshot)


# dense oracles


def leaky(x):
    return np.where(x > 0, x, 0.2 * x)


def layer_norm(x, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def dense_theta(snapshot, laplacian=True):
    A = snapshot.incidence().toarray()
    return dense_theta_from(A, snapshot.weights, laplacian)


def dense_theta_from(A, w, laplacian=True):
    dv = A @ w
    de = A.sum(axis=0)
    dvi = np.diag([x**-0.5 if x > 0 else 0.0 for x in dv])
    dei = np.diag([1 / x if x > 0 else 0.0 for x in de])
    S = dvi @ A @ np.diag(w) @ dei @ A.T @ dvi
    return np.eye(A.shape[0]) - S if laplacian else S


def dense_attention(H, A, Q, K, V):
    """Neighbourhood-masked attention aggregate: neighbours share a hyperedge, self always included."""
    n, d = H.shape
    mask = (A @ A.T) > 0
    mask[np.arange(n), np.arange(n)] = True
    out = np.zeros((n, V.shape[1]))
    for v in range(n):
        nb = np.flatnonzero(mask[v])
        s = np.array([(H[v] @ Q) @ (H[u] @ K) for u in nb]) / np.sqrt(d)
        a = np.exp(s - s.max())
        a /= a.sum()
        out[v] = sum(a_j * (H[u] @ V) for a_j, u in zip(a, nb))
    return out


def dense_hgtn_layer(H, snapshot, p, laplacian=True):
    A = snapshot.incidence().toarray()
    H1 = layer_norm(H + dense_attention(H, A, p["Q"], p["K"], p["V"]))
    H2 = layer_norm(H1 + leaky(H1 @ p["W1"] + p["b1"]) @ p["W2"] + p["b2"])
    return leaky(dense_theta(snapshot, laplacian) @ H2 @ p["P"])


def dense_pi(X, snapshot, W, e):
    heads = snapshot.edge_heads[snapshot.edges]
    raw = np.array([
        (W[r] @ X[t]) @ np.tanh(W[r] @ X[h] + e[r])
        for h, r, t in zip(heads, snapshot.relations, snapshot.nodes)
    ])
    pi = np.zeros_like(raw)
    for edge in range(snapshot.n_edges):
        sel = snapshot.edges == edge
        z = np.exp(raw[sel] - raw[sel].max())
        pi[sel] = z / z.sum()
    return raw, pi


def dense_rhgat_layer(H, snapshot, pi, P):
    A = np.zeros((snapshot.n_nodes, snapshot.n_edges))
    for v, edge, w in zip(snapshot.nodes, snapshot.edges, pi):
        A[v, edge] += w
    return leaky(dense_theta_from(A, snapshot.weights, laplacian=False) @ H @ P)


# ranking oracle


def brute_force(scores, train, target, ks):
    """Per-user loop with a Python sort: highest score first, lower item id on ties."""
    n_users, n_items = scores.shape
    seen = {}
    for u, i in train:
        seen.setdefault(int(u), set()).add(int(i))
    relevant = {}
    for u, i in target:
        relevant.setdefault(int(u), set()).add(int(i))
    rec = {k: [] for k in ks}
    nd = {k: [] for k in ks}
    for u in sorted(relevant):
        cand = [i for i in range(n_items) if i not in seen.get(u, set())]
        ranked = sorted(cand, key=lambda i: (-scores[u, i], i))
        rel = relevant[u]
        for k in ks:
            top = ranked[:k]
            hits = [1 if i in rel else 0 for i in top]
            rec[k].append(sum(hits) / len(rel))
            dcg = sum(h / math.log2(r + 2) for r, h in enumerate(hits))
            idcg = sum(1 / math.log2(r + 2) for r in range(min(len(rel), k)))
            nd[k].append(dcg / idcg)
    return {k: float(np.mean(v)) for k, v in rec.items()}, {k: float(np.mean(v)) for k, v in nd.items()}


def random_ranking_fixture(seed):
    rng = np.random.default_rng(seed)
    n_users, n_items = int(rng.integers(2, 12)), int(rng.integers(5, 40))
    # coarse scores so ties actually occur
    scores = rng.integers(0, 6, size=(n_users, n_items)).astype(float)
    pairs = np.unique(np.stack([rng.integers(0, n_users, 80), rng.integers(0, n_items, 80)], axis=1), axis=0)
    mask = rng.random(len(pairs)) < 0.5
    return scores, pairs[mask], pairs[~mask]
