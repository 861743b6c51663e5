"""Interaction / knowledge-graph ingestion, the collaborative knowledge hypergraph
and its three snapshots, plus the normalised propagation operators."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

logger = logging.getLogger(__name__)

INTERACT = 0

USER, ITEM, ENTITY = 0, 1, 2
NODE_TYPE_NAMES = ("user", "item", "entity")


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass
class InteractionSet:
    n_users: int
    n_items: int
    pairs: np.ndarray  # (m, 2) int64, unique rows sorted by (user, item)
    user_ids: dict = field(default_factory=dict)  # original id -> dense id
    item_ids: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.pairs)

    def matrix(self):
        """Binary user x item matrix Y as CSR."""
        return pair_matrix(self.pairs, self.n_users, self.n_items)

    def with_pairs(self, pairs):
        return InteractionSet(self.n_users, self.n_items, unique_pairs(pairs), self.user_ids, self.item_ids)


@dataclass
class TripleStore:
    """(head, relation, tail) facts with inverse closure.

    Relation ids: ``0`` is Interact, ``1..n_canonical-1`` are knowledge relations,
    and the inverse of canonical ``r`` is ``r + n_canonical``.
    """

    n_entities: int
    n_canonical: int
    triples: np.ndarray  # (m, 3) int64
    node_types: np.ndarray | None = None  # per-entity USER / ITEM / ENTITY
    n_users: int = 0
    n_items: int = 0

    @property
    def n_relations(self):
        return 2 * self.n_canonical

    def __len__(self):
        return len(self.triples)

    def inverse(self, r):
        r = np.asarray(r)
        return np.where(r < self.n_canonical, r + self.n_canonical, r - self.n_canonical)

    def keys(self):
        """Scalar key per triple for fast membership tests."""
        return triple_keys(self.triples, self.n_relations, self.n_entities)


@dataclass
class HypergraphSnapshot:
    """Incidence structure of one snapshot; ``nodes`` x ``edges`` in COO form.

    For the entity snapshot each incidence also carries the relation label of
    the triple it came from, and ``edge_heads`` names the head entity keying
    each hyperedge.
    """

    kind: str
    n_nodes: int
    n_edges: int
    nodes: np.ndarray
    edges: np.ndarray
    weights: np.ndarray  # per-hyperedge, positive
    relations: np.ndarray | None = None
    edge_heads: np.ndarray | None = None

    @property
    def nnz(self):
        return len(self.nodes)

    def incidence(self):
        return sp.csr_matrix(
            (np.ones(self.nnz), (self.nodes, self.edges)), shape=(self.n_nodes, self.n_edges)
        )

    def members(self, edge):
        return set(self.nodes[self.edges == edge].tolist())

    def subset(self, keep):
        """Snapshot restricted to incidences where ``keep`` is True."""
        return HypergraphSnapshot(
            self.kind,
            self.n_nodes,
            self.n_edges,
            self.nodes[keep],
            self.edges[keep],
            self.weights,
            None if self.relations is None else self.relations[keep],
            self.edge_heads,
        )


def unique_pairs(pairs):
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if len(pairs) == 0:
        return pairs
    return np.unique(pairs, axis=0)


def pair_matrix(pairs, n_rows, n_cols):
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    return sp.csr_matrix(
        (np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n_rows, n_cols)
    )


def triple_keys(triples, n_relations, n_entities):
    triples = np.asarray(triples, dtype=np.int64)
    return (triples[:, 0] * n_relations + triples[:, 1]) * n_entities + triples[:, 2]


def _read_rows(path, min_cols, what):
    path = Path(path)
    rows = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) < min_cols:
                raise DataError(f"{path}:{lineno}: expected at least {min_cols} tab-separated {what} fields")
            rows.append((lineno, parts))
    if not rows:
        raise DataError(f"{path}: empty {what} file")
    return rows


def load_interactions(path, rating_threshold=0.0):
    """Read ``user\\titem[\\trating[\\ttimestamp]]`` lines into a dense-id :class:`InteractionSet`.

    Pairs whose rating is below ``rating_threshold`` are dropped; lines without a
    rating always count. Original ids are re-indexed densely in first-seen order
    after filtering.
    """
    kept = []
    for lineno, parts in _read_rows(path, 2, "interaction"):
        user, item = parts[0].strip(), parts[1].strip()
        if not user or not item:
            raise DataError(f"{path}:{lineno}: empty user or item id")
        if len(parts) >= 3 and parts[2].strip():
            try:
                rating = float(parts[2])
            except ValueError:
                raise DataError(f"{path}:{lineno}: rating {parts[2]!r} is not numeric") from None
            if rating < rating_threshold:
                continue
        kept.append((user, item))
    user_ids, item_ids = {}, {}
    pairs = np.empty((len(kept), 2), dtype=np.int64)
    for j, (user, item) in enumerate(kept):
        pairs[j, 0] = user_ids.setdefault(user, len(user_ids))
        pairs[j, 1] = item_ids.setdefault(item, len(item_ids))
    if not len(pairs):
        raise DataError(f"{path}: no interactions left after rating filter")
    return InteractionSet(len(user_ids), len(item_ids), unique_pairs(pairs), user_ids, item_ids)


def with_inverses(triples, n_canonical):
    """Add ``(t, r + n_canonical, h)`` for every ``(h, r, t)``."""
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    inv = np.stack([triples[:, 2], triples[:, 1] + n_canonical, triples[:, 0]], axis=1)
    return np.concatenate([triples, inv], axis=0)


def load_kg(path):
    """Read ``head\\trelation\\ttail`` integer triples and close them under inverses.

    File relation ``r`` becomes canonical id ``r + 1`` (0 is reserved for Interact).
    Duplicate input triples are stored once.
    """
    raw = []
    for lineno, parts in _read_rows(path, 3, "triple"):
        try:
            raw.append([int(parts[0]), int(parts[1]), int(parts[2])])
        except ValueError:
            raise DataError(f"{path}:{lineno}: triple fields must be integers") from None
    raw = np.unique(np.asarray(raw, dtype=np.int64), axis=0)
    if raw.min() < 0:
        raise DataError(f"{path}: negative ids are not allowed")
    n_canonical = int(raw[:, 1].max()) + 2
    canon = raw.copy()
    canon[:, 1] += 1
    n_entities = int(max(raw[:, 0].max(), raw[:, 2].max())) + 1
    return TripleStore(n_entities, n_canonical, with_inverses(canon, n_canonical))


def kg_from_triples(triples, n_relations, n_entities=None):
    """TripleStore from in-memory raw triples with file-style relation ids ``0..n_relations-1``."""
    triples = np.unique(np.asarray(triples, dtype=np.int64).reshape(-1, 3), axis=0)
    n_canonical = n_relations + 1
    canon = triples.copy()
    canon[:, 1] += 1
    if n_entities is None:
        n_entities = int(triples[:, [0, 2]].max()) + 1 if len(triples) else 0
    return TripleStore(n_entities, n_canonical, with_inverses(canon, n_canonical))


def canonical_triples(store):
    return store.triples[store.triples[:, 1] < store.n_canonical]


def build_ckhg(interactions, kg, item_ids=None):
    """Unify interactions and knowledge triples into one store over users, items and entities.

    Entity ids are offset-partitioned: users ``[0, U)``, items ``[U, U+I)``,
    remaining knowledge entities after that. A knowledge id is an item when it
    is a key of ``item_ids`` (original item id -> dense id); without a mapping,
    knowledge ids ``< n_items`` are taken to be the dense item ids.
    """
    U, I = interactions.n_users, interactions.n_items
    kg_canon = canonical_triples(kg) if kg is not None else np.empty((0, 3), dtype=np.int64)
    n_canonical = kg.n_canonical if kg is not None else 1
    kg_ids = np.unique(kg_canon[:, [0, 2]]) if len(kg_canon) else np.empty(0, dtype=np.int64)

    remap = {}
    if item_ids is not None:
        for orig, dense in item_ids.items():
            try:
                remap[int(orig)] = U + dense
            except ValueError:
                continue
    else:
        for k in kg_ids[kg_ids < I]:
            remap[int(k)] = U + int(k)
    next_id = U + I
    for k in kg_ids:
        k = int(k)
        if k not in remap:
            remap[k] = next_id
            next_id += 1
    n_entities = next_id

    mapped = np.array(
        [[remap[int(h)], r, remap[int(t)]] for h, r, t in kg_canon], dtype=np.int64
    ).reshape(-1, 3)
    pairs = interactions.pairs
    interact = np.stack([pairs[:, 0], np.zeros(len(pairs), dtype=np.int64), pairs[:, 1] + U], axis=1)
    canon = np.concatenate([interact, mapped], axis=0)

    node_types = np.full(n_entities, ENTITY, dtype=np.int64)
    node_types[:U] = USER
    node_types[U : U + I] = ITEM
    users_in_kg = mapped[:, [0, 2]] < U if len(mapped) else np.zeros((0, 2), bool)
    if users_in_kg.any():
        raise DataError("knowledge triples reference the user id range")
    if len(pairs) and (pairs[:, 0].max() >= U or pairs[:, 1].max() >= I):
        raise DataError("interaction ids exceed the declared user/item counts")

    return TripleStore(
        n_entities,
        n_canonical,
        with_inverses(canon, n_canonical),
        node_types=node_types,
        n_users=U,
        n_items=I,
    )


def build_snapshots(ckhg, weights=None):
    """Decompose the CKHG into the user, item and entity snapshots.

    ``user``   : item nodes, one hyperedge per user (items that user interacted with).
    ``item``   : user nodes, one hyperedge per item (users that interacted with it).
    ``entity`` : all CKHG nodes, one hyperedge per head entity grouping the tails
                 of its triples; relation labels kept per incidence.

    ``weights`` optionally maps a snapshot kind to a per-hyperedge weight array.
    """
    weights = weights or {}
    U, I = ckhg.n_users, ckhg.n_items
    tr = ckhg.triples
    inter = tr[tr[:, 1] == INTERACT]
    users, items = inter[:, 0], inter[:, 2] - U

    def w(kind, n):
        arr = np.asarray(weights.get(kind, np.ones(n)), dtype=np.float64)
        if arr.shape != (n,) or np.any(arr <= 0):
            raise DataError(f"{kind} snapshot weights must be {n} positive values")
        return arr

    g_u = HypergraphSnapshot("user", I, U, items.copy(), users.copy(), w("user", U))
    g_i = HypergraphSnapshot("item", U, I, users.copy(), items.copy(), w("item", I))

    order = np.lexsort((tr[:, 2], tr[:, 1], tr[:, 0]))
    tr = tr[order]
    heads, edge_of = np.unique(tr[:, 0], return_inverse=True)
    g_e = HypergraphSnapshot(
        "entity",
        ckhg.n_entities,
        len(heads),
        tr[:, 2].copy(),
        edge_of.astype(np.int64),
        w("entity", len(heads)),
        relations=tr[:, 1].copy(),
        edge_heads=heads,
    )
    return {"user": g_u, "item": g_i, "entity": g_e}


def _inv_sqrt(x):
    out = np.zeros_like(x, dtype=np.float64)
    pos = x > 0
    out[pos] = x[pos] ** -0.5
    return out


def _inv(x):
    out = np.zeros_like(x, dtype=np.float64)
    pos = x > 0
    out[pos] = 1.0 / x[pos]
    return out


def smoothing_operator(snapshot):
    """D_v^{-1/2} A W D_e^{-1} A^T D_v^{-1/2}, zero-degree entries pseudo-inverted."""
    A = snapshot.incidence()
    w = snapshot.weights
    dv = np.asarray(A @ w).ravel()
    de = np.asarray(A.sum(axis=0)).ravel()
    dvi = sp.diags(_inv_sqrt(dv))
    middle = sp.diags(w * _inv(de))
    return (dvi @ A @ middle @ A.T @ dvi).tocsr()


def normalized_operator(snapshot, laplacian=True):
    """Theta = I - smoothing (``laplacian=True``) or the smoothing operator itself."""
    S = smoothing_operator(snapshot)
    if not laplacian:
        return S
    return (sp.identity(snapshot.n_nodes, format="csr") - S).tocsr()


def clique_mean_operator(snapshot):
    """Row-normalised adjacency of the clique expansion (self included for covered nodes)."""
    A = snapshot.incidence()
    C = (A @ A.T).tocsr()
    C.data[:] = 1.0
    isolated = np.asarray(C.sum(axis=1)).ravel() == 0
    C = C + sp.diags(isolated.astype(np.float64))
    return (sp.diags(_inv(np.asarray(C.sum(axis=1)).ravel())) @ C).tocsr()


def neighborhoods(snapshot):
    """Pairs (node, neighbour) for nodes sharing a hyperedge, self always included."""
    A = snapshot.incidence()
    C = (A @ A.T).tocoo()
    eye = np.arange(snapshot.n_nodes)
    dst = np.concatenate([C.row, eye])
    src = np.concatenate([C.col, eye])
    pairs = np.unique(np.stack([dst, src], axis=1), axis=0)
    return pairs[:, 0], pairs[:, 1]


def split_dataset(interactions, ratios=(0.7, 0.1, 0.2), seed=0):
    """Per-user random split into train / validation / test.

    Every user keeps at least one training interaction; when rounding would
    leave none, one is moved from test (then validation).
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"split ratios must be three non-negative values summing to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    pairs = interactions.pairs
    order = np.argsort(pairs[:, 0], kind="stable")
    pairs = pairs[order]
    starts = np.flatnonzero(np.r_[True, pairs[1:, 0] != pairs[:-1, 0]])
    ends = np.r_[starts[1:], len(pairs)]
    parts = ([], [], [])
    for s, e in zip(starts, ends):
        block = pairs[s:e][rng.permutation(e - s)]
        n = e - s
        n_val = int(np.floor(n * ratios[1] + 0.5))
        n_test = int(np.floor(n * ratios[2] + 0.5))
        while n - n_val - n_test < 1:
            if n_test > 0:
                n_test -= 1
            else:
                n_val -= 1
        n_train = n - n_val - n_test
        parts[0].append(block[:n_train])
        parts[1].append(block[n_train : n_train + n_val])
        parts[2].append(block[n_train + n_val :])
    return {
        name: interactions.with_pairs(np.concatenate(chunks) if chunks else np.empty((0, 2)))
        for name, chunks in zip(("train", "validation", "test"), parts)
    }


def write_id_map(mapping, path):
    with Path(path).open("w", encoding="utf-8") as fh:
        for orig, dense in sorted(mapping.items(), key=lambda kv: kv[1]):
            fh.write(f"{orig}\t{dense}\n")


def write_pairs(pairs, path):
    np.savetxt(path, np.asarray(pairs, dtype=np.int64).reshape(-1, 2), fmt="%d", delimiter="\t")


def read_pairs(path):
    arr = np.loadtxt(path, dtype=np.int64, delimiter="\t", ndmin=2)
    return arr.reshape(-1, 2)


def remap_kg(kg, item_ids, n_items):
    """Re-express a raw-id store so items use dense ids ``0..n_items-1``.

    ``item_ids`` maps original item ids (as read from the interactions file) to
    dense ids. Knowledge ids that are not interacted items get ids from ``n_items`` on.
    """
    canon = canonical_triples(kg)
    lookup = {}
    for orig, dense in item_ids.items():
        try:
            lookup[int(orig)] = dense
        except ValueError:
            continue
    ids = np.unique(canon[:, [0, 2]]) if len(canon) else np.empty(0, dtype=np.int64)
    remap = {}
    nxt = n_items
    for k in ids:
        k = int(k)
        if k in lookup:
            remap[k] = lookup[k]
        else:
            remap[k] = nxt
            nxt += 1
    mapped = np.array([[remap[int(h)], r, remap[int(t)]] for h, r, t in canon], dtype=np.int64).reshape(-1, 3)
    return TripleStore(nxt, kg.n_canonical, with_inverses(mapped, kg.n_canonical)), remap
