import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from khgrec.graph import (
    INTERACT,
    DataError,
    HypergraphSnapshot,
    InteractionSet,
    build_ckhg,
    build_snapshots,
    kg_from_triples,
    load_interactions,
    load_kg,
    normalized_operator,
    remap_kg,
    smoothing_operator,
    split_dataset,
)
from khgrec.synthetic import make_synthetic


def random_snapshot(rng, max_nodes=10, max_edges=5):
    n = int(rng.integers(1, max_nodes + 1))
    m = int(rng.integers(1, max_edges + 1))
    A = rng.random((n, m)) < 0.4
    nodes, edges = np.nonzero(A)
    w = rng.random(m) + 0.5
    return HypergraphSnapshot("test", n, m, nodes, edges, w)


def dense_theta(snapshot):
    A = snapshot.incidence().toarray()
    w = snapshot.weights
    dv = A @ w
    de = A.sum(axis=0)
    dvi = np.diag([x**-0.5 if x > 0 else 0.0 for x in dv])
    dei = np.diag([1 / x if x > 0 else 0.0 for x in de])
    return np.eye(snapshot.n_nodes) - dvi @ A @ np.diag(w) @ dei @ A.T @ dvi


# ingestion


def test_single_line(tmp_path):
    p = tmp_path / "i.tsv"
    p.write_text("0\t0\n")
    inter = load_interactions(p)
    assert (inter.n_users, inter.n_items, len(inter)) == (1, 1, 1)


def test_duplicate_pair_stored_once(tmp_path):
    p = tmp_path / "i.tsv"
    p.write_text("a\tx\na\tx\nb\ty\n")
    inter = load_interactions(p)
    assert len(inter) == 2
    assert inter.user_ids == {"a": 0, "b": 1}


def test_rating_threshold_and_dense_ids(tmp_path):
    p = tmp_path / "i.tsv"
    p.write_text("10\t5\t4\n11\t6\t2\n11\t5\t5\n")
    inter = load_interactions(p, rating_threshold=3)
    assert inter.user_ids == {"10": 0, "11": 1}
    assert inter.item_ids == {"5": 0}
    assert inter.pairs.tolist() == [[0, 0], [1, 0]]


def test_malformed_line_reports_line_number(tmp_path):
    p = tmp_path / "i.tsv"
    p.write_text("0\t0\n0 1\n")
    with pytest.raises(DataError, match=":2:"):
        load_interactions(p)


def test_empty_file(tmp_path):
    p = tmp_path / "i.tsv"
    p.write_text("")
    with pytest.raises(DataError, match="empty"):
        load_interactions(p)


def test_single_triple_gets_inverse(tmp_path):
    p = tmp_path / "kg.tsv"
    p.write_text("3\t0\t7\n")
    kg = load_kg(p)
    rows = {tuple(t) for t in kg.triples.tolist()}
    # file relation 0 -> canonical 1, inverse 1 + n_canonical
    assert rows == {(3, 1, 7), (7, 1 + kg.n_canonical, 3)}


def test_inverse_closure_doubles_count(tmp_path):
    rng = np.random.default_rng(0)
    raw = set()
    while len(raw) < 10:
        raw.add((int(rng.integers(20)), int(rng.integers(3)), int(rng.integers(20))))
    p = tmp_path / "kg.tsv"
    p.write_text("".join(f"{h}\t{r}\t{t}\n" for h, r, t in raw) + "1\t0\t2\n1\t0\t2\n")
    n_unique = len(raw | {(1, 0, 2)})
    kg = load_kg(p)
    assert len(kg) == 2 * n_unique
    canon = kg.triples[kg.triples[:, 1] < kg.n_canonical]
    inv = kg.triples[kg.triples[:, 1] >= kg.n_canonical]
    assert {(t, r + kg.n_canonical, h) for h, r, t in canon.tolist()} == {tuple(x) for x in inv.tolist()}


def test_ckhg_single_interaction_empty_kg():
    ckhg = build_ckhg(InteractionSet(1, 1, np.array([[0, 0]])), None)
    assert len(ckhg) == 2
    assert ckhg.triples[0].tolist() == [0, INTERACT, 1]


def test_ckhg_entity_count():
    # 3 users; knowledge entities 0..3 where 0 and 1 are the interacted items
    inter = InteractionSet(3, 2, np.array([[0, 0], [1, 1], [2, 0]]))
    kg = kg_from_triples(np.array([[0, 0, 2], [1, 1, 3], [0, 1, 3]]), 2)
    ckhg = build_ckhg(inter, kg)
    assert ckhg.n_entities == 7
    assert ckhg.n_relations == 2 * (2 + 1)
    assert np.count_nonzero(ckhg.node_types == 0) == 3


# snapshots


def test_snapshot_incidence_example():
    # (u1,i1), (u1,i2), (u2,i2) with u1,u2,i1,i2 -> 0,1,0,1
    inter = InteractionSet(2, 2, np.array([[0, 0], [0, 1], [1, 1]]))
    snaps = build_snapshots(build_ckhg(inter, None))
    assert snaps["user"].incidence().toarray().tolist() == [[1, 0], [1, 1]]
    assert snaps["item"].members(1) == {0, 1}


def test_single_interaction_user_edge_size():
    inter = InteractionSet(2, 3, np.array([[0, 0], [0, 1], [1, 2]]))
    g_u = build_snapshots(build_ckhg(inter, None))["user"]
    assert g_u.members(1) == {2}


def test_snapshot_membership_equals_interaction_matrix():
    data = make_synthetic(seed=3)
    inter = InteractionSet(data.n_users, data.n_items, data.train)
    snaps = build_snapshots(build_ckhg(inter, data.kg))
    Y = inter.matrix().toarray()
    assert np.array_equal(snaps["user"].incidence().toarray(), Y.T)
    assert np.array_equal(snaps["item"].incidence().toarray(), Y)


def test_entity_snapshot_groups_tails_by_head():
    data = make_synthetic(seed=1)
    ckhg = build_ckhg(InteractionSet(data.n_users, data.n_items, data.train), data.kg)
    g_e = build_snapshots(ckhg)["entity"]
    expect = {}
    for h, r, t in ckhg.triples.tolist():
        expect.setdefault(h, set()).add((r, t))
    got = {}
    for node, edge, rel in zip(g_e.nodes.tolist(), g_e.edges.tolist(), g_e.relations.tolist()):
        got.setdefault(int(g_e.edge_heads[edge]), set()).add((rel, node))
    assert got == expect


# operators


def test_theta_two_node_example():
    snap = HypergraphSnapshot("t", 2, 1, np.array([0, 1]), np.array([0, 0]), np.ones(1))
    assert np.allclose(normalized_operator(snap).toarray(), [[0.5, -0.5], [-0.5, 0.5]], atol=1e-15)


def test_isolated_node_row_is_identity():
    snap = HypergraphSnapshot("t", 3, 1, np.array([0, 1]), np.array([0, 0]), np.ones(1))
    theta = normalized_operator(snap).toarray()
    assert theta[2].tolist() == [0.0, 0.0, 1.0]
    assert theta[:, 2].tolist() == [0.0, 0.0, 1.0]


@pytest.mark.parametrize("seed", range(50))
def test_theta_symmetric_and_matches_dense(seed):
    snap = random_snapshot(np.random.default_rng(seed))
    theta = normalized_operator(snap).toarray()
    assert np.max(np.abs(theta - theta.T)) <= 1e-10
    assert np.max(np.abs(theta - dense_theta(snap))) <= 1e-10


def test_regular_structure_null_vector():
    # 4-cycle: every node in 2 edges, every edge of size 2
    nodes = np.array([0, 1, 1, 2, 2, 3, 3, 0])
    edges = np.array([0, 0, 1, 1, 2, 2, 3, 3])
    snap = HypergraphSnapshot("t", 4, 4, nodes, edges, np.ones(4))
    assert np.max(np.abs(normalized_operator(snap) @ np.ones(4))) <= 1e-9


def test_smoothing_is_identity_minus_theta():
    snap = random_snapshot(np.random.default_rng(7))
    S = smoothing_operator(snap).toarray()
    assert np.allclose(S, np.eye(snap.n_nodes) - normalized_operator(snap).toarray(), atol=1e-15)
    assert np.allclose(normalized_operator(snap, laplacian=False).toarray(), S)


# split


def _hundred():
    rng = np.random.default_rng(0)
    pairs = set()
    while len(pairs) < 100:
        pairs.add((int(rng.integers(10)), int(rng.integers(50))))
    return InteractionSet(10, 50, np.array(sorted(pairs)))


def test_split_partition_and_sizes():
    inter = _hundred()
    parts = split_dataset(inter, (0.7, 0.1, 0.2), seed=1)
    sets = {k: {tuple(p) for p in v.pairs.tolist()} for k, v in parts.items()}
    assert sets["train"] | sets["validation"] | sets["test"] == {tuple(p) for p in inter.pairs.tolist()}
    assert not (sets["train"] & sets["validation"] or sets["train"] & sets["test"] or sets["validation"] & sets["test"])
    n_users = len(np.unique(inter.pairs[:, 0]))
    assert abs(len(sets["train"]) - 70) <= n_users
    assert abs(len(sets["test"]) - 20) <= n_users


def test_single_interaction_user_in_train():
    inter = InteractionSet(2, 5, np.array([[0, 0], [1, 0], [1, 1], [1, 2], [1, 3]]))
    parts = split_dataset(inter, (0.7, 0.1, 0.2), seed=0)
    assert [0, 0] in parts["train"].pairs.tolist()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_every_user_keeps_a_training_pair(seed):
    rng = np.random.default_rng(seed)
    pairs = np.unique(np.stack([rng.integers(0, 8, 40), rng.integers(0, 30, 40)], axis=1), axis=0)
    inter = InteractionSet(8, 30, pairs)
    parts = split_dataset(inter, (0.5, 0.2, 0.3), seed=seed)
    assert set(np.unique(parts["train"].pairs[:, 0])) == set(np.unique(pairs[:, 0]))


def test_split_is_seeded():
    inter = _hundred()
    a = split_dataset(inter, seed=5)["test"].pairs
    b = split_dataset(inter, seed=5)["test"].pairs
    assert np.array_equal(a, b)


def test_bad_ratios():
    with pytest.raises(ValueError):
        split_dataset(_hundred(), (0.5, 0.5, 0.5))


def test_remap_kg_dense_items():
    kg = kg_from_triples(np.array([[100, 0, 7], [200, 1, 100]]), 2)
    store, remap = remap_kg(kg, {"100": 0, "200": 1}, 2)
    assert remap[100] == 0 and remap[200] == 1 and remap[7] == 2
    assert store.n_entities == 3
    assert len(store) == 4
