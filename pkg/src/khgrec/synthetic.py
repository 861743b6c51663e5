"""Small planted-community datasets for smoke tests and desk-scale acceptance runs."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .graph import InteractionSet, kg_from_triples, split_dataset, unique_pairs
from .trainer import Dataset

RELATIONS = ("in_community", "in_subgroup", "directed_by", "has_genre", "related_to")


def community_interactions(n_users=200, n_items=100, n_communities=2, n_subgroups=5, seed=0,
                           per_user=(12, 20), p_subgroup=0.6, p_community=0.3):
    """Users and items split into communities, each further split into subgroups.

    A user draws most items from its own subgroup, some from the rest of its
    community and the remainder uniformly at random. Returns ``(pairs, item_community,
    item_subgroup)`` where subgroup ids are global.
    """
    rng = np.random.default_rng(seed)
    item_comm = np.arange(n_items) * n_communities // n_items
    item_sub = np.zeros(n_items, dtype=np.int64)
    for c in range(n_communities):
        idx = np.flatnonzero(item_comm == c)
        item_sub[idx] = c * n_subgroups + np.arange(len(idx)) * n_subgroups // len(idx)
    user_comm = np.arange(n_users) * n_communities // n_users
    user_sub = user_comm * n_subgroups + rng.integers(0, n_subgroups, size=n_users)
    # mild within-group popularity skew
    weight = 1.0 / (1.0 + rng.permutation(n_items) % 10) ** 0.5
    pairs = []
    for u in range(n_users):
        n = int(rng.integers(per_user[0], per_user[1] + 1))
        own = np.flatnonzero(item_sub == user_sub[u])
        comm = np.flatnonzero((item_comm == user_comm[u]) & (item_sub != user_sub[u]))
        chosen = set()
        while len(chosen) < n:
            x = rng.random()
            pool = own if x < p_subgroup else comm if x < p_subgroup + p_community else np.arange(n_items)
            p = weight[pool] / weight[pool].sum()
            chosen.add(int(rng.choice(pool, p=p)))
        pairs.extend((u, i) for i in chosen)
    return unique_pairs(pairs), item_comm, item_sub


def community_kg(item_comm, item_sub, seed=0, n_genres_per_comm=3, n_directors_per_sub=2):
    """Five-relation knowledge graph over items that mirrors the planted groups.

    Entity ids: items keep ``0..n_items-1``; other entities follow.
    """
    rng = np.random.default_rng(seed + 7919)
    n_items = len(item_comm)
    n_comm = int(item_comm.max()) + 1
    n_sub = int(item_sub.max()) + 1
    base = n_items
    comm_ent = base + np.arange(n_comm)
    base += n_comm
    sub_ent = base + np.arange(n_sub)
    base += n_sub
    dir_ent = base + np.arange(n_sub * n_directors_per_sub)
    base += n_sub * n_directors_per_sub
    genre_ent = base + np.arange(n_comm * n_genres_per_comm)
    triples = []
    for i in range(n_items):
        c, s = int(item_comm[i]), int(item_sub[i])
        triples.append((i, 0, comm_ent[c]))
        triples.append((i, 1, sub_ent[s]))
        triples.append((i, 2, dir_ent[s * n_directors_per_sub + int(rng.integers(n_directors_per_sub))]))
        g = c * n_genres_per_comm + int(rng.integers(n_genres_per_comm))
        if rng.random() < 0.1:
            g = int(rng.integers(n_comm * n_genres_per_comm))
        triples.append((i, 3, genre_ent[g]))
        mates = np.flatnonzero((item_sub == s) & (np.arange(n_items) != i))
        if len(mates):
            triples.append((i, 4, int(rng.choice(mates))))
    return kg_from_triples(np.array(triples), len(RELATIONS), n_entities=base + n_comm * n_genres_per_comm)


def make_synthetic(n_users=200, n_items=100, seed=0, ratios=(0.7, 0.1, 0.2), **kwargs):
    """Split planted-community dataset with its knowledge graph."""
    pairs, item_comm, item_sub = community_interactions(n_users, n_items, seed=seed, **kwargs)
    inter = InteractionSet(n_users, n_items, pairs)
    parts = split_dataset(inter, ratios, seed=seed)
    kg = community_kg(item_comm, item_sub, seed=seed)
    return Dataset(n_users, n_items, parts["train"].pairs, parts["validation"].pairs, parts["test"].pairs, kg)


def write_synthetic_files(out_dir, n_users=200, n_items=100, seed=0):
    """Write ``interactions.tsv`` and ``kg.tsv`` in the raw ingestion formats."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pairs, item_comm, item_sub = community_interactions(n_users, n_items, seed=seed)
    kg = community_kg(item_comm, item_sub, seed=seed)
    with (out_dir / "interactions.tsv").open("w") as fh:
        for u, i in pairs:
            fh.write(f"{u}\t{i}\t1\n")
    canon = kg.triples[(kg.triples[:, 1] > 0) & (kg.triples[:, 1] < kg.n_canonical)]
    with (out_dir / "kg.tsv").open("w") as fh:
        for h, r, t in canon:
            fh.write(f"{h}\t{r - 1}\t{t}\n")
    return out_dir / "interactions.tsv", out_dir / "kg.tsv"
