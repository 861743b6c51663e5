"""Top-k ranking metrics, full-ranking evaluation and the robustness protocols."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .graph import pair_matrix, unique_pairs

DEFAULT_KS = (10, 20, 40)


def recall_at_k(ranked, relevant, k):
    """Fraction of ``relevant`` items found in the first ``k`` of ``ranked``.

    Returns ``None`` for an empty relevant set (the user is skipped).
    """
    relevant = set(relevant)
    if not relevant:
        return None
    return len(relevant.intersection(list(ranked)[:k])) / len(relevant)


def ndcg_at_k(ranked, relevant, k):
    """Binary-relevance NDCG with a ``log2(rank + 1)`` discount."""
    relevant = set(relevant)
    if not relevant:
        return None
    dcg = sum(1.0 / math.log2(i + 2) for i, item in enumerate(list(ranked)[:k]) if item in relevant)
    idcg = sum(1.0 / math.log2(i + 2) for i in range(min(len(relevant), k)))
    return dcg / idcg


def rank_items(scores, exclude=None):
    """Item ids of each score row, best first; ties go to the smaller item id.

    ``exclude`` is a boolean mask of the same shape whose items are dropped
    from consideration (sent to the end with -inf).
    """
    scores = np.array(scores, dtype=np.float64, copy=True)
    if exclude is not None:
        scores[exclude] = -np.inf
    return np.argsort(-scores, axis=1, kind="stable")


def topk_metrics(scores, train, target, ks=DEFAULT_KS, users=None, chunk=1024):
    """Mean Recall@k / NDCG@k over users with at least one target item.

    ``scores`` is users x items; ``train`` and ``target`` are (m, 2) pair arrays.
    Train positives are masked out before ranking. ``users`` optionally
    restricts the evaluated population.
    """
    scores = np.asarray(scores, dtype=np.float64)
    n_users, n_items = scores.shape
    ks = sorted(int(k) for k in ks)
    kmax = min(max(ks), n_items)
    T = pair_matrix(target, n_users, n_items)
    Tr = pair_matrix(train, n_users, n_items)
    n_rel = np.asarray(T.sum(axis=1)).ravel()
    pool = np.flatnonzero(n_rel > 0)
    if users is not None:
        pool = np.intersect1d(pool, np.asarray(users, dtype=np.int64))
    recall = {k: 0.0 for k in ks}
    ndcg = {k: 0.0 for k in ks}
    discount = 1.0 / np.log2(np.arange(2, kmax + 2))
    ideal = np.concatenate([[0.0], np.cumsum(discount)])
    for start in range(0, len(pool), chunk):
        batch = pool[start : start + chunk]
        block = scores[batch].copy()
        block[Tr[batch].toarray() > 0] = -np.inf
        top = np.argsort(-block, axis=1, kind="stable")[:, :kmax]
        hits = np.take_along_axis(T[batch].toarray(), top, axis=1) > 0
        rel = n_rel[batch]
        for k in ks:
            kk = min(k, kmax)
            h = hits[:, :kk]
            recall[k] += float(np.sum(h.sum(axis=1) / rel))
            dcg = (h * discount[:kk]).sum(axis=1)
            idcg = ideal[np.minimum(rel, kk).astype(int)]
            ndcg[k] += float(np.sum(dcg / idcg))
    n = max(len(pool), 1)
    return {k: recall[k] / n for k in ks}, {k: ndcg[k] / n for k in ks}, len(pool)


def config_digest(config):
    items = config if isinstance(config, dict) else asdict(config)
    text = "\n".join(f"{k}={items[k]}" for k in sorted(items))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class EvalReport:
    protocol: str
    seed: int
    ks: list
    recall: dict
    ndcg: dict
    config_digest: str = ""
    metadata: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "protocol": self.protocol,
            "seed": self.seed,
            "ks": list(self.ks),
            "recall": {str(k): self.recall[k] for k in self.ks},
            "ndcg": {str(k): self.ndcg[k] for k in self.ks},
            "config_digest": self.config_digest,
            "metadata": self.metadata,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        ks = [int(k) for k in d["ks"]]
        return cls(
            d["protocol"],
            d["seed"],
            ks,
            {k: d["recall"][str(k)] for k in ks},
            {k: d["ndcg"][str(k)] for k in ks},
            d.get("config_digest", ""),
            d.get("metadata", {}),
        )

    def write(self, out_dir, stem="report"):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"{stem}.json").write_text(self.to_json() + "\n")
        with (out_dir / f"{stem}.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["protocol", "k", "recall", "ndcg"])
            for k in self.ks:
                w.writerow([self.protocol, k, repr(self.recall[k]), repr(self.ndcg[k])])
        return out_dir / f"{stem}.json"


def evaluate_scores(scores, train, target, ks=DEFAULT_KS, protocol="standard", seed=0, digest="", users=None, **meta):
    recall, ndcg, n = topk_metrics(scores, train, target, ks, users=users)
    ks = sorted(int(k) for k in ks)
    return EvalReport(protocol, seed, ks, recall, ndcg, digest, dict(meta, n_users=n))


def cold_start_users(train, n_users, fraction=0.1):
    """Bottom ``fraction`` of users by training-interaction count; ties by ascending id."""
    counts = np.bincount(np.asarray(train)[:, 0], minlength=n_users) if len(train) else np.zeros(n_users, int)
    n = int(math.ceil(fraction * n_users))
    order = np.lexsort((np.arange(n_users), counts))
    return np.sort(order[:n])


def inject_noise(train, n_users, n_items, level, seed, exclude=None):
    """Add ``floor(level * |train|)`` random unobserved (user, item) pairs to ``train``.

    Pairs present in ``train`` or ``exclude`` are never produced, and no pair is added twice.
    """
    train = unique_pairs(train)
    n_new = int(math.floor(level * len(train)))
    if n_new == 0:
        return train
    taken = train[:, 0] * n_items + train[:, 1]
    if exclude is not None and len(exclude):
        ex = unique_pairs(exclude)
        taken = np.union1d(taken, ex[:, 0] * n_items + ex[:, 1])
    free = n_users * n_items - len(np.unique(taken))
    if n_new > free:
        raise ValueError(f"cannot inject {n_new} noise pairs: only {free} unobserved pairs exist")
    rng = np.random.default_rng(seed)
    chosen = np.empty(0, dtype=np.int64)
    while len(chosen) < n_new:
        draw = rng.integers(0, n_users * n_items, size=2 * (n_new - len(chosen)) + 16)
        draw = draw[~np.isin(draw, taken)]
        draw = draw[~np.isin(draw, chosen)]
        _, first = np.unique(draw, return_index=True)
        draw = draw[np.sort(first)]
        chosen = np.concatenate([chosen, draw[: n_new - len(chosen)]])
    noise = np.stack([chosen // n_items, chosen % n_items], axis=1)
    return unique_pairs(np.concatenate([train, noise]))


def ablate_training_data(train, fraction, seed):
    """Randomly drop ``round(fraction * |train|)`` pairs while every user keeps at least one."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
    train = unique_pairs(train)
    target = int(round(fraction * len(train)))
    rng = np.random.default_rng(seed)
    counts = np.bincount(train[:, 0])
    keep = np.ones(len(train), dtype=bool)
    removed = 0
    for j in rng.permutation(len(train)):
        if removed == target:
            break
        u = train[j, 0]
        if counts[u] > 1:
            counts[u] -= 1
            keep[j] = False
            removed += 1
    return train[keep]


def popularity_scores(train, n_users, n_items):
    counts = np.bincount(np.asarray(train)[:, 1], minlength=n_items).astype(np.float64)
    return np.broadcast_to(counts, (n_users, n_items)).copy()


def random_scores(n_users, n_items, seed):
    return np.random.default_rng(seed).random((n_users, n_items))

