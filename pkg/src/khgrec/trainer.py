"""Model assembly, batch sampling, the training loop and checkpoints."""

from __future__ import annotations

import json
import logging
import time
import zipfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .encoders import (
    hgtn_forward,
    prepare_global,
    prepare_local,
    relation_aware_weights,
    rhgat_forward,
    transr_energy,
    kg_loss,
)
from .evaluation import config_digest, topk_metrics
from .fusion import bpr_loss, channel_fusion, drop_edge, infonce, pair_scores, total_loss
from .graph import (
    ENTITY,
    ITEM,
    USER,
    TripleStore,
    build_ckhg,
    build_snapshots,
    canonical_triples,
    unique_pairs,
    with_inverses,
)
from .optim import Adam, PlateauScheduler

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1

LR_GRID = (1e-1, 1e-2, 1e-3)
LAMBDA1_GRID = (1.0, 0.1, 1e-2, 1e-3, 1e-4)
LAMBDA2_GRID = (0.1, 1e-2, 1e-3, 1e-4, 1e-5)
TAU_GRID = (0.1, 0.2, 1.0, 2.0, 10.0)
LAYER_GRID = (1, 2, 3, 4)

ABLATIONS = ("no_ccl", "no_hyper", "no_global", "no_attention")


class ConfigError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    embedding_dim: int = 64
    layers: int = 2
    lr: float = 1e-2
    lambda1: float = 1e-2
    lambda2: float = 0.1
    tau: float = 0.2
    cf_batch: int = 4096
    kg_batch: int = 8192
    max_epochs: int = 500
    seed: int = 0
    dropedge_rate: float = 0.1
    early_stop_patience: int = 50
    scheduler_patience: int = 20
    scheduler_factor: float = 0.5
    local_operator: str = "laplacian"
    shared_qkv: bool = False
    no_ccl: bool = False
    no_hyper: bool = False
    no_global: bool = False
    no_attention: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        def on_grid(name, grid):
            value = getattr(self, name)
            if not any(np.isclose(value, g, rtol=1e-9, atol=0) for g in grid):
                raise ConfigError(f"{name}={value} is outside the search grid {grid}")

        on_grid("lr", LR_GRID)
        on_grid("lambda1", LAMBDA1_GRID)
        on_grid("lambda2", LAMBDA2_GRID)
        on_grid("tau", TAU_GRID)
        if self.layers not in LAYER_GRID:
            raise ConfigError(f"layers={self.layers} is outside {LAYER_GRID}")
        if self.embedding_dim < 1:
            raise ConfigError("embedding_dim must be positive")
        if not 0.0 <= self.dropedge_rate < 1.0:
            raise ConfigError("dropedge_rate must lie in [0, 1)")
        if self.local_operator not in ("laplacian", "smoothing"):
            raise ConfigError("local_operator must be 'laplacian' or 'smoothing'")
        for name in ("cf_batch", "kg_batch", "max_epochs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    @property
    def ssl_weight(self):
        return 0.0 if self.no_ccl or self.no_global else self.lambda2

    def digest(self):
        return config_digest(asdict(self))

    def replace(self, **changes):
        d = asdict(self)
        d.update(changes)
        return TrainConfig(**d)


def _coerce(text, kind):
    if kind is bool:
        low = text.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    return kind(text.strip())


def parse_config_values(text):
    """Flat ``key = value`` lines into a typed dict; ``#`` starts a comment. Unknown keys are rejected."""
    types = {f.name: f.type for f in fields(TrainConfig)}
    kinds = {"int": int, "float": float, "bool": bool, "str": str}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            values[key] = _coerce(value, kinds[types[key]])
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
    return values


def parse_config(text):
    return TrainConfig(**parse_config_values(text))


def load_config(path):
    return parse_config(Path(path).read_text(encoding="utf-8"))


def dump_config(config):
    return "".join(f"{k} = {v}\n" for k, v in asdict(config).items())


@dataclass
class Dataset:
    """Dense-id data: users ``[0, n_users)``, items ``[0, n_items)``.

    ``kg`` uses item ids ``0..n_items-1`` for items and higher ids for other entities.
    """

    n_users: int
    n_items: int
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray
    kg: TripleStore | None = None

    def with_train(self, train):
        return Dataset(self.n_users, self.n_items, unique_pairs(train), self.validation, self.test, self.kg)

    def interaction_set(self, pairs=None):
        from .graph import InteractionSet

        return InteractionSet(self.n_users, self.n_items, unique_pairs(self.train if pairs is None else pairs))


def xavier_uniform(rng, shape):
    fan_in, fan_out = shape[-2], shape[-1]
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class KHGRec:
    """Parameters plus the graph structures the forward pass runs over."""

    def __init__(self, config, data, params=None):
        self.config = config
        self.data = data
        self.ckhg = build_ckhg(data.interaction_set(), data.kg)
        self.snapshots = build_snapshots(self.ckhg)
        self.n_nodes = self.ckhg.n_entities
        self.user_rows = np.arange(data.n_users)
        self.item_rows = data.n_users + np.arange(data.n_items)
        self.params = params if params is not None else self.init_params(np.random.default_rng(config.seed))
        self.eval_views = self.views()
        self._type_pools = {
            t: np.flatnonzero(self.ckhg.node_types == t) for t in (USER, ITEM, ENTITY)
        }
        self._triple_keys = np.sort(self.ckhg.keys())

    def init_params(self, rng):
        c = self.config
        d = c.embedding_dim
        p = {"emb": xavier_uniform(rng, (self.n_nodes, d))}
        for enc in ("user_enc", "item_enc"):
            for layer in range(c.layers):
                pre = f"{enc}.l{layer}."
                if layer == 0 or not c.shared_qkv:
                    for m in ("Q", "K", "V"):
                        p[pre + m] = xavier_uniform(rng, (d, d))
                p[pre + "W1"] = xavier_uniform(rng, (d, d))
                p[pre + "b1"] = np.zeros(d)
                p[pre + "W2"] = xavier_uniform(rng, (d, d))
                p[pre + "b2"] = np.zeros(d)
                p[pre + "P"] = xavier_uniform(rng, (d, d))
        for layer in range(c.layers):
            p[f"global.l{layer}.P"] = xavier_uniform(rng, (d, d))
        n_rel = self.ckhg.n_relations
        p["rel.W"] = xavier_uniform(rng, (n_rel, d, d))
        p["rel.e"] = xavier_uniform(rng, (n_rel, d))
        p["fusion.W"] = xavier_uniform(rng, (d, d))
        p["fusion.b"] = np.zeros(d)
        p["fusion.q"] = xavier_uniform(rng, (1, d)).ravel()
        return {k: ad.parameter(v, name=k) for k, v in p.items()}

    # graph views

    def views(self, drop_rate=0.0, seed=None):
        """Prepared local/global structures, optionally with DropEdge applied."""
        c = self.config
        snaps = self.snapshots
        if drop_rate > 0:
            snaps = {
                name: s.subset(drop_edge(s.nnz, drop_rate, [seed, j]))
                for j, (name, s) in enumerate(sorted(snaps.items()))
            }
        laplacian = c.local_operator == "laplacian"
        return {
            "user": prepare_local(snaps["item"], laplacian=laplacian, simple_conv=c.no_hyper),
            "item": prepare_local(snaps["user"], laplacian=laplacian, simple_conv=c.no_hyper),
            "entity": None if c.no_global else prepare_global(snaps["entity"], simple_conv=c.no_hyper),
        }

    def _layer_params(self, enc):
        c = self.config
        out = []
        for layer in range(c.layers):
            pre = f"{enc}.l{layer}."
            qkv = f"{enc}.l0." if c.shared_qkv else pre
            d = {m: self.params[qkv + m] for m in ("Q", "K", "V")}
            d.update({m: self.params[pre + m] for m in ("W1", "b1", "W2", "b2", "P")})
            out.append(d)
        return out

    def forward(self, views):
        c = self.config
        X = self.params["emb"]
        users = hgtn_forward(views["user"], ad.gather(X, self.user_rows), self._layer_params("user_enc"))
        items = hgtn_forward(views["item"], ad.gather(X, self.item_rows), self._layer_params("item_enc"))
        out = {"user": users, "item": items, "M_u": users.output, "M_cf": items.output}
        if c.no_global:
            out["M_i"] = items.output
            return out
        ent, pi = rhgat_forward(
            views["entity"],
            X,
            self.params["rel.W"],
            self.params["rel.e"],
            [self.params[f"global.l{j}.P"] for j in range(c.layers)],
        )
        out["entity"] = ent
        out["pi"] = pi
        M_ckg = ad.gather(ent.output, self.item_rows)
        fusion = {k: self.params[f"fusion.{k}"] for k in ("W", "b", "q")}
        fused, beta = channel_fusion(
            items.output, M_ckg, fusion, fixed_beta=(0.5, 0.5) if c.no_attention else None
        )
        out["M_i"] = fused
        out["beta"] = beta
        return out

    def score_matrix(self, views=None):
        out = self.forward(views or self.eval_views)
        return out["M_u"].value @ out["M_i"].value.T

    def attention_weights(self):
        """(head, relation, tail, pi) for every entity-snapshot incidence."""
        g = self.eval_views["entity"]
        if g is None or g.simple_operator is not None:
            raise ValueError("attention weights are unavailable for this model variant")
        pi = relation_aware_weights(self.params["emb"], g, self.params["rel.W"], self.params["rel.e"])
        return g.heads, g.relations, g.nodes, pi.value

    def reg_value(self):
        return float(sum(np.sum(p.value * p.value) for p in self.params.values()))

    # sampling

    def sample_cf_batch(self, size, rng):
        return sample_cf_batch(self.data.train, self.data.n_items, size, rng)

    def sample_kg_batch(self, size, rng):
        return sample_kg_batch(self.ckhg, size, rng, pools=self._type_pools, keys=self._triple_keys)

    # losses

    def cf_objective(self, views, batch):
        """BPR plus weighted cross-view contrastive terms for one CF batch."""
        c = self.config
        u, pos, neg = batch
        out = self.forward(views)
        parts = {}
        with _term("cf"):
            parts["cf"] = bpr_loss(
                pair_scores(out["M_u"], out["M_i"], u, pos),
                pair_scores(out["M_u"], out["M_i"], u, neg),
                reduction="mean",
            )
        loss = parts["cf"]
        if c.ssl_weight > 0:
            ent = out["entity"].layers
            bu = np.unique(u)
            bi = np.unique(np.concatenate([pos, neg]))
            with _term("ssl_user"):
                parts["ssl_user"] = infonce(
                    [ad.gather(H, bu) for H in out["user"].layers],
                    [ad.gather(H, self.user_rows[bu]) for H in ent],
                    c.tau,
                    reduction="mean",
                )
            with _term("ssl_item"):
                parts["ssl_item"] = infonce(
                    [ad.gather(H, bi) for H in out["item"].layers],
                    [ad.gather(H, self.item_rows[bi]) for H in ent],
                    c.tau,
                    reduction="mean",
                )
            loss = loss + (parts["ssl_user"] + parts["ssl_item"]) * c.ssl_weight
        return loss, parts

    def kg_objective(self, batch):
        h, r, t, t_neg = batch
        X, W, e = self.params["emb"], self.params["rel.W"], self.params["rel.e"]
        with _term("kg"):
            loss = kg_loss(
                transr_energy(X, h, r, t, W, e), transr_energy(X, h, r, t_neg, W, e), reduction="mean"
            )
        return loss


class _term:
    """Re-raise numeric failures as :class:`TrainingDiverged` naming the loss term."""

    epoch = None

    def __init__(self, name):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None and issubclass(exc_type, FloatingPointError) and exc_type is not TrainingDiverged:
            raise TrainingDiverged(f"loss term {self.name!r} diverged at epoch {_term.epoch}: {exc}") from exc
        return False


def sample_cf_batch(train, n_items, size, rng, max_tries=100):
    """(user, positive, negative) triples; positives uniform over training pairs.

    Negatives are uniform over items the user has not interacted with in ``train``.
    """
    train = np.asarray(train, dtype=np.int64)
    if len(train) == 0:
        raise ValueError("cannot sample from an empty training set")
    idx = rng.integers(0, len(train), size=size)
    users, pos = train[idx, 0], train[idx, 1]
    known = np.sort(train[:, 0] * n_items + train[:, 1])
    neg = rng.integers(0, n_items, size=size)
    bad = np.isin(users * n_items + neg, known)
    tries = 0
    while bad.any():
        tries += 1
        if tries > max_tries:
            u = int(users[bad][0])
            raise ValueError(f"user {u} has interacted with every item; no negative available")
        neg[bad] = rng.integers(0, n_items, size=int(bad.sum()))
        bad = np.isin(users * n_items + neg, known)
    return users, pos, neg


def sample_kg_batch(store, size, rng, pools=None, keys=None, max_tries=100):
    """(h, r, t, t') with t' drawn from t's node type so that (h, r, t') is not a stored fact."""
    tr = store.triples
    if len(tr) == 0:
        raise ValueError("cannot sample from an empty triple store")
    types = store.node_types if store.node_types is not None else np.full(store.n_entities, ENTITY)
    if pools is None:
        pools = {t: np.flatnonzero(types == t) for t in np.unique(types)}
    if keys is None:
        keys = np.sort(store.keys())
    idx = rng.integers(0, len(tr), size=size)
    h, r, t = tr[idx, 0], tr[idx, 1], tr[idx, 2]
    t_types = types[t]
    for ty in np.unique(t_types):
        if len(pools.get(int(ty), ())) < 2:
            raise ValueError(f"node type {int(ty)} has a single entity; cannot corrupt its triples")
    t_neg = np.empty_like(t)

    def draw(mask):
        for ty in np.unique(t_types[mask]):
            sel = mask & (t_types == ty)
            pool = pools[int(ty)]
            t_neg[sel] = pool[rng.integers(0, len(pool), size=int(sel.sum()))]

    def existing(mask):
        cand = np.stack([h, r, t_neg], axis=1)
        k = (cand[:, 0] * store.n_relations + cand[:, 1]) * store.n_entities + cand[:, 2]
        return mask & np.isin(k, keys)

    pending = np.ones(size, dtype=bool)
    draw(pending)
    pending = existing(pending)
    tries = 0
    while pending.any():
        tries += 1
        if tries > max_tries:
            j = int(np.flatnonzero(pending)[0])
            raise ValueError(f"no valid corruption for triple ({h[j]}, {r[j]}, {t[j]})")
        draw(pending)
        pending = existing(pending)
    return h, r, t, t_neg


@dataclass
class Checkpoint:
    config: TrainConfig
    data: Dataset
    params: dict  # name -> ndarray
    optimizer: dict  # name -> ndarray (adam moments / counts)
    epoch: int
    best_metric: float
    step_count: int = 0
    lr: float = 0.0

    def model(self):
        return KHGRec(
            self.config,
            self.data,
            params={k: ad.parameter(v.copy(), name=k) for k, v in self.params.items()},
        )


def save_checkpoint(ckpt, path):
    path = Path(path)
    if path.suffix != ".npz":
        path = path.with_name(path.name + ".npz")
    path.parent.mkdir(parents=True, exist_ok=True)
    data = ckpt.data
    kg = data.kg
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(ckpt.config),
        "epoch": ckpt.epoch,
        "best_metric": ckpt.best_metric,
        "step_count": ckpt.step_count,
        "lr": ckpt.lr,
        "n_users": data.n_users,
        "n_items": data.n_items,
        "kg": None if kg is None else {"n_entities": kg.n_entities, "n_canonical": kg.n_canonical},
    }
    arrays = {
        "meta": np.array(json.dumps(meta)),
        "data.train": data.train,
        "data.validation": data.validation,
        "data.test": data.test,
        "data.kg": canonical_triples(kg) if kg is not None else np.empty((0, 3), dtype=np.int64),
    }
    arrays.update({f"param.{k}": v for k, v in ckpt.params.items()})
    arrays.update({f"opt.{k}": v for k, v in ckpt.optimizer.items()})
    with path.open("wb") as fh:
        np.savez(fh, **arrays)
    return path


def resolve_checkpoint(path):
    path = Path(path)
    if path.is_dir():
        path = path / "best.npz"
    elif not path.exists() and path.with_name(path.name + ".npz").exists():
        path = path.with_name(path.name + ".npz")
    return path


def load_checkpoint(path):
    path = resolve_checkpoint(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
        meta = json.loads(str(arrays["meta"]))
    except (zipfile.BadZipFile, OSError, ValueError, KeyError, EOFError) as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from None
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {meta.get('version')} does not match expected {CHECKPOINT_VERSION}"
        )
    try:
        config = TrainConfig(**meta["config"])
        kg = None
        if meta["kg"] is not None:
            kg = TripleStore(
                meta["kg"]["n_entities"],
                meta["kg"]["n_canonical"],
                with_inverses(arrays["data.kg"], meta["kg"]["n_canonical"]),
            )
        data = Dataset(
            meta["n_users"],
            meta["n_items"],
            arrays["data.train"],
            arrays["data.validation"],
            arrays["data.test"],
            kg,
        )
        params = {k[6:]: v for k, v in arrays.items() if k.startswith("param.")}
        opt = {k[4:]: v for k, v in arrays.items() if k.startswith("opt.")}
    except (KeyError, TypeError, ConfigError) as exc:
        raise CheckpointError(f"incomplete checkpoint {path}: {exc}") from None
    return Checkpoint(config, data, params, opt, meta["epoch"], meta["best_metric"], meta["step_count"], meta["lr"])


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    curves: list = field(default_factory=list)
    model: KHGRec | None = None
    seconds: float = 0.0


CURVE_FIELDS = ("epoch", "cf", "kg", "ssl_u", "ssl_v", "total", "lr", "val_recall20")


def write_curves(curves, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        fh.write(",".join(CURVE_FIELDS) + "\n")
        for row in curves:
            fh.write(",".join(repr(row[k]) if isinstance(row[k], float) else str(row[k]) for k in CURVE_FIELDS) + "\n")
    return path


KG_PARAMS = ("emb", "rel.W", "rel.e")


def validation_recall(model, k=20):
    scores = model.score_matrix()
    recall, _, _ = topk_metrics(scores, model.data.train, model.data.validation, ks=(k,))
    return recall[k]


def train(config, data, progress=None):
    """Run the training loop and return the best checkpoint (by validation Recall@20).

    Each epoch draws ``ceil(|train| / cf_batch)`` CF steps over a DropEdge view,
    then ``ceil(|triples| / kg_batch)`` KG steps that update only the entity
    table and relation parameters.
    """
    start = time.perf_counter()
    model = KHGRec(config, data)
    params = model.params
    opt = Adam(params, lr=config.lr, weight_decay=config.lambda1)
    sched = PlateauScheduler(config.lr, patience=config.scheduler_patience, factor=config.scheduler_factor)
    seeds = np.random.SeedSequence(config.seed)
    use_kg = not config.no_global
    n_cf_steps = int(np.ceil(len(data.train) / config.cf_batch))
    n_kg_steps = int(np.ceil(len(model.ckhg) / config.kg_batch)) if use_kg else 0
    names = list(params)
    kg_names = list(KG_PARAMS)

    curves = []
    best = None
    bad = 0
    for epoch in range(1, config.max_epochs + 1):
        _term.epoch = epoch
        epoch_seed = seeds.spawn(1)[0]
        rng = np.random.default_rng(epoch_seed)
        views = model.views(config.dropedge_rate, seed=int(rng.integers(2**31)))
        sums = {"cf": 0.0, "kg": 0.0, "ssl_user": 0.0, "ssl_item": 0.0}
        for _ in range(n_cf_steps):
            batch = model.sample_cf_batch(config.cf_batch, rng)
            with ad.Tape() as tape:
                loss, parts = model.cf_objective(views, batch)
            grads = tape.gradient(loss, [params[k] for k in names])
            opt.step(dict(zip(names, grads)))
            for k, v in parts.items():
                sums[k] += float(v.value) / n_cf_steps
        for _ in range(n_kg_steps):
            batch = model.sample_kg_batch(config.kg_batch, rng)
            with ad.Tape() as tape:
                loss = model.kg_objective(batch)
            grads = tape.gradient(loss, [params[k] for k in kg_names])
            opt.step(dict(zip(kg_names, grads)))
            sums["kg"] += float(loss.value) / n_kg_steps

        try:
            breakdown = total_loss(
                sums["cf"], sums["kg"], sums["ssl_user"], sums["ssl_item"], model.reg_value(),
                config.lambda1, config.ssl_weight,
            )
        except FloatingPointError as exc:
            raise TrainingDiverged(f"epoch {epoch}: {exc}") from exc
        val = validation_recall(model)
        lr_used = opt.lr
        opt.lr = sched.step(val)
        curves.append(
            dict(
                epoch=epoch,
                cf=breakdown.cf,
                kg=breakdown.kg,
                ssl_u=breakdown.ssl_user,
                ssl_v=breakdown.ssl_item,
                total=breakdown.total,
                lr=lr_used,
                val_recall20=val,
            )
        )
        if progress is not None:
            progress(curves[-1])
        if best is None or val > best.best_metric:
            best = Checkpoint(
                config,
                data,
                {k: p.value.copy() for k, p in params.items()},
                {k: v.copy() for k, v in opt.state_arrays().items()},
                epoch,
                val,
                opt.step_count,
                opt.lr,
            )
            bad = 0
        else:
            bad += 1
            if bad >= config.early_stop_patience:
                logger.info("early stop at epoch %d (best %d)", epoch, best.epoch)
                break
    result_model = best.model()
    return TrainResult(best, curves, result_model, time.perf_counter() - start)
