"""Command-line entry point: ``khgrec <subcommand> ...``.

Every evaluating subcommand writes ``<stem>.json`` and ``<stem>.csv`` (plus a
PNG figure) into ``--out``. Usage problems, including missing input files,
exit with status 2; data, config and training failures exit with status 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .evaluation import (
    DEFAULT_KS,
    ablate_training_data,
    cold_start_users,
    evaluate_scores,
    inject_noise,
)
from .graph import (
    DataError,
    kg_from_triples,
    canonical_triples,
    load_interactions,
    load_kg,
    read_pairs,
    remap_kg,
    split_dataset,
    write_id_map,
    write_pairs,
)
from .plotting import plot_curves, plot_report
from .trainer import (
    ABLATIONS,
    CheckpointError,
    ConfigError,
    Dataset,
    TrainConfig,
    TrainingDiverged,
    load_checkpoint,
    load_config,
    parse_config_values,
    resolve_checkpoint,
    save_checkpoint,
    train,
    write_curves,
)

log = logging.getLogger("khgrec")


class UsageError(Exception):
    pass


def _ks(text):
    try:
        ks = sorted({int(k) for k in text.split(",") if k.strip()})
    except ValueError:
        raise argparse.ArgumentTypeError(f"--ks expects comma-separated integers, got {text!r}") from None
    if not ks or ks[0] < 1:
        raise argparse.ArgumentTypeError("--ks needs at least one positive integer")
    return ks


def _ratios(text):
    try:
        parts = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"--ratios expects three numbers, got {text!r}") from None
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("--ratios expects train,validation,test")
    if min(parts) < 0 or abs(sum(parts) - 1.0) > 1e-9:
        raise argparse.ArgumentTypeError(f"--ratios must be non-negative and sum to 1, got {text!r}")
    return parts


def _existing(path):
    if path is not None and not Path(path).exists():
        raise UsageError(f"no such file or directory: {path}")
    return path


# data handling


def prepare_data(interactions, kg_path, rating_threshold=0.0, seed=0, ratios=(0.7, 0.1, 0.2)):
    """Load raw files, split per user and remap the KG onto dense item ids.

    Returns ``(dataset, user_ids, item_ids, entity_ids)``.
    """
    inter = load_interactions(interactions, rating_threshold)
    parts = split_dataset(inter, ratios, seed=seed)
    kg, remap = (None, {})
    if kg_path is not None:
        kg, remap = remap_kg(load_kg(kg_path), inter.item_ids, inter.n_items)
    data = Dataset(inter.n_users, inter.n_items, parts["train"].pairs, parts["validation"].pairs, parts["test"].pairs, kg)
    return data, inter.user_ids, inter.item_ids, remap


def write_prepared(data, out, user_ids=None, item_ids=None, entity_ids=None):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    for name in ("train", "validation", "test"):
        write_pairs(getattr(data, name), out / f"{name}.tsv")
    meta = dict(n_users=data.n_users, n_items=data.n_items, n_entities=0, n_relations=0)
    if data.kg is not None:
        canon = canonical_triples(data.kg)
        canon = canon[canon[:, 1] > 0]
        np.savetxt(out / "kg.tsv", np.column_stack([canon[:, 0], canon[:, 1] - 1, canon[:, 2]]), fmt="%d", delimiter="\t")
        meta.update(n_entities=data.kg.n_entities, n_relations=data.kg.n_canonical - 1)
    if user_ids:
        write_id_map(user_ids, out / "user_ids.tsv")
    if item_ids:
        write_id_map(item_ids, out / "item_ids.tsv")
    if entity_ids:
        write_id_map(entity_ids, out / "entity_ids.tsv")
    (out / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    return out


def read_prepared(path):
    path = Path(path)
    try:
        meta = json.loads((path / "meta.json").read_text())
        splits = {name: read_pairs(path / f"{name}.tsv") for name in ("train", "validation", "test")}
    except (OSError, ValueError) as exc:
        raise DataError(f"{path}: not a prepared data directory ({exc})") from None
    kg = None
    if (path / "kg.tsv").exists() and meta.get("n_relations"):
        triples = np.loadtxt(path / "kg.tsv", dtype=np.int64, delimiter="\t", ndmin=2).reshape(-1, 3)
        kg = kg_from_triples(triples, meta["n_relations"], meta["n_entities"])
    return Dataset(meta["n_users"], meta["n_items"], splits["train"], splits["validation"], splits["test"], kg)


def _load_data(args):
    if args.data is not None:
        return read_prepared(args.data)
    if args.interactions is None:
        raise UsageError("give either --data or --interactions (with optional --kg)")
    data, *_ = prepare_data(args.interactions, args.kg, args.rating_threshold, args.split_seed, args.ratios)
    return data


def _load_train_config(args):
    config = load_config(args.config) if args.config else TrainConfig()
    if args.set:
        config = config.replace(**parse_config_values("\n".join(args.set)))
    return config


# runners


def _train_and_report(args, config, data, protocol, **meta):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def progress(row):
        log.info("epoch %d total %.5f val_recall20 %.4f lr %g", row["epoch"], row["total"], row["val_recall20"], row["lr"])

    result = train(config, data, progress=progress)
    save_checkpoint(result.checkpoint, out / "best.npz")
    write_curves(result.curves, out / "loss_curve.csv")
    plot_curves(result.curves, out / "loss_curve.png")
    scores = result.model.score_matrix()
    report = evaluate_scores(
        scores, data.train, data.test, args.ks, protocol=protocol, seed=config.seed, digest=config.digest(),
        best_epoch=result.checkpoint.epoch, **meta,
    )
    _write_report(report, out)
    return report


def _write_report(report, out, stem="report"):
    out = Path(out)
    report.write(out, stem)
    plot_report(report, out / f"{stem}.png")
    print(report.to_json())


def cmd_prepare(args):
    _existing(args.interactions)
    _existing(args.kg)
    data, users, items, entities = prepare_data(args.interactions, args.kg, args.rating_threshold, args.seed, args.ratios)
    write_prepared(data, args.out, users, items, entities)
    print(json.dumps(dict(n_users=data.n_users, n_items=data.n_items, train=len(data.train),
                          validation=len(data.validation), test=len(data.test))))
    return 0


def cmd_train(args):
    config = _load_train_config(args)
    data = _load_data(args)
    _train_and_report(args, config, data, "standard")
    return 0


def cmd_evaluate(args):
    ckpt = load_checkpoint(resolve_checkpoint(args.checkpoint))
    model = ckpt.model()
    target = ckpt.data.test if args.split == "test" else ckpt.data.validation
    report = evaluate_scores(
        model.score_matrix(), ckpt.data.train, target, args.ks, protocol="standard" if args.split == "test" else "validation",
        seed=ckpt.config.seed, digest=ckpt.config.digest(), epoch=ckpt.epoch,
    )
    _write_report(report, args.out or Path(resolve_checkpoint(args.checkpoint)).parent)
    return 0


def cmd_cold_start(args):
    ckpt = load_checkpoint(resolve_checkpoint(args.checkpoint))
    users = cold_start_users(ckpt.data.train, ckpt.data.n_users, args.fraction)
    report = evaluate_scores(
        ckpt.model().score_matrix(), ckpt.data.train, ckpt.data.test, args.ks, protocol="cold_start",
        seed=ckpt.config.seed, digest=ckpt.config.digest(), users=users, fraction=args.fraction,
        n_cold_users=len(users),
    )
    _write_report(report, args.out or Path(resolve_checkpoint(args.checkpoint)).parent, "cold_start")
    return 0


def cmd_noise(args):
    config = _load_train_config(args)
    data = _load_data(args)
    held_out = np.concatenate([data.validation, data.test]) if len(data.validation) else data.test
    noisy = inject_noise(data.train, data.n_users, data.n_items, args.level, args.seed, exclude=held_out)
    _train_and_report(args, config, data.with_train(noisy), "noise", level=args.level, noise_seed=args.seed,
                      n_noise=int(len(noisy) - len(data.train)))
    return 0


def cmd_ablate_data(args):
    config = _load_train_config(args)
    data = _load_data(args)
    kept = ablate_training_data(data.train, args.fraction, args.seed)
    _train_and_report(args, config, data.with_train(kept), "ablate_data", fraction=args.fraction,
                      ablation_seed=args.seed, n_train=int(len(kept)))
    return 0


def cmd_ablate_model(args):
    config = _load_train_config(args)
    if args.variant != "full":
        config = config.replace(**{args.variant: True})
    data = _load_data(args)
    _train_and_report(args, config, data, f"ablate_model:{args.variant}", variant=args.variant)
    return 0


def cmd_export_attention(args):
    ckpt = load_checkpoint(resolve_checkpoint(args.checkpoint))
    heads, relations, tails, pi = ckpt.model().attention_weights()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w") as fh:
        fh.write("head\trelation\ttail\tpi\n")
        for h, r, t, w in zip(heads, relations, tails, pi):
            fh.write(f"{int(h)}\t{int(r)}\t{int(t)}\t{float(w)!r}\n")
    print(out)
    return 0


# parser


def _data_args(p):
    p.add_argument("--data", help="directory written by 'prepare'")
    p.add_argument("--interactions", help="raw user<TAB>item[<TAB>rating] file")
    p.add_argument("--kg", help="raw head<TAB>relation<TAB>tail file")
    p.add_argument("--rating-threshold", type=float, default=0.0)
    p.add_argument("--split-seed", type=int, default=0, help="seed of the per-user split of raw files")
    p.add_argument("--ratios", type=_ratios, default=(0.7, 0.1, 0.2))
    p.add_argument("--config", help="key = value training config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config entry")
    p.add_argument("--ks", type=_ks, default=list(DEFAULT_KS))
    p.add_argument("--out", required=True)


def build_parser():
    parser = argparse.ArgumentParser(prog="khgrec", description="Knowledge-enhanced hypergraph recommender")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="ingest raw files into dense-id splits")
    p.add_argument("--interactions", required=True)
    p.add_argument("--kg")
    p.add_argument("--out", required=True)
    p.add_argument("--rating-threshold", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ratios", type=_ratios, default=(0.7, 0.1, 0.2))
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train and write best checkpoint, loss curve and test report")
    _data_args(p)
    p.set_defaults(func=cmd_train)

    for name, func, help_ in (
        ("evaluate", cmd_evaluate, "full-ranking evaluation of a checkpoint"),
        ("cold-start", cmd_cold_start, "evaluate only the least active users"),
    ):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--ks", type=_ks, default=list(DEFAULT_KS))
        p.add_argument("--out")
        if name == "evaluate":
            p.add_argument("--split", choices=("test", "validation"), default="test")
        else:
            p.add_argument("--fraction", type=float, default=0.1)
        p.set_defaults(func=func)

    p = sub.add_parser("noise", help="train on training data with injected random interactions")
    _data_args(p)
    p.add_argument("--level", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_noise)

    p = sub.add_parser("ablate-data", help="train on a randomly reduced training set")
    _data_args(p)
    p.add_argument("--fraction", type=float, required=True, help="share of training pairs to drop")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_ablate_data)

    p = sub.add_parser("ablate-model", help="train one model variant")
    _data_args(p)
    p.add_argument("--variant", choices=("full",) + ABLATIONS, required=True)
    p.set_defaults(func=cmd_ablate_model)

    p = sub.add_parser("export-attention", help="write relation-aware attention weights as TSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_attention)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        for name in ("data", "interactions", "kg", "config", "checkpoint"):
            value = getattr(args, name, None)
            if name == "checkpoint" and value is not None:
                value = resolve_checkpoint(value)
            _existing(value)
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (DataError, ConfigError, CheckpointError, TrainingDiverged, ValueError) as exc:
        print(f"khgrec {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
