"""Command-line entry point.

Subcommands: prepare-mlr, train, evaluate, ablate, gradcheck. Run
directories default to $CROSSREID_RUNS (or ./runs) and are never
overwritten without --force.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import statistics
import sys
import time
from pathlib import Path

from . import data as D
from . import evaluation as E
from .errors import CrossReIDError
from .gradcheck import LOSS_NAMES, run_gradcheck
from .model import VARIANTS, config_hash, load_checkpoint
from .trainer import TrainConfig, desk_config, save_run, train, train_config_hash

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_BAD_INPUT = 2


def _runs_root() -> Path:
    return Path(os.environ.get("CROSSREID_RUNS", "runs"))


def _resolve_out(args, default_name: str) -> Path:
    out = Path(args.out) if args.out else _runs_root() / default_name
    if out.exists() and any(out.iterdir()) and not getattr(args, "force", False):
        raise CrossReIDError(f"refusing to overwrite existing run directory {out} (use --force)")
    return out


def _int_list(text: str) -> tuple:
    return tuple(int(x) for x in text.split(","))


def _load_config_file(path) -> dict:
    import tomllib

    with open(path, "rb") as fh:
        return tomllib.load(fh)


# ---------------------------------------------------------------------------
# prepare-mlr
# ---------------------------------------------------------------------------

def cmd_prepare_mlr(args) -> int:
    if args.synthetic:
        records = D.generate_synthetic_corpus(args.ids, args.cams, args.per_id,
                                              seed=args.seed)
    else:
        if not args.root:
            print("error: provide --root or --synthetic", file=sys.stderr)
            return EXIT_BAD_INPUT
        records, rejected = D.ingest_directory(args.root)
        for name, reason in rejected:
            print(f"rejected {name}: {reason}", file=sys.stderr)
        if not records:
            print(f"error: no usable images under {args.root}", file=sys.stderr)
            return EXIT_BAD_INPUT

    config = D.MLRConfig(rate_set=tuple(args.rates), lr_camera_ids=tuple(args.lr_cams),
                         rng_seed=args.seed)
    split = D.build_mlr_split(records, config)
    out = Path(args.out or (_runs_root() / "mlr"))
    manifest = D.save_split_manifest(split, out)
    print(json.dumps({
        "manifest": str(manifest),
        "train": len(split.train),
        "query": len(split.query),
        "gallery": len(split.gallery),
        "excluded_identities": split.excluded_identities,
    }, indent=2))
    return EXIT_OK


# ---------------------------------------------------------------------------
# train / evaluate
# ---------------------------------------------------------------------------

def _train_config_from_args(args) -> TrainConfig:
    overrides = {}
    if args.config:
        overrides.update(_load_config_file(args.config))
    for key in ("epochs", "P", "K"):
        v = getattr(args, key.lower(), None)
        if v is not None:
            overrides[key] = v
    overrides["seed"] = args.seed
    overrides["deterministic"] = args.deterministic
    if args.preset == "desk":
        return desk_config(args.variant, **overrides)
    return TrainConfig(variant=args.variant, **overrides)


def _split_from_args(args) -> D.MLRSplit:
    if args.manifest:
        return D.load_split_manifest(args.manifest)
    records = D.generate_synthetic_corpus(args.ids, args.cams, args.per_id,
                                          seed=args.data_seed)
    return D.build_mlr_split(records, D.MLRConfig(rng_seed=args.data_seed))


def cmd_train(args) -> int:
    config = _train_config_from_args(args)
    split = _split_from_args(args)
    out = _resolve_out(args, f"{config.variant}-{train_config_hash(config)}-{int(time.time())}")
    result = train(config, split.train)
    manifest = save_run(result, config, out)
    print(json.dumps(manifest, indent=2))
    return EXIT_OK


def _evaluate(model, extra, split, fusion, trials, seed) -> dict:
    size = tuple(split.config.canonical_size) if split.config else (64, 32)
    queries = E.extract_descriptors(model, split.query, "query", size, fusion=fusion)
    gallery = E.extract_descriptors(model, split.gallery, "gallery", size, fusion=fusion)
    result = E.cmc(queries, gallery, trials=trials, seed=seed)
    return {
        **{f"rank{k}": result.rank_accuracy[k] for k in E.RANKS},
        "trials": trials,
        "seed": seed,
        "variant": model.config.variant,
        "checkpoint_hash": config_hash(model.config),
    }


def cmd_evaluate(args) -> int:
    model, extra = load_checkpoint(args.checkpoint)
    split = _split_from_args(args)
    report = _evaluate(model, extra, split, args.fusion == "on", args.trials, args.seed)
    if args.dump_distances:
        size = tuple(split.config.canonical_size) if split.config else (64, 32)
        q = E.extract_descriptors(model, split.query, "query", size, fusion=args.fusion == "on")
        g = E.extract_descriptors(model, split.gallery, "gallery", size, fusion=args.fusion == "on")
        report["distance_matrix"] = E.distance_matrix(q, g).tolist()
    text = json.dumps(report, indent=2)
    print(text)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------

def run_ablation(split: D.MLRSplit, seeds, preset: str = "desk",
                 trials: int = 10) -> dict:
    """Train every variant for every seed; returns rank-1/rank-5 per cell."""
    table = {}
    for variant in VARIANTS:
        cells = []
        for seed in seeds:
            config = desk_config(variant, seed=seed) if preset == "desk" \
                else TrainConfig(variant=variant, seed=seed)
            result = train(config, split.train)
            report = _evaluate(result.model, {}, split, fusion=True,
                               trials=trials, seed=seed)
            cells.append({"seed": seed, "rank1": report["rank1"], "rank5": report["rank5"]})
        table[variant] = cells
    return table


def format_ablation_markdown(table: dict) -> str:
    names = {"baseline": "Baseline", "ftwa_b": "FTWA_B", "ftwa_r": "FTWA_R", "ftwa": "FTWA"}
    lines = ["| Model | Rank-1 | Rank-5 |", "|---|---|---|"]
    for variant, cells in table.items():
        r1 = [c["rank1"] for c in cells]
        r5 = [c["rank5"] for c in cells]
        if len(cells) > 1:
            fmt = lambda xs: f"{statistics.mean(xs):.3f} ± {statistics.stdev(xs):.3f}"
        else:
            fmt = lambda xs: f"{xs[0]:.3f}"
        lines.append(f"| {names[variant]} | {fmt(r1)} | {fmt(r5)} |")
    return "\n".join(lines)


def cmd_ablate(args) -> int:
    split = _split_from_args(args)
    out = _resolve_out(args, f"ablation-{int(time.time())}")
    out.mkdir(parents=True, exist_ok=True)
    seeds = list(range(args.seed, args.seed + args.n_seeds))
    table = run_ablation(split, seeds)
    (out / "ablation.json").write_text(json.dumps(table, indent=2))
    md = format_ablation_markdown(table)
    (out / "ablation.md").write_text(md + "\n")
    print(md)
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    reports = run_gradcheck(losses=args.loss or None, seed=args.seed,
                            grad_perturbation=args.perturb)
    ok = True
    for r in reports:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.name}: max relative error {r.max_rel_error:.3e} "
              f"over {r.n_checked} parameters")
        ok = ok and r.passed
    return EXIT_OK if ok else EXIT_FAILURE


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_split_args(p):
    p.add_argument("--manifest", help="frozen split manifest to load")
    p.add_argument("--ids", type=int, default=20)
    p.add_argument("--cams", type=int, default=2)
    p.add_argument("--per-id", dest="per_id", type=int, default=4)
    p.add_argument("--data-seed", dest="data_seed", type=int, default=7)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crossreid",
                                     description="Cross-resolution person ReID toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare-mlr", help="build and freeze an MLR split")
    p.add_argument("--synthetic", action="store_true")
    p.add_argument("--root", help="image directory named <pid>_<cam>_<idx>.<ext>")
    p.add_argument("--ids", type=int, default=20)
    p.add_argument("--cams", type=int, default=2)
    p.add_argument("--per-id", dest="per_id", type=int, default=4)
    p.add_argument("--lr-cams", dest="lr_cams", type=_int_list, default=(1,))
    p.add_argument("--rates", type=_int_list, default=(2, 3, 4))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_prepare_mlr)

    p = sub.add_parser("train", help="train one variant")
    p.add_argument("--variant", choices=VARIANTS, default="ftwa")
    p.add_argument("--preset", choices=["desk", "full"], default="desk")
    p.add_argument("--config", help="TOML file of TrainConfig overrides")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--out")
    p.add_argument("--force", action="store_true")
    _add_split_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="CMC evaluation of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--fusion", choices=["on", "off"], default="on")
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dump-distances", action="store_true")
    p.add_argument("--out")
    _add_split_args(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train all variants and tabulate rank-1/5")
    p.add_argument("--n-seeds", dest="n_seeds", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--force", action="store_true")
    _add_split_args(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of all loss gradients")
    p.add_argument("--loss", action="append", choices=LOSS_NAMES)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--perturb", type=float, default=0.0,
                   help="shift analytic gradients (negative control)")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except CrossReIDError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT


if __name__ == "__main__":
    sys.exit(main())
