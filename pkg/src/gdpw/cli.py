"""Command-line entry point: ``gdpw <command> ...``.

Exit codes: 0 success, 2 usage/input error, 1 runtime failure. Data and paths go to
stdout, diagnostics to stderr.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .config import VARIANTS, ConfigError, ModelConfig, RunConfig, load_config
from .ingest import IngestError

logger = logging.getLogger("gdpw")

NYC_REFERENCE_STATS = {"users": 1083, "pois": 5130, "categories": 208, "checkins": 104877, "trajectories": 15992}


class UsageError(Exception):
    pass


def _require_file(path, what: str) -> Path:
    if not path:
        raise UsageError(f"missing {what}")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    return p


# --------------------------------------------------------------------------- config plumbing

def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat YAML run config")
    p.add_argument("--dataset", help="preprocessed dataset file")
    p.add_argument("--graphs", help="graph bundle file")
    p.add_argument("--output-dir", help="output root (default $GDPW_OUTPUT_ROOT or ./runs)")
    for f in dataclasses.fields(ModelConfig):
        t = {"int": int, "float": float, "str": str}[f.type]
        kw = {"choices": VARIANTS} if f.name == "variant" else {}
        p.add_argument(f"--{f.name.replace('_', '-')}", type=t, default=None, dest=f.name, **kw)


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    flat = cfg.to_flat()
    for key in flat:
        val = getattr(args, key, None)
        if val is not None:
            flat[key] = val
    return RunConfig.from_flat(flat)


def _load_inputs(cfg: RunConfig, need_graphs: bool = True):
    from .graphs import GraphBundle
    from .ingest import Dataset

    ds = Dataset.load(_require_file(cfg.dataset, "dataset file"))
    bundle = None
    if need_graphs:
        bundle = GraphBundle.load(_require_file(cfg.graphs, "graph bundle"))
        if bundle.vocab_fingerprint and bundle.vocab_fingerprint != ds.vocab.fingerprint():
            raise UsageError("graph bundle was built from a different dataset")
    return ds, bundle


def _run_dir(cfg: RunConfig, name: str) -> Path:
    d = Path(cfg.output_dir) / f"{name}-{cfg.model.fingerprint()}"
    d.mkdir(parents=True, exist_ok=True)
    return d


# --------------------------------------------------------------------------- commands

def cmd_preprocess(args) -> int:
    from .ingest import preprocess

    raw = _require_file(args.raw, "raw check-in file")
    t0 = time.perf_counter()
    ds = preprocess(raw)
    ds.save(args.out)
    stats = ds.stats()
    print(f"wrote {args.out}")
    _print_stats(stats, ds.meta)
    logger.info("preprocess took %.1fs", time.perf_counter() - t0)
    return 0


def _print_stats(stats: dict, meta: dict | None = None) -> None:
    for key in ("users", "pois", "categories", "checkins", "trajectories"):
        ref = NYC_REFERENCE_STATS[key]
        print(f"{key:>14}: {stats[key]:>9,}   (NYC reference {ref:,}; {100 * (stats[key] - ref) / ref:+.1f}%)")
    print(f"{'split':>14}: {stats['train_trajectories']} / {stats['val_trajectories']} / "
          f"{stats['test_trajectories']}")
    if meta:
        for k in ("raw_records", "malformed_rows", "filtered_checkins"):
            if k in meta:
                print(f"{k:>14}: {meta[k]:,}")


def cmd_build_graphs(args) -> int:
    from .graphs import build_graphs
    from .ingest import Dataset

    ds = Dataset.load(_require_file(args.dataset, "dataset file"))
    bundle = build_graphs(ds, args.sigma_km, args.delta_d_km, args.gravity_denominator, args.ug_weighting)
    bundle.save(args.out)
    ctg = bundle.category_time
    print(f"wrote {args.out}")
    print(f"category graph: {bundle.category.adjacency.shape}")
    print(f"category-time graph: 3 x {ctg.original.shape} (+ transposes)")
    print(f"ug graph: {bundle.ug.adjacency.shape}, {bundle.ug.adjacency.nnz} nonzeros")
    print(f"distance map: {bundle.distance_map.matrix.shape}, {bundle.distance_map.matrix.nnz} nonzeros")
    return 0


def cmd_train(args) -> int:
    from .evaluation import append_ledger, evaluate_model
    from .training import fit

    cfg = _run_config(args)
    ds, bundle = _load_inputs(cfg)
    run = _run_dir(cfg, f"train-{cfg.model.variant}")
    model = fit(ds.samples("train"), ds.samples("val"), bundle, ds.vocab.num_users, cfg.model,
                run_dir=run, run_config=cfg, progress=args.verbose)
    report = evaluate_model(model, ds.samples("test"))
    (run / "test_report.json").write_text(report.to_json())
    append_ledger(report, Path(cfg.output_dir) / "results.jsonl")
    print(run)
    print(report.format())
    return 0


def cmd_evaluate(args) -> int:
    from .evaluation import append_ledger, evaluate

    cfg = _run_config(args)
    ckpt = _require_file(args.checkpoint, "checkpoint")
    ds, bundle = _load_inputs(cfg)
    report = evaluate(ckpt, ds.samples(args.split), bundle, vocab_fingerprint=ds.vocab.fingerprint(),
                      zero_maps=args.zero_maps)
    print(report.to_json() if args.json else report.format())
    if args.ledger:
        append_ledger(report, args.ledger)
    return 0


def _write_table(rows: list[dict], path: Path) -> None:
    cols = ["label", "acc@1", "acc@5", "acc@10", "acc@20", "mrr", "n", "fingerprint"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)


def _print_table(rows: list[dict]) -> None:
    print(f"| {'model':<24} | Acc@1  | Acc@5  | Acc@10 | MRR    |")
    print(f"|{'-' * 26}|--------|--------|--------|--------|")
    for r in rows:
        print(f"| {r['label']:<24} | {r['acc@1']:.4f} | {r['acc@5']:.4f} | {r['acc@10']:.4f} | {r['mrr']:.4f} |")


def cmd_ablate(args) -> int:
    from .evaluation import append_ledger, run_ablation

    cfg = _run_config(args)
    ds, bundle = _load_inputs(cfg)
    variants = VARIANTS if args.variants == "all" else tuple(v.strip() for v in args.variants.split(","))
    bad = [v for v in variants if v not in VARIANTS]
    if bad:
        raise UsageError(f"unknown variants: {bad}")
    out = _run_dir(cfg, "ablate")
    rows = []
    # ablations first, full model last
    for v in [v for v in variants if v != "full"] + (["full"] if "full" in variants else []):
        logger.info("ablation %s", v)
        rep = run_ablation(v, ds, cfg.model, bundle=bundle, run_dir=out / v)
        append_ledger(rep, Path(cfg.output_dir) / "results.jsonl")
        rows.append(rep.row())
    _write_table(rows, out / "ablation.csv")
    print(out / "ablation.csv")
    _print_table(rows)
    return 0


def cmd_sweep(args) -> int:
    from .evaluation import append_ledger, evaluate_model
    from .training import fit

    cfg = _run_config(args)
    ds, bundle = _load_inputs(cfg)
    points = []
    if args.grid in ("hidden", "both"):
        points += [("hidden_dim", int(h)) for h in cfg.sweep_hidden_dims]
    if args.grid in ("layers", "both"):
        points += [("gcn_layers", int(n)) for n in cfg.sweep_gcn_layers]
    out = _run_dir(cfg, "sweep")
    rows = []
    for key, val in points:
        mcfg = dataclasses.replace(cfg.model, **{key: val})
        model = fit(ds.samples("train"), ds.samples("val"), bundle, ds.vocab.num_users, mcfg,
                    run_dir=out / f"{key}={val}")
        rep = evaluate_model(model, ds.samples("test"), label=f"{key}={val}")
        append_ledger(rep, Path(cfg.output_dir) / "results.jsonl")
        rows.append(rep.row())
    _write_table(rows, out / "sweep.csv")
    print(out / "sweep.csv")
    _print_table(rows)
    return 0


def _parse_rows(spec: str | None, n: int):
    if not spec:
        return np.arange(n)
    rows = []
    for part in spec.split(","):
        if "-" in part:
            a, b = part.split("-")
            rows.extend(range(int(a), int(b) + 1))
        else:
            rows.append(int(part))
    rows = np.array(rows)
    if rows.size and (rows.min() < 0 or rows.max() >= n):
        raise UsageError(f"row indices must lie in [0, {n})")
    return rows


def cmd_visualize(args) -> int:
    from . import viz

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.what == "histogram":
        from .evaluation import category_time_histogram
        from .ingest import Dataset

        ds = Dataset.load(_require_file(args.dataset, "dataset file"))
        records = [r for t in ds.all_trajectories for r in t.check_ins]
        try:
            bins = category_time_histogram(records, args.category, ds.vocab.category_names)
        except KeyError as e:
            raise UsageError(str(e.args[0])) from None
        paths = viz.export_histogram(bins, args.category, out)
    else:
        from .graphs import GraphBundle

        bundle = GraphBundle.load(_require_file(args.graphs, "graph bundle"))
        if args.what == "dm":
            matrix = bundle.distance_map.matrix
            rows = _parse_rows(args.rows, matrix.shape[0])
            mat = matrix[rows].toarray()
            title = "Distance Map"
        else:
            import torch

            from .training import load_checkpoint

            model, _ = load_checkpoint(_require_file(args.checkpoint, "checkpoint"), bundle)
            with torch.no_grad():
                full = model.full_transition_map().numpy()
            rows = _parse_rows(args.rows, full.shape[0])
            mat = full[rows]
            title = "Transition Weighted Map"
        paths = viz.export_matrix(mat, rows, out, title)
    for p in paths:
        print(p)
    return 0


def cmd_stats(args) -> int:
    from .evaluation import category_time_histogram
    from .ingest import Dataset

    ds = Dataset.load(_require_file(args.dataset, "dataset file"))
    _print_stats(ds.stats(), ds.meta)
    if args.category:
        records = [r for t in ds.all_trajectories for r in t.check_ins]
        try:
            bins = category_time_histogram(records, args.category, ds.vocab.category_names)
        except KeyError as e:
            raise UsageError(str(e.args[0])) from None
        print("weekday", " ".join(map(str, bins[:24])))
        print("weekend", " ".join(map(str, bins[24:])))
    return 0


def cmd_synth(args) -> int:
    from .synthetic import generate

    n = generate(args.out, n_users=args.users, n_pois=args.pois, n_days=args.days, seed=args.seed)
    print(args.out)
    logger.info("wrote %d synthetic check-ins", n)
    return 0


# --------------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gdpw", description="Next-POI recommendation with global graph disentangling")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="progress and info logging on stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", parents=[common], help="raw Foursquare TSV -> dataset file")
    p.add_argument("raw")
    p.add_argument("out")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("build-graphs", parents=[common], help="dataset file -> graph bundle")
    p.add_argument("dataset")
    p.add_argument("out")
    p.add_argument("--sigma-km", type=float, default=1.0)
    p.add_argument("--delta-d-km", type=float, default=5.0)
    p.add_argument("--gravity-denominator", choices=("distance", "distance_squared"), default="distance")
    p.add_argument("--ug-weighting", choices=("gravity", "reciprocal_distance"), default="gravity")
    p.set_defaults(func=cmd_build_graphs)

    p = sub.add_parser("train", parents=[common], help="train one model, evaluate on test")
    _add_model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="evaluate a checkpoint")
    _add_model_flags(p)
    p.add_argument("--checkpoint")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--zero-maps", action="store_true", help="rank by raw logits (no TM/DM)")
    p.add_argument("--ledger", help="append the report to this results file")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", parents=[common], help="train and evaluate ablation variants")
    _add_model_flags(p)
    p.add_argument("--variants", default="all", help="'all' or comma-separated variant names")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", parents=[common], help="hidden-dimension / GCN-layer grids")
    _add_model_flags(p)
    p.add_argument("--grid", choices=("hidden", "layers", "both"), default="both")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("visualize", parents=[common], help="export TM/DM heatmaps or category-time histograms")
    p.add_argument("what", choices=("tm", "dm", "histogram"))
    p.add_argument("--out", required=True, help="output path stem (.csv and .png are written)")
    p.add_argument("--graphs")
    p.add_argument("--checkpoint")
    p.add_argument("--dataset")
    p.add_argument("--category")
    p.add_argument("--rows", help="row subset, e.g. '3,4' or '0-99'")
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser("stats", parents=[common], help="dataset statistics and category-time histograms")
    p.add_argument("dataset")
    p.add_argument("--category")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic check-in log")
    p.add_argument("out")
    p.add_argument("--users", type=int, default=40)
    p.add_argument("--pois", type=int, default=80)
    p.add_argument("--days", type=int, default=60)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    if args.command == "visualize" and args.what == "histogram" and not args.category:
        print("error: histogram needs --category", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (UsageError, ConfigError, IngestError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001
        logger.debug("failure", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
