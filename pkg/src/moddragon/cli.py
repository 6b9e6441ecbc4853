"""Command line: generate data, train one model, run a multi-realization benchmark."""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import benchstats
from ._io import atomic_write
from .data import (dumps_realization, generate_ihdp_like, generate_synthetic,
                   list_realizations, load_ihdp_csv)
from .estimation import evaluate
from .model import DivergenceError, TrainConfig, Variant, save_snapshot, train
from .neighbors import DistanceMetric, GroupTooSmall

log = logging.getLogger("moddragon")

OUTPUT_ENV = "MODDRAGON_OUTPUT_DIR"
VARIANTS = ("baseline", "mod-euclidean", "mod-manhattan", "mod-chebyshev")
METRICS = {"ate": "eps_ate", "pehe": "eps_pehe"}
RECORD_FIELDS = ("realization", "model", "seed", "true_ate", "psi_hat", "eps_ate", "eps_pehe",
                 "root_pehe", "eps_ate_heldout", "eps_pehe_heldout", "root_pehe_heldout")


class CliError(Exception):
    pass


def default_output_dir() -> Path:
    return Path(os.environ.get(OUTPUT_ENV, "moddragon-out"))


def resolve_variant(name: str, distance: Optional[str] = None) -> tuple[Variant, DistanceMetric]:
    """Map a CLI variant name (plus optional --distance) to model variant and metric."""
    if name == "baseline":
        return Variant.BASELINE, DistanceMetric.EUCLIDEAN
    if name == "modified":
        return Variant.MODIFIED, DistanceMetric.parse(distance or "euclidean")
    if name.startswith("mod-"):
        metric = DistanceMetric.parse(name[4:])
        if distance is not None and DistanceMetric.parse(distance) is not metric:
            raise CliError(f"--distance {distance} contradicts --variant {name}")
        return Variant.MODIFIED, metric
    raise CliError(f"unknown variant {name!r}; choose from baseline, modified, {', '.join(VARIANTS[1:])}")


def realization_seed(base_seed: int, realization_id: str) -> int:
    """Seed for one realization; depends only on the base seed and the id."""
    ss = np.random.SeedSequence([base_seed, zlib.crc32(realization_id.encode())])
    return int(ss.generate_state(1)[0] & 0x7FFFFFFF)


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


# -- shared training flags -------------------------------------------------

def _add_training_flags(p: argparse.ArgumentParser, *, with_k_default: bool = True):
    d = TrainConfig()
    p.add_argument("--k", type=int, default=None if not with_k_default else d.k,
                   help=f"neighbours per treatment arm (default {d.k})")
    p.add_argument("--alpha", type=float, default=d.alpha,
                   help=f"propensity loss weight (default {d.alpha})")
    p.add_argument("--beta", type=float, default=d.beta,
                   help=f"targeted regularization weight, 0 disables it (default {d.beta})")
    p.add_argument("--epochs", type=int, default=d.epochs, help=f"max epochs (default {d.epochs})")
    p.add_argument("--batch-size", type=int, default=d.batch_size,
                   help=f"mini-batch size (default {d.batch_size})")
    p.add_argument("--patience", type=int, default=d.patience,
                   help=f"early-stopping patience in epochs (default {d.patience})")
    p.add_argument("--lr", type=float, default=d.learning_rate,
                   help=f"SGD learning rate (default {d.learning_rate})")
    p.add_argument("--momentum", type=float, default=d.momentum,
                   help=f"SGD momentum (default {d.momentum})")
    p.add_argument("--val-fraction", type=float, default=d.validation_fraction,
                   help=f"share of training rows used for early stopping (default {d.validation_fraction})")
    p.add_argument("--test-fraction", type=float, default=d.test_fraction,
                   help="share of rows held out for held-out metrics (default 0: "
                        "whole-realization training, in-sample metrics)")
    p.add_argument("--no-standardize", action="store_true",
                   help="use raw covariates and outcomes (default: standardize on training rows)")
    p.add_argument("--no-self-exclusion", action="store_true",
                   help="let a training row count as its own neighbour (default: excluded)")
    p.add_argument("--seed", type=int, default=0, help="base random seed (default 0)")


def _config(args, metric: DistanceMetric, seed: int) -> TrainConfig:
    return TrainConfig(
        alpha=args.alpha, beta=args.beta, k=args.k if args.k is not None else TrainConfig.k,
        metric=metric, validation_fraction=args.val_fraction, test_fraction=args.test_fraction,
        epochs=args.epochs, batch_size=args.batch_size, patience=args.patience,
        learning_rate=args.lr, momentum=args.momentum, seed=seed,
        standardize=not args.no_standardize, self_exclusion=not args.no_self_exclusion,
    )


def _record(realization: str, model: str, seed: int, metrics: dict) -> dict:
    ins = metrics["in_sample"]
    held = metrics.get("heldout", {})
    return {
        "realization": realization, "model": model, "seed": str(seed),
        "true_ate": _fmt(ins["true_ate"]), "psi_hat": _fmt(ins["psi_hat"]),
        "eps_ate": _fmt(ins["eps_ate"]), "eps_pehe": _fmt(ins["eps_pehe"]),
        "root_pehe": _fmt(ins["root_pehe"]),
        "eps_ate_heldout": _fmt(held.get("eps_ate")),
        "eps_pehe_heldout": _fmt(held.get("eps_pehe")),
        "root_pehe_heldout": _fmt(held.get("root_pehe")),
    }


# -- generate --------------------------------------------------------------

def cmd_generate(args) -> int:
    def make(seed):
        if args.kind == "ihdp-like":
            return generate_ihdp_like(seed=seed, noise_sd=args.noise_sd)
        return generate_synthetic(n=args.n, d=args.d, confounding_strength=args.confounding,
                                  ate_target=args.ate, noise_sd=args.noise_sd, seed=seed,
                                  heterogeneity=args.heterogeneity)

    out = Path(args.out)
    if args.realizations == 1:
        ds = make(args.seed)
        atomic_write(out, dumps_realization(ds))
        print(f"true_ate,{ds.true_ate()!r}")
        return 0
    print("realization,true_ate")
    for i in range(args.realizations):
        ds = make(args.seed + i)
        path = out / f"realization_{i + 1:04d}.csv"
        atomic_write(path, dumps_realization(ds))
        print(f"{path.stem},{ds.true_ate()!r}")
    return 0


# -- train -----------------------------------------------------------------

def cmd_train(args) -> int:
    variant, metric = resolve_variant(args.variant, args.distance)
    if variant is Variant.BASELINE:
        ignored = [f for f, v in (("--distance", args.distance), ("--k", args.k)) if v is not None]
        if ignored:
            log.warning("--variant baseline ignores %s", " and ".join(ignored))
    stem = Path(args.data).stem
    cfg = _config(args, metric, args.seed)
    snapshot = args.snapshot
    if snapshot is None and not args.no_snapshot:
        snapshot = str(default_output_dir() / "models" / args.variant / f"{stem}.snap")
    ds = load_ihdp_csv(args.data)
    result = train(ds, cfg, variant)
    metrics = evaluate(result, ds)
    rec = _record(stem, args.variant, args.seed, metrics)
    print(_csv_text(RECORD_FIELDS, [[rec[f] for f in RECORD_FIELDS]]), end="")
    if snapshot:
        save_snapshot(result.model, snapshot)
    return 0


# -- bench -----------------------------------------------------------------

@dataclass(frozen=True)
class _Cell:
    path: str
    realization: str
    variant: str
    seed: int
    config: TrainConfig
    snapshot: Optional[str]


def _run_cell(cell: _Cell):
    try:
        variant, metric = resolve_variant(cell.variant)
        cfg = TrainConfig(**{**cell.config.__dict__, "metric": metric, "seed": cell.seed})
        ds = load_ihdp_csv(cell.path)
        result = train(ds, cfg, variant)
        metrics = evaluate(result, ds)
        if cell.snapshot:
            save_snapshot(result.model, cell.snapshot)
        return _record(cell.realization, cell.variant, cell.seed, metrics), None
    except (GroupTooSmall, DivergenceError, ValueError, OSError) as exc:
        return None, (cell.realization, cell.variant, f"{type(exc).__name__}: {exc}")


def write_reports(records: list[dict], models: list[str], out_dir: Path) -> dict:
    """Profiles and FAR/Finner tables for every metric from a list of records."""
    by_key = {(r["realization"], r["model"]): r for r in records}
    realizations = sorted({r["realization"] for r in records})
    complete = [rid for rid in realizations if all((rid, m) in by_key for m in models)]
    reports = {}
    if not complete:
        return reports
    for short, field in METRICS.items():
        values = np.array([[float(by_key[(rid, m)][field]) for m in models] for rid in complete])
        rm = benchstats.ResultMatrix.from_array(values, models, complete)
        curve = benchstats.performance_profile(rm)
        atomic_write(out_dir / f"profile_{short}.csv", curve.to_csv())
        if len(models) >= 2 and len(complete) >= 2:
            far = benchstats.friedman_aligned_ranks(rm)
            atomic_write(out_dir / f"far_{short}.csv", far.to_csv())
            atomic_write(out_dir / f"far_{short}.txt", far.to_text())
            reports[short] = far
    return reports


def _write_records(records: list[dict], path: Path):
    records = sorted(records, key=lambda r: (r["realization"], r["model"]))
    atomic_write(path, _csv_text(RECORD_FIELDS, [[r[f] for f in RECORD_FIELDS] for r in records]))


def cmd_bench(args) -> int:
    models = [m.strip() for m in args.variants.split(",") if m.strip()]
    for m in models:
        resolve_variant(m)
    files = list_realizations(args.data_dir)
    if args.limit is not None:
        files = files[: args.limit]
    if not files:
        raise CliError(f"no realization files in {args.data_dir}")
    out_dir = Path(args.out_dir) if args.out_dir else default_output_dir()
    base_cfg = _config(args, DistanceMetric.EUCLIDEAN, args.seed)
    cells = []
    for f in files:
        seed = realization_seed(args.seed, f.stem)
        for m in models:
            snap = None if args.no_snapshot else str(out_dir / "models" / m / f"{f.stem}.snap")
            cells.append(_Cell(str(f), f.stem, m, seed, base_cfg, snap))

    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            outcomes = list(pool.map(_run_cell, cells))
    else:
        outcomes = [_run_cell(c) for c in cells]

    records = [r for r, _ in outcomes if r is not None]
    failures = [f for _, f in outcomes if f is not None]
    for rid, m, msg in failures:
        log.warning("realization %s, model %s failed: %s", rid, m, msg)
    if not records:
        raise CliError("every realization failed")
    _write_records(records, out_dir / "records.csv")
    if failures:
        atomic_write(out_dir / "failures.csv",
                     _csv_text(("realization", "model", "error"), sorted(failures)))
    reports = write_reports(records, models, out_dir)
    for short, far in reports.items():
        print(f"[{METRICS[short]}]")
        print(far.to_text())
    print(f"wrote {len(records)} records to {out_dir / 'records.csv'}")
    return 0


def cmd_report(args) -> int:
    with open(args.records, newline="") as fh:
        records = list(csv.DictReader(fh))
    models = ([m.strip() for m in args.variants.split(",")] if args.variants
              else sorted({r["model"] for r in records}))
    out_dir = Path(args.out_dir) if args.out_dir else Path(args.records).parent
    reports = write_reports(records, models, out_dir)
    for short, far in reports.items():
        print(f"[{METRICS[short]}]")
        print(far.to_text())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moddragon", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write synthetic realization file(s)")
    g.add_argument("--out", required=True,
                   help="output file, or directory when --realizations > 1")
    g.add_argument("--kind", choices=("synthetic", "ihdp-like"), default="synthetic",
                   help="synthetic: linear+sine DGP; ihdp-like: 747x25 surrogate with 139 treated "
                        "(default synthetic)")
    g.add_argument("--n", type=int, default=1000, help="rows, synthetic only (default 1000)")
    g.add_argument("--d", type=int, default=10, help="covariates, synthetic only (default 10)")
    g.add_argument("--ate", type=float, default=1.0, help="average treatment effect, synthetic only (default 1.0)")
    g.add_argument("--confounding", type=float, default=1.0, help="confounding strength, synthetic only (default 1.0)")
    g.add_argument("--heterogeneity", type=float, default=0.0,
                   help="spread of the individual effects, 0 = constant, synthetic only (default 0)")
    g.add_argument("--noise-sd", type=float, default=1.0, help="outcome noise standard deviation (default 1.0)")
    g.add_argument("--realizations", type=int, default=1, help="number of files to write (default 1)")
    g.add_argument("--seed", type=int, default=0, help="seed of the first realization (default 0)")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train and evaluate one model on one realization")
    t.add_argument("--data", required=True, help="realization CSV file")
    t.add_argument("--variant", default="mod-euclidean",
                   help=f"one of baseline, modified, {', '.join(VARIANTS[1:])} (default mod-euclidean)")
    t.add_argument("--distance", choices=[m.value for m in DistanceMetric], default=None,
                   help="neighbour distance for --variant modified (default euclidean)")
    t.add_argument("--snapshot", default=None,
                   help=f"model snapshot path (default ${OUTPUT_ENV}/models/<variant>/<stem>.snap)")
    t.add_argument("--no-snapshot", action="store_true", help="do not write a snapshot")
    _add_training_flags(t, with_k_default=False)
    t.set_defaults(func=cmd_train)

    b = sub.add_parser("bench", help="train every variant on every realization and compare")
    b.add_argument("--data-dir", required=True, help="directory of realization CSV files")
    b.add_argument("--variants", default=",".join(VARIANTS), help=f"comma-separated variant list (default {','.join(VARIANTS)})")
    b.add_argument("--limit", type=int, default=None, help="use only the first N realizations (default all)")
    b.add_argument("--out-dir", default=None, help=f"output directory (default ${OUTPUT_ENV} or ./moddragon-out)")
    b.add_argument("--jobs", type=int, default=1, help="parallel worker processes (default 1)")
    b.add_argument("--no-snapshot", action="store_true", help="do not write model snapshots")
    _add_training_flags(b)
    b.set_defaults(func=cmd_bench)

    r = sub.add_parser("report", help="recompute profiles and FAR tables from records.csv")
    r.add_argument("--records", required=True, help="records.csv written by bench")
    r.add_argument("--variants", default=None, help="comma-separated model subset/order (default all)")
    r.add_argument("--out-dir", default=None, help="output directory (default: next to records)")
    r.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, GroupTooSmall, DivergenceError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
