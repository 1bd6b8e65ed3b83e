"""Command line entry point.

    imputecast simulate --n 50000 --seed 0 --out data.csv
    imputecast train --data data.csv --method endtoend --missing-rate 0.25 --seed 0
    imputecast evaluate --run-dir runs/endtoend-0 --data data.csv
    imputecast compare runs/*/report.json

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional

from . import __version__
from .metrics import EvaluationReport, write_forecast_csv
from .model import load_checkpoint, params_digest, save_checkpoint
from .pipeline import (
    MinMax,
    SimulationSpec,
    SplitSpec,
    apply_mcar,
    ingest_csv,
    lag_steps,
    simulate,
    write_csv,
)
from .train import DEFAULT_LEVELS, DEFAULT_OPTIMUM, TrainConfig, grid_search
from .workflow import METHODS, Prepared, evaluate_test, prepare, train_method

log = logging.getLogger("imputecast")

OUTPUT_ENV = "IMPUTECAST_OUTPUT_DIR"


@dataclasses.dataclass
class RunConfig:
    data: Optional[str] = None
    method: str = "endtoend"
    missing_rate: float = 0.25
    seed: int = 0
    split: tuple = (0.6, 0.2, 0.2)
    out_dir: Optional[str] = None
    n_layers: int = DEFAULT_OPTIMUM["n_layers"]
    hidden: int = DEFAULT_OPTIMUM["hidden"]
    lag_minutes: float = DEFAULT_OPTIMUM["lag_minutes"]
    lr: float = DEFAULT_OPTIMUM["lr"]
    batch_size: int = 64
    T: int = 32
    max_epochs: int = 200
    patience: int = 20
    levels: tuple = DEFAULT_LEVELS
    grad_through_imputation: bool = True
    optimizer: str = "adam"
    knn_k: int = 5
    grid: Optional[dict] = None
    # weight-initialization seed when it differs from ``seed`` (set by grid search)
    model_seed: Optional[int] = None

    def validate(self) -> None:
        if self.method not in METHODS:
            raise UsageError(f"invalid method {self.method!r}; choose from {', '.join(METHODS)}")
        if not 0.0 <= self.missing_rate <= 1.0:
            raise UsageError("--missing-rate must be in [0, 1]")
        if self.data is None:
            raise UsageError("no data file given (--data or config)")

    def train_config(self, resolution: int) -> TrainConfig:
        return TrainConfig(levels=tuple(self.levels), lr=self.lr, batch_size=self.batch_size,
                           T=self.T, lag=lag_steps(self.lag_minutes, resolution),
                           n_layers=self.n_layers, hidden=self.hidden,
                           seed=self.seed if self.model_seed is None else self.model_seed,
                           patience=self.patience, max_epochs=self.max_epochs,
                           grad_through_imputation=self.grad_through_imputation,
                           optimizer=self.optimizer)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["split"] = list(self.split)
        d["levels"] = list(self.levels)
        return d


class UsageError(Exception):
    pass


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _default_out(name: str) -> Path:
    return Path(os.environ.get(OUTPUT_ENV, "runs")) / name


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(args) -> int:
    spec = SimulationSpec(n=args.n, capacity=args.capacity, period=args.period,
                          ar_coef=args.ar_coef, noise=args.noise)
    try:
        spec.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    series = simulate(spec, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(out, series)
    _write_json(out.with_suffix(out.suffix + ".params.json"),
                {"seed": args.seed, **dataclasses.asdict(spec)})
    print(f"wrote {len(series)} rows to {out}")
    return 0


# ---------------------------------------------------------------------------
# train


def _run_config(args) -> RunConfig:
    base = {}
    if args.config:
        base = json.loads(Path(args.config).read_text(encoding="utf-8"))
    fields = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(base) - fields
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    for name in fields:
        val = getattr(args, name, None)
        if val is not None:
            base[name] = val
    if getattr(args, "grid_file", None):
        base["grid"] = json.loads(Path(args.grid_file).read_text(encoding="utf-8"))
    for key in ("split", "levels"):
        if key in base:
            base[key] = tuple(base[key])
    cfg = RunConfig(**base)
    cfg.validate()
    return cfg


def cmd_train(args) -> int:
    rc = _run_config(args)
    out = Path(rc.out_dir) if rc.out_dir else _default_out(f"{rc.method}-{rc.seed}")
    rc.out_dir = str(out)
    out.mkdir(parents=True, exist_ok=True)
    raw = ingest_csv(rc.data)
    split = SplitSpec(*rc.split)
    prep = prepare(raw, rc.missing_rate, rc.seed, split)
    cfg = rc.train_config(raw.resolution)

    grid_results = None
    if rc.grid:
        cfg, grid_results = grid_search(prep.series, rc.grid, split, rc.seed, base=cfg)
        rc.n_layers, rc.hidden, rc.lr = cfg.n_layers, cfg.hidden, cfg.lr
        rc.model_seed = cfg.seed
        rc.lag_minutes = cfg.lag * raw.resolution / 60.0
        rc.grid = None  # the snapshot records the chosen point

    def progress(epoch, tr, va):
        log.info("epoch %d  train %.6f  val %.6f", epoch, tr, va)

    params, report = train_method(prep, rc.method, cfg, rc.knn_k, progress=progress)
    meta = {"missing_rate": rc.missing_rate, "seed": rc.seed, "split": list(rc.split)}
    digest = save_checkpoint(out / "checkpoint.json", params, cfg.levels,
                             prep.scaler.to_dict(), meta)
    report.checkpoint = "checkpoint.json"
    doc = report.to_dict()
    doc["checkpoint_sha256"] = digest
    doc["method"] = rc.method
    if grid_results is not None:
        doc["grid"] = [{"point": g.point, "val_loss": g.val_loss, "error": g.error}
                       for g in grid_results]
    _write_json(out / "train_report.json", doc)
    _write_json(out / "config.json", rc.to_dict())
    print(f"{rc.method}: stopped at epoch {report.stop_epoch} ({report.stop_reason}), "
          f"best val loss {report.best_val_loss:.6f} at epoch {report.best_epoch}; wrote {out}")
    return 0


# ---------------------------------------------------------------------------
# evaluate


def cmd_evaluate(args) -> int:
    run_dir = Path(args.run_dir) if args.run_dir else None
    ckpt = Path(args.checkpoint) if args.checkpoint else (run_dir / "checkpoint.json" if run_dir else None)
    if ckpt is None:
        raise UsageError("give --checkpoint or --run-dir")
    params, levels, norm, meta = load_checkpoint(ckpt)
    if args.data is None and run_dir is not None and (run_dir / "config.json").exists():
        args.data = json.loads((run_dir / "config.json").read_text())["data"]
    if args.data is None:
        raise UsageError("no data file given")
    raw = ingest_csv(args.data)
    rate = meta.get("missing_rate", 0.0) if args.missing_rate is None else args.missing_rate
    seed = meta.get("seed", 0) if args.seed is None else args.seed
    split = SplitSpec(*meta.get("split", (0.6, 0.2, 0.2)))
    if not norm:
        raise ValueError(f"{ckpt}: checkpoint carries no normalization constants")
    scaler = MinMax.from_dict(norm)
    corrupted = apply_mcar(raw, rate, seed)
    normed = dataclasses.replace(corrupted, values=scaler.apply(corrupted.values))
    prep = Prepared(normed, scaler, split)
    cfg = TrainConfig(levels=levels, lag=params.arch.lag, n_layers=params.arch.n_layers,
                      hidden=params.arch.hidden)
    rep_meta = {"missing_rate": rate, "seed": seed, "model_id": params_digest(params),
                "levels": list(levels)}
    report, fc, seg = evaluate_test(params, prep, cfg, meta=rep_meta)
    out = Path(args.out_dir) if args.out_dir else (run_dir or ckpt.parent)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    report.write_csv(out / "report_levels.csv")
    write_forecast_csv(out / "forecast.csv", fc, seg, levels,
                       scaler=scaler if args.original_units else None)
    print(f"R={report.reliability:.4f}%  S={report.sharpness:.6f}  Sk={report.skill:.6f}  "
          f"N={report.n}; wrote {out}")
    return 0


# ---------------------------------------------------------------------------
# compare


def compare_reports(named: list[tuple[str, EvaluationReport]]):
    """Rows ``(name, R%, S, Sk, flags)``; flags mark the best value per column.

    Lower is better for R and S, higher for Sk; the first row wins ties.
    """
    best_r = min(range(len(named)), key=lambda i: named[i][1].reliability)
    best_s = min(range(len(named)), key=lambda i: named[i][1].sharpness)
    best_k = max(range(len(named)), key=lambda i: (named[i][1].skill, -i))
    rows = []
    for i, (name, rep) in enumerate(named):
        flags = "".join(c for c, b in (("R", best_r), ("S", best_s), ("K", best_k)) if b == i)
        rows.append((name, rep.reliability, rep.sharpness, rep.skill, flags))
    return rows


def cmd_compare(args) -> int:
    if len(args.reports) < 2:
        raise UsageError("compare needs at least two report files")
    names = args.names or []
    if names and len(names) != len(args.reports):
        raise UsageError("--names must match the number of reports")
    named = []
    for i, path in enumerate(args.reports):
        try:
            rep = EvaluationReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
            float(rep.reliability), float(rep.sharpness), float(rep.skill)
        except (OSError, ValueError, TypeError, KeyError) as exc:
            raise ValueError(f"{path}: malformed report ({exc})") from exc
        name = names[i] if names else Path(path).parent.name or Path(path).stem
        named.append((name, rep))
    rows = compare_reports(named)
    width = max(len(r[0]) for r in rows + [("method",)])
    print(f"{'method':<{width}}  {'R_l%':>9}  {'S_l':>9}  {'Sk_l':>9}")
    for name, r, s, k, flags in rows:
        mark = lambda c, v, f: f"{v:>8.4f}{'*' if c in flags else ' '}"
        print(f"{name:<{width}}  {mark('R', r, flags)}  {mark('S', s, flags)}  {mark('K', k, flags)}")
    if args.out:
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method", "R_l_percent", "S_l", "Sk_l", "best"])
            for name, r, s, k, flags in rows:
                w.writerow([name, repr(r), repr(s), repr(k), flags])
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="imputecast",
                                description="End-to-end quantile forecasting with missing data")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="write a synthetic power series CSV")
    s.add_argument("--n", type=int, default=50_000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--capacity", type=float, default=52.5)
    s.add_argument("--period", type=int, default=288)
    s.add_argument("--ar-coef", type=float, default=0.98)
    s.add_argument("--noise", type=float, default=0.04)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", help="train a forecaster")
    t.add_argument("--config", help="JSON run config; flags override it")
    t.add_argument("--data")
    t.add_argument("--method", choices=METHODS)
    t.add_argument("--missing-rate", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--split", type=float, nargs=3, metavar=("TRAIN", "VAL", "TEST"))
    t.add_argument("--out-dir", help=f"default: ${OUTPUT_ENV}/<method>-<seed>")
    t.add_argument("--n-layers", type=int)
    t.add_argument("--hidden", type=int)
    t.add_argument("--lag-minutes", type=float)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--T", type=int)
    t.add_argument("--max-epochs", type=int)
    t.add_argument("--patience", type=int)
    t.add_argument("--knn-k", type=int)
    t.add_argument("--optimizer", choices=("adam", "sgd"))
    t.add_argument("--no-grad-through-imputation", dest="grad_through_imputation",
                   action="store_const", const=False)
    t.add_argument("--grid", dest="grid_file", help="JSON grid for grid search")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="evaluate a checkpoint on the test split")
    e.add_argument("--run-dir")
    e.add_argument("--checkpoint")
    e.add_argument("--data")
    e.add_argument("--missing-rate", type=float)
    e.add_argument("--seed", type=int)
    e.add_argument("--out-dir")
    e.add_argument("--original-units", action="store_true",
                   help="write forecast.csv in original units instead of normalized")
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("compare", help="tabulate evaluation reports")
    c.add_argument("reports", nargs="+")
    c.add_argument("--names", nargs="+")
    c.add_argument("--out", help="CSV output path")
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"imputecast: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures map to exit code 1
        log.debug("failure", exc_info=True)
        print(f"imputecast: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
