"""Batch front end.

Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric divergence.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import shutil
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import dataio
from .bank import ORACLE_M, NoiseSpec, aggregate_precision_recall, contaminate, contamination_plan
from .bank import presence_from_labels
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, load_config, parse_config
from .filtering import FilterMode, filter_and_upsample, predict_labels
from .metrics import accumulate, all_metrics, confusion_matrix
from .tensorcore import ConfigError, Tensor
from .training import DivergenceError, LOG_COLUMNS, build_model, evaluate, segment_maps, train

log = logging.getLogger("labelbank")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4

EVAL_COLUMNS = ("checkpoint", "mode", "filter_order", "pAcc", "mAcc", "mIU", "fwIU",
                "micro_precision", "micro_recall", "macro_precision", "macro_recall")
STUDY_COLUMNS = ("method", "pAcc", "mAcc", "mIU", "fwIU")
GRID_COLUMNS = ("n_p", "n_r", "pAcc", "mAcc", "mIU", "fwIU",
                "micro_precision", "micro_recall", "macro_precision", "macro_recall")


class DataError(RuntimeError):
    pass


def write_text_atomic(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def csv_text(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(r[c]) for c in columns])
    return buf.getvalue()


def _cell(v) -> str:
    if isinstance(v, float):
        return "nan" if np.isnan(v) else f"{v:.6f}"
    return str(v)


def read_csv(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# shared helpers


def _load_data(path) -> dataio.Dataset:
    p = Path(path)
    if not (p / "manifest.txt").exists():
        raise DataError(f"no dataset at {p} (run gen-data first)")
    return dataio.load_dataset(p)


def _config_from_args(args) -> ExperimentConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        cfg.override(key.strip(), value)
    return cfg.validate()


def _run_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.experiment.out_dir) / cfg.experiment.name


def run_training(cfg: ExperimentConfig, out: Path, dataset=None) -> dict:
    """Train one configuration and write config, checkpoints and the metrics log under ``out``."""
    dataset = dataset or _load_data(cfg.data.path)
    out.mkdir(parents=True, exist_ok=True)
    write_text_atomic(out / "config.txt", cfg.to_text())
    result = train(dataset, cfg)
    header = "#" + "\t".join(LOG_COLUMNS)
    write_text_atomic(out / "metrics.tsv", "\n".join([header] + result.log_rows) + "\n")
    save_checkpoint(out / "checkpoint.lbck", result.best_arrays)
    save_checkpoint(out / "final.lbck", result.final_arrays)
    return {"best_epoch": result.best_epoch, "history": result.history}


def load_run_model(checkpoint, dataset, config_path=None):
    ck = Path(checkpoint)
    cpath = Path(config_path) if config_path else ck.parent / "config.txt"
    if not cpath.exists():
        raise ConfigError(f"no config found for checkpoint {ck} (expected {cpath})")
    if not ck.exists():
        raise DataError(f"checkpoint {ck} does not exist")
    cfg = load_config(cpath)
    model = build_model(cfg, dataset.k, dataset.n_attributes, len(dataset.vocabulary))
    model.load_arrays(load_checkpoint(ck))
    return cfg, model


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    ds = dataio.generate_synthetic(args.seed, args.n_train, args.k, args.size, args.size,
                                   args.distractor_rate, n_val=args.n_val,
                                   name=Path(args.out).name or "synthetic")
    out = Path(args.out)
    tmp = out.with_name(out.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    dataio.save_dataset(tmp, ds)
    if out.exists():
        shutil.rmtree(out)
    os.replace(tmp, out)
    print(f"wrote {len(ds.train)} train / {len(ds.val)} val images with k={ds.k} to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    out = _run_dir(cfg)
    info = run_training(cfg, out)
    print(f"trained {cfg.experiment.name}: best epoch {info['best_epoch']}, outputs in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    dataset = _load_data(args.data)
    cfg, model = load_run_model(args.checkpoint, dataset, args.config)
    mode = args.mode or cfg.train.mode
    order = args.filter_order or cfg.train.filter_order
    fmode = FilterMode(order, cfg.train.eps)
    res = evaluate(model, dataset.val, mode, fmode, cfg.train.oracle_m)
    row = {"checkpoint": str(args.checkpoint), "mode": mode, "filter_order": order,
           **{k: v for k, v in res.items() if k != "confusion"}}
    for key in EVAL_COLUMNS[3:]:
        print(f"{key}\t{_cell(row[key])}")
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / "eval.csv"
    rows = read_csv(out) if out.exists() else []
    rows.append(row)
    write_text_atomic(out, csv_text(EVAL_COLUMNS, rows))
    return EXIT_OK


def oracle_study(cfg: ExperimentConfig) -> list:
    dataset = _load_data(cfg.data.path)
    root = _run_dir(cfg)
    rows = []
    for method, mode in (("baseline", "baseline"), ("dc_filtered", "filtered"), ("oracle_filtered", "oracle")):
        sub = parse_config(cfg.to_text())
        sub.train.mode = mode
        sub.experiment.name = f"{cfg.experiment.name}/{method}"
        if mode == "filtered":
            sub.head.kind = "dc"
        run_training(sub, root / method, dataset)
        _, model = load_run_model(root / method / "checkpoint.lbck", dataset)
        res = evaluate(model, dataset.val, mode, FilterMode(sub.train.filter_order, sub.train.eps),
                       sub.train.oracle_m)
        rows.append({"method": method, **{k: res[k] for k in STUDY_COLUMNS[1:]}})
    write_text_atomic(root / "oracle_study.csv", csv_text(STUDY_COLUMNS, rows))
    return rows


def cmd_oracle_study(args) -> int:
    cfg = _config_from_args(args)
    rows = oracle_study(cfg)
    for r in rows:
        print("\t".join([r["method"]] + [_cell(r[c]) for c in STUDY_COLUMNS[1:]]))
    return EXIT_OK


def _parse_list(text: str) -> list:
    try:
        vals = [float(x) for x in text.replace(",", " ").split()]
    except ValueError:
        raise ConfigError(f"bad number list {text!r}") from None
    if not vals or any(v < 0 for v in vals):
        raise ConfigError(f"number list must be nonempty and nonnegative: {text!r}")
    return vals


def grid_cell(maps, samples, k: int, n_p: float, n_r: float, seed: int,
              fmode: FilterMode, oracle_m: float = ORACLE_M) -> dict:
    """Evaluate frozen maps under oracle banks contaminated by (n_p, n_r)."""
    spec = NoiseSpec(n_p, n_r, seed)
    n = len(samples)
    plan = contamination_plan(spec, n)
    cm = confusion_matrix(k)
    pairs = []
    for i, (S, s) in enumerate(zip(maps, samples)):
        truth = presence_from_labels(s.labels, k)
        bank, kept = contaminate(truth, spec, k, oracle_m, i, n, plan)
        H, W = s.labels.shape
        full = filter_and_upsample(Tensor(bank.values), Tensor(S), H, W, fmode)
        accumulate(cm, s.labels, predict_labels(full))
        pairs.append((kept, truth))
    return {"n_p": n_p, "n_r": n_r, **all_metrics(cm), **aggregate_precision_recall(pairs)}


def noisy_grid(model, dataset, np_list, nr_list, seed: int, fmode: FilterMode,
               oracle_m: float = ORACLE_M, threads: int | None = None) -> list:
    maps = segment_maps(model, dataset.val)
    cells = [(p, r) for p in np_list for r in nr_list]
    threads = threads or int(os.environ.get("LABELBANK_THREADS", "1") or 1)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(lambda c: grid_cell(maps, dataset.val, dataset.k, c[0], c[1],
                                                     seed, fmode, oracle_m), cells))
    return [grid_cell(maps, dataset.val, dataset.k, p, r, seed, fmode, oracle_m) for p, r in cells]


def cmd_noisy_grid(args) -> int:
    dataset = _load_data(args.data)
    cfg, model = load_run_model(args.checkpoint, dataset, args.config)
    fmode = FilterMode(cfg.train.filter_order, cfg.train.eps)
    rows = noisy_grid(model, dataset, _parse_list(args.np_list), _parse_list(args.nr_list),
                      args.seed, fmode, cfg.train.oracle_m)
    for r in rows:
        r["n_p"], r["n_r"] = _num(r["n_p"]), _num(r["n_r"])
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / "grid.csv"
    write_text_atomic(out, csv_text(GRID_COLUMNS, rows))
    print(f"wrote {len(rows)} grid cells to {out}")
    return EXIT_OK


def _num(v: float) -> str:
    return repr(float(v))


def build_report(runs_dir) -> dict:
    """Collect study tables, eval rows and grids under ``runs_dir`` into a report directory."""
    runs = Path(runs_dir)
    if not runs.is_dir():
        raise DataError(f"runs directory {runs} does not exist")
    report = runs / "report"
    study_rows, eval_rows, grids = [], [], []
    for path in sorted(runs.rglob("*.csv")):
        if report in path.parents:
            continue
        run = str(path.parent.relative_to(runs))
        if path.name == "oracle_study.csv":
            study_rows += [{"run": run, **r} for r in read_csv(path)]
        elif path.name == "eval.csv":
            eval_rows += [{"run": run, **r} for r in read_csv(path)]
        elif path.name.startswith("grid") and path.name.endswith(".csv"):
            grids.append((run, path, read_csv(path)))
    report.mkdir(parents=True, exist_ok=True)
    write_text_atomic(report / "oracle_study.csv", csv_text(("run",) + STUDY_COLUMNS, study_rows))
    write_text_atomic(report / "eval.csv", csv_text(("run",) + EVAL_COLUMNS, eval_rows))
    plot_files = []
    for run, path, rows in grids:
        stem = (run.replace("/", "_") + "_" if run != "." else "") + path.stem
        lines = ["# n_p n_r mIU"] + [f"{r['n_p']} {r['n_r']} {r['mIU']}" for r in rows]
        target = report / f"{stem}.dat"
        write_text_atomic(target, "\n".join(lines) + "\n")
        plot_files.append(target)
    return {"oracle_study": len(study_rows), "eval": len(eval_rows), "grids": plot_files}


def cmd_report(args) -> int:
    info = build_report(args.runs_dir)
    print(f"report: {info['oracle_study']} study rows, {info['eval']} eval rows, "
          f"{len(info['grids'])} grid plot files")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="labelbank", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--out", required=True)
    g.add_argument("--k", type=int, default=6)
    g.add_argument("--n-train", type=int, default=200)
    g.add_argument("--n-val", type=int, default=50)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--distractor-rate", type=float, default=0.3)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one configuration")
    t.add_argument("--config")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the val split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--mode", choices=("baseline", "filtered", "oracle", "multitask"))
    e.add_argument("--filter-order", choices=("filter_then_upsample", "upsample_then_filter"))
    e.add_argument("--config")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    o = sub.add_parser("oracle-study", help="baseline vs DC-filtered vs oracle-filtered")
    o.add_argument("--config")
    o.add_argument("--set", action="append", metavar="KEY=VALUE")
    o.set_defaults(func=cmd_oracle_study)

    n = sub.add_parser("noisy-grid", help="contaminated oracle banks on a frozen checkpoint")
    n.add_argument("--checkpoint", required=True)
    n.add_argument("--data", required=True)
    n.add_argument("--np-list", default="0 1 2 3 4 5")
    n.add_argument("--nr-list", default="0 1 2 3 4 5")
    n.add_argument("--seed", type=int, default=0)
    n.add_argument("--config")
    n.add_argument("--out")
    n.set_defaults(func=cmd_noisy_grid)

    r = sub.add_parser("report", help="aggregate CSVs into tables and plot data")
    r.add_argument("--runs-dir", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        # overflow shows up as a non-finite loss and is reported as divergence
        with np.errstate(over="ignore", invalid="ignore"):
            return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, dataio.FormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
