"""``slicenet`` command line: synth, train, eval, ablate, report.

Exit codes: 0 success, 2 configuration or argument error, 3 data or I/O
error, 4 numerical abort (non-finite loss during training).
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import statistics
import sys
from pathlib import Path

from . import config as config_mod
from .config import RunConfig, parse_override
from .data import Dataset, split_sizes, synth_dataset
from .errors import ConfigurationError, DataError, NumericalError
from .models import build_model, load_checkpoint
from .training import REPORT_SCHEMA, DropSpec, RunReport, evaluate_runs, subsample, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4

SUITES = ("missing_kth", "missing_rand", "less_data", "axes")


def _say(*args) -> None:
    print(*args, flush=True)


def _warn(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _parse_dims(text: str) -> tuple[int, int, int]:
    try:
        dims = tuple(int(x) for x in text.split(","))
    except ValueError:
        raise ConfigurationError(f"--dims must be three comma-separated integers, got {text!r}") from None
    if len(dims) != 3:
        raise ConfigurationError(f"--dims needs exactly three extents, got {text!r}")
    return dims


def _parse_seeds(text: str) -> int | list[int]:
    try:
        if "," in text:
            return [int(x) for x in text.split(",") if x.strip()]
        count = int(text)
    except ValueError:
        raise ConfigurationError(f"--seeds takes a count or a comma list, got {text!r}") from None
    if count < 1:
        raise ConfigurationError("--seeds count must be >= 1")
    return count


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# -- synth ----------------------------------------------------------------------------------

def cmd_synth(args) -> int:
    dims = _parse_dims(args.dims)
    if args.n < 3:
        raise ConfigurationError(f"--n {args.n} cannot fill the train/val/test splits; need at least 3")
    out = Path(args.out)
    sizes = split_sizes(args.n)
    manifest, _ = synth_dataset(args.n, dims, seed=args.seed, noise_level=args.noise,
                                out_dir=out, age_dist=args.age_dist)
    (out / config_mod.FILENAME).write_text(
        f"synth.age_dist = {args.age_dist}\nsynth.dims = {args.dims}\nsynth.n = {args.n}\n"
        f"synth.noise = {args.noise}\nsynth.seed = {args.seed}\n")
    _write_json(out / "report.json", {"schema": REPORT_SCHEMA, "subjects": args.n, "dims": list(dims),
                                      "splits": dict(zip(("train", "val", "test"), sizes))})
    counts = manifest.split_sizes()
    _say(f"wrote {args.n} volumes to {out} (train={counts['train']} val={counts['val']} test={counts['test']})")
    return EXIT_OK


# -- train ------------------------------------------------------------------------------------

def _resolve(args) -> RunConfig:
    overrides = dict(parse_override(item) for item in args.set or [])
    shortcuts = {"data.dir": args.data, "out.dir": args.out, "model.family": args.model,
                 "model.axis": args.axis, "train.epochs": args.epochs, "train.lr": args.lr}
    if args.seed is not None:
        shortcuts.update({"model.seed": args.seed, "train.seed": args.seed})
    overrides.update({k: str(v) for k, v in shortcuts.items() if v is not None})
    return RunConfig.load(args.config, overrides)


def _train_run(cfg: RunConfig, dataset: Dataset, out_dir: Path, log=_say) -> RunReport:
    """Train one configured model into ``out_dir`` (config, checkpoint, report, curve)."""
    spec = cfg.model_spec(input_dims=dataset.dims)
    model = build_model(spec)
    tc = cfg.train_config(spec.family)
    if cfg.subsample_n is not None:
        tc = subsample(dataset, cfg.subsample_n, tc.seed, tc)
    cfg.write(out_dir)
    report = train(model, dataset, tc, checkpoint_path=out_dir / "model.ckpt", log=log)
    report.write(out_dir)
    return report


def cmd_train(args) -> int:
    cfg = _resolve(args)
    dataset = Dataset.from_manifest(cfg["data.dir"])
    report = _train_run(cfg, dataset, Path(cfg["out.dir"]))
    _say(f"test_mae={report.test_mae:.6f} params={report.param_count} best_epoch={report.best_epoch}")
    return EXIT_OK


# -- eval ----------------------------------------------------------------------------------------

def _data_dir_for(checkpoint: Path, explicit: str | None) -> str:
    if explicit:
        return explicit
    beside = checkpoint.parent / config_mod.FILENAME
    if beside.exists():
        return RunConfig.load(beside)["data.dir"]
    raise ConfigurationError(f"no --data given and no {config_mod.FILENAME} beside {checkpoint}")


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    model = load_checkpoint(ckpt)
    dataset = Dataset.from_manifest(_data_dir_for(ckpt, args.data))
    volumes = dataset.split(args.split)
    if not volumes:
        raise ConfigurationError(f"the {args.split} split is empty")
    axis = args.axis or model.spec.axis
    seeds = _parse_seeds(args.seeds)
    results = []
    for text in args.drop or ["none"]:
        drop = DropSpec.parse(text)
        runs = evaluate_runs(model, volumes, axis=axis, drop=drop, impute=args.impute,
                             seed=args.seed, runs=seeds)
        results.append({"drop": str(drop), "mae": statistics.fmean(runs),
                        "std": statistics.pstdev(runs) if len(runs) > 1 else 0.0, "runs": runs})
    payload = {"schema": REPORT_SCHEMA, "checkpoint": str(ckpt), "family": model.spec.family,
               "split": args.split, "axis": axis, "impute": args.impute, "seed": args.seed,
               "results": results}
    if args.out:
        out = Path(args.out)
        (out / config_mod.FILENAME).parent.mkdir(parents=True, exist_ok=True)
        (out / config_mod.FILENAME).write_text(
            f"eval.axis = {axis}\neval.checkpoint = {ckpt}\neval.drop = {','.join(r['drop'] for r in results)}\n"
            f"eval.impute = {args.impute}\neval.seed = {args.seed}\neval.seeds = {args.seeds}\n"
            f"eval.split = {args.split}\n")
        _write_json(out / "metrics.json", payload)
    _say(json.dumps(payload, sort_keys=True))
    return EXIT_OK


# -- ablate ----------------------------------------------------------------------------------------

def _run_name(family: str, axis: str, n: int | None = None) -> str:
    name = family if family == "cnn3d" else f"{family}_{axis}"
    return name if n is None else f"{name}_n{n}"


def _suite_runs(cfg: RunConfig, suite: str, full_n: int) -> list[tuple[str, dict]]:
    """(run name, config overrides) for every training run the suite needs."""
    families = cfg.grid("models")
    axis = cfg["model.axis"]
    if suite in ("missing_kth", "missing_rand"):
        return [(_run_name(f, axis), {"model.family": f, "model.axis": axis}) for f in families]
    if suite == "axes":
        return [(_run_name(f, a), {"model.family": f, "model.axis": a})
                for f in families if f != "cnn3d" for a in cfg.grid("axes")]
    runs = []
    for f in families:
        for frac in cfg.grid("fractions"):
            n = max(1, round(frac * full_n))
            runs.append((_run_name(f, axis, n),
                         {"model.family": f, "model.axis": axis, "train.subsample_n": str(n)}))
    return runs


def _ensure_runs(cfg: RunConfig, dataset: Dataset, runs_dir: Path, needed, allow_train: bool) -> dict:
    """Load (or train) every needed run. Returns name -> (model, report) or None if it diverged."""
    missing = [name for name, _ in needed if not (runs_dir / name / "model.ckpt").exists()]
    if missing and not allow_train:
        raise ConfigurationError(
            f"missing trained runs under {runs_dir}: {', '.join(missing)}; "
            "pass --train to train them with the current config")
    out = {}
    for name, overrides in needed:
        run_dir = runs_dir / name
        if name in missing:
            run_cfg = RunConfig(dict(cfg.values))
            run_cfg.update({**overrides, "out.dir": str(run_dir)})
            _say(f"training {name}")
            try:
                _train_run(run_cfg, dataset, run_dir, log=None)
            except NumericalError as exc:
                _warn(f"{name}: {exc}")
                out[name] = None
                continue
        report = RunReport.from_json((run_dir / "report.json").read_text())
        out[name] = (load_checkpoint(run_dir / "model.ckpt"), report)
    return out


def _table_rows(suite: str, cfg: RunConfig, runs: dict, dataset: Dataset):
    """Rows of (method label, [cell values]) with methods as rows and grid values as columns."""
    axis = cfg["model.axis"]
    seed = int(cfg["ablate.eval_seed"])
    if suite in ("missing_kth", "missing_rand"):
        grid = cfg.grid("kth") if suite == "missing_kth" else cfg.grid("rand")
        columns = [f"k={k}" for k in grid] if suite == "missing_kth" else [f"keep={f:g}" for f in grid]
        drops = [f"kth:{k}" for k in grid] if suite == "missing_kth" else [f"rand:{f:g}" for f in grid]
        rows = []
        for family in cfg.grid("models"):
            entry = runs[_run_name(family, axis)]
            variants = {"cnn3d": [True], "slice_rnn": [False, True]}.get(family, [False])
            for impute in variants:
                label = family + ("*" if impute else "")
                if entry is None:
                    rows.append((label, [math.nan] * len(drops)))
                    continue
                model = entry[0]
                rows.append((label, [statistics.fmean(evaluate_runs(
                    model, dataset.test, drop=d, impute=impute, seed=seed)) for d in drops]))
        return columns, rows
    if suite == "axes":
        axes = cfg.grid("axes")
        rows = [(f, [runs[_run_name(f, a)][1].test_mae if runs[_run_name(f, a)] else math.nan
                     for a in axes]) for f in cfg.grid("models") if f != "cnn3d"]
        return list(axes), rows
    full_n = len(dataset.train)
    ns = [max(1, round(frac * full_n)) for frac in cfg.grid("fractions")]
    rows = [(f, [runs[_run_name(f, axis, n)][1].test_mae if runs[_run_name(f, axis, n)] else math.nan
                 for n in ns]) for f in cfg.grid("models")]
    return [f"n={n}" for n in ns], rows


def cmd_ablate(args) -> int:
    cfg = _resolve(args)
    dataset = Dataset.from_manifest(cfg["data.dir"])
    runs_dir = Path(args.runs or cfg["out.dir"])
    out = Path(args.table_dir or runs_dir / "tables")
    needed = _suite_runs(cfg, args.suite, len(dataset.train))
    runs = _ensure_runs(cfg, dataset, runs_dir, needed, args.train)
    columns, rows = _table_rows(args.suite, cfg, runs, dataset)

    cfg.write(out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / f"{args.suite}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method"] + columns)
        for label, cells in rows:
            w.writerow([label] + [f"{c:.4f}" for c in cells])
    _write_json(out / f"{args.suite}.json", {
        "schema": REPORT_SCHEMA, "suite": args.suite, "columns": columns,
        "rows": {label: [None if math.isnan(c) else c for c in cells] for label, cells in rows},
        "note": "starred methods use nearest-slice imputation"})
    _say((out / f"{args.suite}.csv").read_text().rstrip())
    return EXIT_OK


# -- report ---------------------------------------------------------------------------------------

def cmd_report(args) -> int:
    root = Path(args.runs)
    paths = sorted(p for p in root.rglob("report.json") if (p.parent / "curve.csv").exists())
    if not paths:
        raise DataError(f"no training reports under {root}")
    header = ["run", "family", "axis", "params", "best_epoch", "epochs", "steps", "test_mae"]
    lines = []
    for p in paths:
        r = RunReport.from_json(p.read_text())
        lines.append([str(p.parent.relative_to(root)), r.model["family"], r.model["axis"], r.param_count,
                      r.best_epoch, len(r.epochs), r.steps, f"{r.test_mae:.4f}"])
    target = Path(args.out) if args.out else root / "summary.csv"
    with open(target, "w", newline="") as fh:
        csv.writer(fh).writerows([header] + lines)
    _say(target.read_text().rstrip())
    return EXIT_OK


# -- entry point -------------------------------------------------------------------------------------

def _add_run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    p.add_argument("--data", help="dataset directory (data.dir)")
    p.add_argument("--out", help="output directory (out.dir)")
    p.add_argument("--model", help="model family (model.family)")
    p.add_argument("--axis", help="slicing axis (model.axis)")
    p.add_argument("--epochs", type=int, help="train.epochs")
    p.add_argument("--lr", type=float, help="train.lr")
    p.add_argument("--seed", type=int, help="sets both model.seed and train.seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slicenet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic RVOL dataset with a manifest")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--dims", default="32,40,32")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--age-dist", choices=("uniform", "normal"), default="uniform")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one model and write its report and checkpoint")
    _add_run_options(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint under a slice-drop protocol")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset directory; defaults to the one recorded beside the checkpoint")
    p.add_argument("--drop", action="append", help="none | kth:<k> | rand:<fraction> (repeatable)")
    p.add_argument("--impute", action="store_true", help="fill dropped slices from the nearest kept one")
    p.add_argument("--axis", help="slicing axis (defaults to the training axis)")
    p.add_argument("--seeds", default="10", help="random-drop runs: a count or a comma list of run ids")
    p.add_argument("--seed", type=int, default=0, help="base seed for random drops")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--out", help="directory for metrics.json and the resolved config")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation grid and write a table")
    p.add_argument("--suite", choices=SUITES, required=True)
    _add_run_options(p)
    p.add_argument("--runs", help="directory holding one subdirectory per trained run (default out.dir)")
    p.add_argument("--table-dir", help="where to write the table (default <runs>/tables)")
    p.add_argument("--train", action="store_true", help="train any missing runs")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="summarize every training report under a directory")
    p.add_argument("runs")
    p.add_argument("--out", help="summary CSV path (default <runs>/summary.csv)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericalError as exc:
        _warn(f"numerical abort: {exc}")
        return EXIT_NUMERICAL
    except (DataError, OSError) as exc:
        _warn(f"data error: {exc}")
        return EXIT_DATA
    except ValueError as exc:   # ConfigurationError and argument-range errors
        _warn(f"configuration error: {exc}")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
