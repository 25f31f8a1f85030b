"""Command-line entry point: ``mbmd <subcommand> [flags]``.

Exit status: 0 success, 2 usage, 3 config, 4 data, 5 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import diffcore
from .config import RunConfig, git_blob_sha1, load_run_config, write_resolved
from .data import (
    FORMAT_VERSION,
    ClassSpec,
    EegWindow,
    load_dataset,
    preprocess_trial,
    read_eegt,
    save_dataset,
    segment,
    stack_windows,
    synth_dataset,
    write_eegt,
)
from .errors import ConfigError, DataError, MbmdError, MissingBandCacheError, MissingFileError
from .trainer import (
    SuiteResult,
    ablation_suite,
    cross_validate,
    evaluate,
    prepare_windows,
    split_validation,
    train,
    write_aggregate_csv,
    write_results_csv,
)
from .wpd import band_grouping_preset, decompose_array

log = logging.getLogger("mbmd")

WINDOW_INDEX = "windows.json"
COMMANDS = ("synth", "preprocess", "decompose", "train", "eval", "cv", "ablate", "gradcheck", "report")


# ---------------------------------------------------------------- window index


def _write_window_index(out_dir: Path, classes: ClassSpec, rows: list[dict], bands: tuple[str, ...] = ()) -> Path:
    doc = {"format_version": FORMAT_VERSION, "classes": list(classes.class_names), "bands": list(bands), "windows": rows}
    path = out_dir / WINDOW_INDEX
    path.write_text(json.dumps(doc, indent=2))
    return path


def _read_window_index(path: Path) -> dict:
    doc = json.loads(path.read_text())
    if doc.get("format_version") != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported format_version {doc.get('format_version')!r}")
    return doc


def _is_window_index(path: Path) -> bool:
    try:
        return "windows" in json.loads(path.read_text())
    except (OSError, json.JSONDecodeError):
        return False


def _load_window_index(path: Path, need_bands: bool):
    doc = _read_window_index(path)
    classes = ClassSpec(tuple(doc["classes"]))
    windows = [
        EegWindow(r["patient"], int(r["label"]), float(r.get("rate_hz", 128.0)), read_eegt(path.parent / r["path"]), r["trial_id"], int(r["offset"]))
        for r in doc["windows"]
    ]
    if not windows:
        raise DataError(f"{path}: no windows")
    ws = stack_windows(windows, classes.num_classes)
    names = tuple(doc.get("bands", ()))
    if need_bands:
        if not names:
            raise MissingBandCacheError(f"{path}: no band cache (run decompose first)")
        bands = []
        for r in doc["windows"]:
            per = []
            for name in names:
                band_path = path.parent / f"{r['path']}.band.{name}"
                if not band_path.exists():
                    raise MissingBandCacheError(f"missing band file {band_path}")
                per.append(read_eegt(band_path))
            bands.append(np.stack(per))
        ws.bands = np.stack(bands).astype(np.float32)
        ws.band_names = names
    return ws


# ---------------------------------------------------------------- dataset resolution


def _windows_for(cfg: RunConfig, need_bands: bool):
    """Windows (and input hashes) from --dataset, or a synthetic set when absent."""
    model = cfg.train.model
    branches = model.num_branches if (need_bands and model.multi_branch) else None
    if cfg.dataset is None:
        manifest, trials = synth_dataset(cfg.synth)
        ws = prepare_windows(trials, manifest.class_spec.num_classes, branches, cfg.preprocess)
        return ws, {"synthetic": json.dumps(dataclasses.asdict(cfg.synth), sort_keys=True)}
    path = Path(cfg.dataset)
    if not path.exists():
        raise MissingFileError(f"missing dataset manifest {path}")
    inputs = {str(path): git_blob_sha1(path)}
    if _is_window_index(path):
        return _load_window_index(path, branches is not None), inputs
    manifest, trials = load_dataset(path)
    if not trials:
        raise DataError(f"{path}: manifest lists no trials")
    return prepare_windows(trials, manifest.class_spec.num_classes, branches, cfg.preprocess), inputs


def _out_dir(args, cfg: RunConfig) -> Path:
    out = args.out or cfg.out
    if not out:
        raise ConfigError("an output directory is required (--out or \"out\" in the config)")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


# ---------------------------------------------------------------- subcommands


def cmd_synth(args, cfg: RunConfig) -> None:
    out = _out_dir(args, cfg)
    manifest, trials = synth_dataset(cfg.synth)
    path = save_dataset(manifest, trials, out)
    write_resolved(cfg, out)
    print(path)


def cmd_preprocess(args, cfg: RunConfig) -> None:
    """Filter, resample and segment every trial into window files plus an index."""
    out = _out_dir(args, cfg)
    if cfg.dataset is None:
        raise ConfigError("preprocess needs --dataset")
    manifest, trials = load_dataset(cfg.dataset)
    rows = []
    for i, trial in enumerate(trials):
        for w in segment(preprocess_trial(trial, cfg.preprocess)):
            name = f"w{i:05d}_{w.offset_samples:06d}.eegt"
            write_eegt(out / name, w.samples)
            rows.append({"path": name, "patient": w.patient_id, "label": w.label, "rate_hz": w.sample_rate_hz, "trial_id": w.parent_trial_id, "offset": w.offset_samples})
    write_resolved(cfg, out, {str(cfg.dataset): git_blob_sha1(cfg.dataset)})
    print(_write_window_index(out, manifest.class_spec, rows))


def cmd_decompose(args, cfg: RunConfig) -> None:
    """Write ``<window>.band.<name>`` files beside each window listed in a window index."""
    if cfg.dataset is None:
        raise ConfigError("decompose needs --dataset pointing at a window index")
    index_path = Path(cfg.dataset)
    if not index_path.exists():
        raise MissingFileError(f"missing window index {index_path}")
    doc = _read_window_index(index_path)
    grouping = band_grouping_preset(cfg.train.model.num_branches)
    for r in doc["windows"]:
        src = index_path.parent / r["path"]
        bands = decompose_array(read_eegt(src), grouping)  # (C, B, L)
        for b, name in enumerate(grouping.names):
            write_eegt(index_path.parent / f"{r['path']}.band.{name}", bands[:, b, :])
    doc["bands"] = list(grouping.names)
    index_path.write_text(json.dumps(doc, indent=2))
    print(index_path)


def cmd_train(args, cfg: RunConfig) -> None:
    from .checkpoint import save_checkpoint

    out = _out_dir(args, cfg)
    ws, inputs = _windows_for(cfg, need_bands=True)
    write_resolved(cfg, out, inputs)
    train_p, val_p = split_validation(sorted(set(ws.patients)), cfg.train.val_fraction, cfg.train.seed)
    res = train(ws.for_patients(train_p), ws.for_patients(val_p), cfg.train, out / "train_log.csv")
    save_checkpoint(res.model, out / "model.ckpt")
    summary = {"best_epoch": res.best_epoch, "best_val_loss": res.best_val_loss, "train_patients": train_p, "val_patients": val_p}
    (out / "train_summary.json").write_text(json.dumps(summary, indent=2))
    print(out / "model.ckpt")


def cmd_eval(args, cfg: RunConfig) -> None:
    out = _out_dir(args, cfg)
    if not args.checkpoint:
        raise ConfigError("eval needs --checkpoint")
    ws, inputs = _windows_for(cfg, need_bands=False)
    window, trial = evaluate(args.checkpoint, ws, trial_level=True)
    doc = {"window": window.as_dict(), "trial": trial.as_dict(), "confusion": window.confusion.tolist(), "inputs": inputs}
    (out / "metrics.json").write_text(json.dumps(doc, indent=2))
    print(json.dumps(doc["window"]))


def cmd_cv(args, cfg: RunConfig) -> None:
    out = _out_dir(args, cfg)
    ws, inputs = _windows_for(cfg, need_bands=True)
    write_resolved(cfg, out, inputs)
    cv = cross_validate(ws, cfg.train, cfg.folds, cfg.repeats, cfg.jobs, log_dir=out)
    result = [SuiteResult("cv", cfg.train.model.block_pattern, cv)]
    write_results_csv(result, out / "results.csv")
    write_aggregate_csv(result, out / "aggregate.csv")
    agg = cv.aggregate()
    print(" ".join(f"{m}={mu:.4f}±{sd:.4f}" for m, (mu, sd) in agg.items()))


def cmd_ablate(args, cfg: RunConfig) -> None:
    out = _out_dir(args, cfg)
    if cfg.suite is None:
        raise ConfigError("ablate needs --suite")
    ws, inputs = _windows_for(cfg, need_bands=True)
    write_resolved(cfg, out, inputs)
    results = ablation_suite(cfg.suite, ws, cfg.train, cfg.folds, cfg.repeats, cfg.jobs)
    write_results_csv(results, out / f"results_{cfg.suite}.csv")
    write_aggregate_csv(results, out / f"aggregate_{cfg.suite}.csv")
    for r in results:
        mu, sd = r.cv.aggregate()["bca"]
        print(f"{r.variant}: bca={mu:.4f}±{sd:.4f}")


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    out = _out_dir(args, cfg)
    rows = diffcore.gradcheck_suite()
    diffcore.write_gradcheck_csv(rows, out / "gradcheck.csv")
    failed = [r.op for r in rows if not r.passed]
    if failed:
        print(f"error: gradient check failed for {', '.join(failed)}", file=sys.stderr)
        return 5
    print(out / "gradcheck.csv")
    return 0


def cmd_report(args, cfg: RunConfig) -> None:
    from .report import build_report

    results = Path(args.results or args.out or cfg.out or ".")
    for path in build_report(results, args.out or results):
        print(path)


HANDLERS = {name: globals()[f"cmd_{name}"] for name in COMMANDS}


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mbmd", description="Multi-band mutual-distillation Transformer for EEG.")
    sub = parser.add_subparsers(dest="command", metavar="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="override the training (and synthetic data) seed")
        p.add_argument("--jobs", type=int, help="max parallel fold workers")
        p.add_argument("--suite", help="ablation suite name")
        p.add_argument("--dataset", help="trial manifest or window index")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "eval":
            p.add_argument("--checkpoint", help="model checkpoint to evaluate")
        if name == "report":
            p.add_argument("results", nargs="?", help="directory holding aggregate*.csv (default: --out)")
    return parser


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if args.seed is not None:
        cfg.train = dataclasses.replace(cfg.train, seed=args.seed)
        cfg.synth = dataclasses.replace(cfg.synth, seed=args.seed)
    if args.jobs is not None:
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        cfg.jobs = args.jobs
    if args.suite is not None:
        from .trainer import SUITES

        if args.suite not in SUITES:
            raise ConfigError(f"unknown suite {args.suite!r}; known: {', '.join(SUITES)}")
        cfg.suite = args.suite
    if args.dataset is not None:
        cfg.dataset = args.dataset
    if args.out is not None:
        cfg.out = args.out
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _apply_overrides(load_run_config(args.config), args)
        status = HANDLERS[args.command](args, cfg)
    except MbmdError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return int(status or 0)


if __name__ == "__main__":
    sys.exit(main())
