"""Operator-facing command line: import, preprocess, train, synthesize,
evaluate, sweep, report.

Global flags (--config/--seed/--jobs/--out) may also come from a single JSON
config file; explicit flags override file values. Every command appends one
entry to manifest.jsonl in its output directory and never mutates its inputs.

Exit codes: 0 success, 2 input/validation error, 3 numerical abort,
4 checkpoint fingerprint mismatch.
"""
from __future__ import annotations

import csv
import datetime
import functools
import importlib.util
import json
import logging
import shutil
import subprocess
import sys
import time
from pathlib import Path

import click
import numpy as np

from . import dataset as ds
from . import evaluation as ev
from .models import (
    FingerprintMismatchError,
    generator_from_payload,
    load_checkpoint,
)
from .training import (
    NumericalAbortError,
    TrainConfig,
    seed_sweep,
    train,
)

log = logging.getLogger("ppg2ecg")

REFERENCE_SEGMENT_COUNTS = {"train": 40675, "validation": 11276, "test": 12796}

EXIT_INPUT_ERROR = 2
EXIT_NUMERICAL_ABORT = 3
EXIT_FINGERPRINT_MISMATCH = 4


def _die(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except FingerprintMismatchError as exc:
            _die(EXIT_FINGERPRINT_MISMATCH, str(exc))
        except NumericalAbortError as exc:
            _die(EXIT_NUMERICAL_ABORT, str(exc))
        except (ds.DatasetError, ValueError, OSError) as exc:
            _die(EXIT_INPUT_ERROR, str(exc))
    return wrapper


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        _die(EXIT_INPUT_ERROR, f"cannot read config file {path}: {exc}")
    if not isinstance(data, dict):
        _die(EXIT_INPUT_ERROR, f"config file {path} must hold a JSON object")
    return data


class Settings:
    """Flag resolution: subcommand flag > global flag > per-command config
    section > top-level config value > built-in default."""

    def __init__(self, config_data: dict, seed: int | None, jobs: int | None,
                 out: str | None):
        self.data = config_data
        self.globals = {"seed": seed, "jobs": jobs, "out": out}

    def get(self, command: str, name: str, flag_value, default):
        if flag_value is not None:
            return flag_value
        if self.globals.get(name) is not None:
            return self.globals[name]
        section = self.data.get(command, {})
        if isinstance(section, dict) and name in section:
            return section[name]
        if name in self.data:
            return self.data[name]
        return default

    def train_overrides(self) -> dict:
        section = self.data.get("train_config", {})
        return section if isinstance(section, dict) else {}


def write_manifest(out_dir: Path, command: str, params: dict,
                   inputs: list[str], started: float,
                   seeds=None, fingerprint: str | None = None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    entry = {
        "command": command,
        "params": params,
        "inputs": inputs,
        "out": str(out_dir),
        "seeds": seeds,
        "config_fingerprint": fingerprint,
        "started": datetime.datetime.fromtimestamp(
            started, tz=datetime.timezone.utc).isoformat(),
        "elapsed_s": round(time.time() - started, 3),
    }
    with (out_dir / "manifest.jsonl").open("a") as fh:
        fh.write(json.dumps(entry) + "\n")


@click.group()
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="JSON file supplying any flag value; flags override it.")
@click.option("--seed", type=int, default=None, help="Global seed.")
@click.option("--jobs", type=int, default=None, help="Worker process bound.")
@click.option("--out", type=click.Path(), default=None, help="Output directory.")
@click.option("-v", "--verbose", is_flag=True, default=False)
@click.pass_context
def main(ctx, config_path, seed, jobs, out, verbose):
    """Train and evaluate PPG-to-ECG translators end to end."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    ctx.obj = Settings(_load_config_file(config_path), seed, jobs, out)


@main.command("import")
@click.option("--in", "archives", type=click.Path(exists=True), multiple=True,
              required=True, help="Raw archive file(s), one per subject.")
@click.option("--out", "out_dir", type=click.Path(), default=None)
@click.pass_obj
@handle_errors
def cmd_import(settings: Settings, archives, out_dir):
    """Convert raw archives to interchange format (delegates to dalia-import)."""
    started = time.time()
    out_dir = Path(settings.get("import", "out", out_dir, "interchange"))
    out_dir.mkdir(parents=True, exist_ok=True)
    if importlib.util.find_spec("dalia_import") is not None:
        base = [sys.executable, "-m", "dalia_import"]
    elif shutil.which("dalia-import"):
        base = ["dalia-import"]
    else:
        raise ValueError(
            "the dalia-import converter is not installed; install the "
            "dalia_import package or run its CLI directly")
    for archive in archives:
        proc = subprocess.run(base + ["convert", "--in", str(archive),
                                      "--out", str(out_dir)])
        if proc.returncode != 0:
            raise ValueError(f"converter failed on {archive} "
                             f"(exit {proc.returncode})")
    write_manifest(out_dir, "import", {"n_archives": len(archives)},
                   [str(a) for a in archives], started)
    click.echo(f"converted {len(archives)} archive(s) into {out_dir}")


def _print_split_counts(report: dict) -> None:
    click.echo("split subjects:")
    for split in ("train", "validation", "test"):
        subs = report["subjects"][split]
        click.echo(f"  {split:10s} ({len(subs)}): {', '.join(subs) or '-'}")
    click.echo("training-window counts per split (4 s / 2 s hop):")
    for split in ("train", "validation", "test"):
        actual = report["segment_counts"].get(split)
        expected = report["reference_counts"].get(split) if report["reference_counts"] else None
        line = f"  {split:10s} {actual if actual is not None else 0:7d}"
        if expected is not None:
            line += f"  (reference {expected:6d}, delta {actual - expected:+d})"
        click.echo(line)


@main.command("preprocess")
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True,
              help="Interchange-format root (one directory per subject).")
@click.option("--out", "out_dir", type=click.Path(), default=None)
@click.option("--seed", "split_seed", type=int, default=None,
              help="Subject-split seed.")
@click.option("--window-s", type=float, default=ds.TRAIN_WINDOW_S, show_default=True)
@click.option("--hop-s", type=float, default=ds.TRAIN_HOP_S, show_default=True)
@click.option("--eval-window-s", type=float, default=ds.EVAL_WINDOW_S,
              show_default=True)
@click.option("--eval-hop-s", type=float, default=ds.EVAL_HOP_S, show_default=True)
@click.pass_obj
@handle_errors
def cmd_preprocess(settings: Settings, data_dir, out_dir, split_seed,
                   window_s, hop_s, eval_window_s, eval_hop_s):
    """Build train/validation/test pair stores plus a split report."""
    started = time.time()
    out_dir = Path(settings.get("preprocess", "out", out_dir, "pairs"))
    split_seed = int(settings.get("preprocess", "seed", split_seed, 0))
    records = ds.load_subjects(data_dir)
    subjects = sorted(r.subject for r in records)
    if len(subjects) >= 3:
        split = ds.make_split(subjects, split_seed)
    else:
        click.echo(f"warning: only {len(subjects)} subject(s); assigning all "
                   "to the train split", err=True)
        split = ds.SplitAssignment(train=frozenset(subjects),
                                   validation=frozenset(), test=frozenset())

    out_dir.mkdir(parents=True, exist_ok=True)
    report = {
        "split_seed": split_seed,
        "subjects": {s: sorted(split.subjects_for(s))
                     for s in ("train", "validation", "test")},
        "segment_counts": {},
        "per_subject_counts": {},
        "excluded_flat_ecg": 0,
        "reference_counts": REFERENCE_SEGMENT_COUNTS if len(subjects) == 15 else None,
        "window_s": window_s, "hop_s": hop_s,
        "eval_window_s": eval_window_s, "eval_hop_s": eval_hop_s,
    }
    for split_name in ("train", "validation", "test"):
        members = split.subjects_for(split_name)
        if not members:
            continue
        prep = ds.PreprocessReport()
        store = ds.build_store(records, members, window_s, hop_s, report=prep)
        store.save(out_dir / f"pairs_{split_name}.npz")
        report["segment_counts"][split_name] = len(store)
        report["per_subject_counts"][split_name] = prep.pair_counts
        report["excluded_flat_ecg"] += prep.excluded_flat_ecg
        if split_name in ("validation", "test"):
            eval_store = ds.build_store(records, members, eval_window_s, eval_hop_s)
            eval_store.save(out_dir / f"pairs_{split_name}_eval.npz")
    (out_dir / "split_report.json").write_text(json.dumps(report, indent=2))
    _print_split_counts(report)
    if report["excluded_flat_ecg"]:
        click.echo(f"excluded {report['excluded_flat_ecg']} flat-ECG window(s)")
    write_manifest(out_dir, "preprocess",
                   {"window_s": window_s, "hop_s": hop_s},
                   [str(data_dir)], started, seeds=[split_seed])


def _parse_seeds(spec: str) -> list[int]:
    if ":" in spec:
        lo, hi = spec.split(":", 1)
        return list(range(int(lo), int(hi)))
    return [int(s) for s in spec.split(",") if s]


def _make_train_config(settings: Settings, objective: str, seed: int,
                       epochs, batch_size, variant) -> TrainConfig:
    overrides = dict(settings.train_overrides())
    overrides["objective"] = objective
    overrides["seed"] = seed
    if epochs is not None:
        overrides["epochs"] = epochs
    if batch_size is not None:
        overrides["batch_size"] = batch_size
    if variant is not None:
        overrides["generator_variant"] = variant
    return TrainConfig.from_dict(overrides)


def _load_split_stores(pairs_dir: Path):
    store = ds.PairStore.load(pairs_dir / "pairs_train.npz")
    val_path = pairs_dir / "pairs_validation_eval.npz"
    val_store = ds.PairStore.load(val_path) if val_path.exists() else None
    return store, val_store


@main.command("train")
@click.option("--pairs", "pairs_dir", type=click.Path(exists=True), required=True,
              help="Directory produced by `preprocess`.")
@click.option("--objective", type=click.Choice(["gan", "gan_freq"]),
              default="gan_freq", show_default=True)
@click.option("--seed", "seed_opt", type=int, default=None)
@click.option("--seeds", "seeds_spec", type=str, default=None,
              help="Range `lo:hi` (half-open) or comma list; one run each.")
@click.option("--epochs", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--variant", type=click.Choice(["non_saturating", "minimax"]),
              default=None)
@click.option("--resume", is_flag=True, default=False,
              help="Continue each run from its last epoch checkpoint.")
@click.option("--out", "out_dir", type=click.Path(), default=None)
@click.pass_obj
@handle_errors
def cmd_train(settings: Settings, pairs_dir, objective, seed_opt, seeds_spec,
              epochs, batch_size, variant, resume, out_dir):
    """Train one run per requested seed for the chosen objective."""
    started = time.time()
    pairs_dir = Path(pairs_dir)
    out_dir = Path(settings.get("train", "out", out_dir, "runs"))
    seeds = (_parse_seeds(seeds_spec) if seeds_spec
             else [int(settings.get("train", "seed", seed_opt, 0))])
    store, val_store = _load_split_stores(pairs_dir)
    for seed in seeds:
        config = _make_train_config(settings, objective, seed, epochs,
                                    batch_size, variant)
        run_dir = out_dir / f"{objective}_seed{seed:03d}"
        state = train(config, store, val_store, run_dir=run_dir, resume=resume)
        click.echo(f"seed {seed}: {state.iteration} iterations, "
                   f"val MAPE per epoch {['%.2f' % v for v in state.val_mape_per_epoch]}")
    write_manifest(out_dir, "train", {"objective": objective},
                   [str(pairs_dir)], started, seeds=seeds)


@main.command("synthesize")
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--pairs", "pairs_path", type=click.Path(exists=True), required=True,
              help="A pair-store .npz file (any window length).")
@click.option("--out", "out_dir", type=click.Path(), default=None)
@click.pass_obj
@handle_errors
def cmd_synthesize(settings: Settings, checkpoint, pairs_path, out_dir):
    """Write synthetic ECG windows for every pair in a store."""
    started = time.time()
    out_dir = Path(settings.get("synthesize", "out", out_dir, "synthetic"))
    payload = load_checkpoint(checkpoint)
    generator = generator_from_payload(payload)
    store = ds.PairStore.load(pairs_path)
    synth = ev.synthesize(generator, store.ppg)
    out_dir.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(out_dir / "synthetic.npz", synth=synth.astype(np.float32),
                        subject=store.subject, activity=store.activity,
                        origin=store.origin, rate=np.float64(store.rate))
    write_manifest(out_dir, "synthesize", {"n_windows": len(store)},
                   [str(checkpoint), str(pairs_path)], started,
                   fingerprint=payload["fingerprint"])
    click.echo(f"wrote {len(store)} synthetic windows to {out_dir / 'synthetic.npz'}")


@main.command("evaluate")
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--pairs", "pairs_path", type=click.Path(exists=True), required=True,
              help="A 10-second pair-store .npz (pairs_*_eval.npz).")
@click.option("--ppg-baseline", is_flag=True, default=False,
              help="Also score the direct PPG peak-detection baseline.")
@click.option("--failure-mode", type=click.Choice(["exclude", "penalize"]),
              default="exclude", show_default=True)
@click.option("--out", "out_dir", type=click.Path(), default=None)
@click.pass_obj
@handle_errors
def cmd_evaluate(settings: Settings, checkpoint, pairs_path, ppg_baseline,
                 failure_mode, out_dir):
    """Heart-rate MAPE report for one checkpoint on an eval pair store."""
    started = time.time()
    out_dir = Path(settings.get("evaluate", "out", out_dir, "eval"))
    payload = load_checkpoint(checkpoint)
    generator = generator_from_payload(payload)
    store = ds.PairStore.load(pairs_path)
    records = ev.evaluate_store(generator, store, with_ppg_baseline=ppg_baseline)
    json_path, csv_path = ev.write_report(
        records, out_dir, with_ppg_baseline=ppg_baseline,
        failure_mode=failure_mode,
        seed_stats={"seed": payload["seed"],
                    "objective": payload["extra"].get("train_config", {}).get(
                        "objective")})
    summary = json.loads(json_path.read_text())
    click.echo("MAPE by subset (note: t-tests elsewhere assume normality):")
    for subset in ev.SUBSETS:
        cell = summary["subsets"][subset]
        value = "n/a" if cell is None else f"{cell['mape_percent']:.2f}%"
        click.echo(f"  {subset:10s} {value}")
    click.echo(f"synthetic-HR failures: {summary['n_synth_failures']}")
    write_manifest(out_dir, "evaluate", {"failure_mode": failure_mode},
                   [str(checkpoint), str(pairs_path)], started,
                   fingerprint=payload["fingerprint"])
    click.echo(f"report: {json_path} / {csv_path}")


@main.command("sweep")
@click.option("--pairs", "pairs_dir", type=click.Path(exists=True), required=True)
@click.option("--objective", type=click.Choice(["gan", "gan_freq", "both"]),
              default="both", show_default=True)
@click.option("--seeds", "seeds_spec", type=str, default="0:31", show_default=True)
@click.option("--epochs", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--jobs", "jobs_opt", type=int, default=None)
@click.option("--out", "out_dir", type=click.Path(), default=None)
@click.pass_obj
@handle_errors
def cmd_sweep(settings: Settings, pairs_dir, objective, seeds_spec, epochs,
              batch_size, jobs_opt, out_dir):
    """Train every seed for one or both objectives and summarize stability."""
    started = time.time()
    pairs_dir = Path(pairs_dir)
    out_dir = Path(settings.get("sweep", "out", out_dir, "sweep"))
    jobs = int(settings.get("sweep", "jobs", jobs_opt, 1))
    seeds = _parse_seeds(seeds_spec)
    store, val_store = _load_split_stores(pairs_dir)
    objectives = ["gan", "gan_freq"] if objective == "both" else [objective]
    for obj in objectives:
        config = _make_train_config(settings, obj, seeds[0], epochs,
                                    batch_size, None)
        results = seed_sweep(config, seeds, store, val_store,
                             out_dir=out_dir, jobs=jobs)
        ok = [r for r in results if r.val_mape is not None]
        click.echo(f"{obj}: {len(ok)}/{len(results)} runs completed")
    write_manifest(out_dir, "sweep", {"objectives": objectives},
                   [str(pairs_dir)], started, seeds=seeds)


def _collect_report_inputs(run_dirs: tuple[str, ...]):
    sweeps, evals = [], []
    for root in run_dirs:
        root = Path(root)
        sweeps.extend(sorted(root.rglob("sweep_*.json")))
        evals.extend(sorted(root.rglob("report.json")))
    return sweeps, evals


@main.command("report")
@click.option("--runs", "run_dirs", type=click.Path(exists=True), multiple=True,
              required=True, help="Sweep/eval output directories (repeatable).")
@click.option("--bins", type=int, default=12, show_default=True)
@click.option("--out", "out_dir", type=click.Path(), default=None)
@click.pass_obj
@handle_errors
def cmd_report(settings: Settings, run_dirs, bins, out_dir):
    """Render MAPE and failure-count histograms (SVG + CSV) from report files."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    started = time.time()
    out_dir = Path(settings.get("report", "out", out_dir, "report"))
    sweep_files, eval_files = _collect_report_inputs(run_dirs)
    if not sweep_files and not eval_files:
        raise ValueError("no sweep_*.json or report.json files under the "
                         "given --runs directories")
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []

    mape_by_objective: dict[str, list[tuple[int, float]]] = {}
    for path in sweep_files:
        data = ev.read_report(path)
        rows = [(r["seed"], r["val_mape"]) for r in data.get("per_seed", [])
                if r.get("val_mape") is not None]
        if rows:
            mape_by_objective.setdefault(data["objective"], []).extend(rows)

    if mape_by_objective:
        csv_path = out_dir / "mape_distribution.csv"
        with csv_path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["objective", "seed", "val_mape_percent"])
            for obj, rows in mape_by_objective.items():
                for seed, value in rows:
                    writer.writerow([obj, seed, f"{value:.4f}"])
        fig, ax = plt.subplots(figsize=(6, 4))
        for obj, rows in sorted(mape_by_objective.items()):
            ax.hist([v for _, v in rows], bins=bins, alpha=0.6, label=obj)
        if len(mape_by_objective) == 2:
            (obj_a, rows_a), (obj_b, rows_b) = sorted(mape_by_objective.items())
            if len(rows_a) >= 2 and len(rows_b) >= 2:
                stat = ev.compare_distributions([v for _, v in rows_a],
                                                [v for _, v in rows_b])
                ax.set_title(f"t({stat.df}) = {stat.t_statistic:.2f}, "
                             f"p = {stat.p_value:.3g} (pooled t; assumes normality)")
        ax.set_xlabel("validation MAPE (%)")
        ax.set_ylabel("seeds")
        ax.legend()
        svg_path = out_dir / "mape_distribution.svg"
        fig.savefig(svg_path)
        plt.close(fig)
        outputs += [csv_path, svg_path]

    failures_by_objective: dict[str, list[int]] = {}
    table_rows = []
    for path in eval_files:
        data = ev.read_report(path)
        obj = (data.get("seed_stats") or {}).get("objective") or "unknown"
        failures_by_objective.setdefault(obj, []).append(data["n_synth_failures"])
        for subset in ev.SUBSETS:
            cell = data["subsets"].get(subset)
            if cell:
                table_rows.append([str(path), obj, subset,
                                   f"{cell['mape_percent']:.4f}",
                                   cell["n_failures"]])
    if table_rows:
        table_path = out_dir / "comparison_table.csv"
        with table_path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["report", "objective", "subset", "mape_percent",
                             "n_failures"])
            writer.writerows(table_rows)
        outputs.append(table_path)
    if failures_by_objective:
        fig, ax = plt.subplots(figsize=(6, 4))
        for obj, counts in sorted(failures_by_objective.items()):
            ax.hist(counts, bins=bins, alpha=0.6, label=obj)
        ax.set_xlabel("failed windows per run")
        ax.set_ylabel("runs")
        ax.legend()
        svg_path = out_dir / "failure_counts.svg"
        fig.savefig(svg_path)
        plt.close(fig)
        outputs.append(svg_path)

    write_manifest(out_dir, "report", {"n_sweeps": len(sweep_files),
                                       "n_eval_reports": len(eval_files)},
                   [str(d) for d in run_dirs], started)
    for path in outputs:
        click.echo(f"wrote {path}")


if __name__ == "__main__":
    main()
