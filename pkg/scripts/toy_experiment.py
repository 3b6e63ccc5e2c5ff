#!/usr/bin/env python3
"""CPU-scale demonstration: train both objectives on the synthetic
bump-to-spike dataset and compare heart-rate MAPE plus seed stability.

Runs in roughly 15-20 minutes with the defaults; trim --seeds or --pairs for
a quicker look.
"""
import argparse
import json
from pathlib import Path

import numpy as np

from ppg2ecg.evaluation import compare_distributions, evaluate_store, failure_count, mape
from ppg2ecg.models import generator_from_checkpoint
from ppg2ecg.toy import toy_store, toy_train_config
from ppg2ecg.training import seed_sweep


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--pairs", type=int, default=2000)
    parser.add_argument("--seeds", type=int, default=5)
    parser.add_argument("--epochs", type=int, default=5)
    parser.add_argument("--jobs", type=int, default=1)
    parser.add_argument("--out", type=Path, default=Path("toy_runs"))
    args = parser.parse_args()

    store = toy_store(args.pairs, seed=100)
    val_store = toy_store(200, seed=999, window=1280)
    eval_store = toy_store(200, seed=555, window=1280)
    seeds = list(range(args.seeds))

    results = {}
    for objective in ("gan", "gan_freq"):
        config = toy_train_config(seed=0, objective=objective, epochs=args.epochs)
        sweep = seed_sweep(config, seeds, store, val_store,
                           out_dir=args.out / objective, jobs=args.jobs)
        rows = []
        for result in sweep:
            if result.best_checkpoint is None:
                print(f"{objective} seed {result.seed}: FAILED ({result.error})")
                continue
            generator = generator_from_checkpoint(result.best_checkpoint)
            records = evaluate_store(generator, eval_store)
            summary = mape(records, failure_mode="penalize")
            rows.append((result.seed, summary.mape_percent,
                         failure_count(records)))
            print(f"{objective} seed {result.seed}: "
                  f"MAPE {summary.mape_percent:6.2f}%  "
                  f"failures {failure_count(records)}")
        results[objective] = rows

    print("\nsummary (held-out toy windows):")
    mapes = {}
    for objective, rows in results.items():
        values = [m for _, m, _ in rows]
        mapes[objective] = values
        print(f"  {objective:9s} mean {np.mean(values):6.2f}%  "
              f"std {np.std(values, ddof=1) if len(values) > 1 else 0.0:5.2f}  "
              f"mean failures {np.mean([f for _, _, f in rows]):.1f}")
    if all(len(v) >= 2 for v in mapes.values()):
        stat = compare_distributions(mapes["gan"], mapes["gan_freq"])
        print(f"  pooled t({stat.df}) = {stat.t_statistic:.2f}, "
              f"p = {stat.p_value:.4f} (assumes normality)")
    (args.out / "toy_summary.json").write_text(json.dumps(
        {obj: [{"seed": s, "mape": m, "failures": f} for s, m, f in rows]
         for obj, rows in results.items()}, indent=2))


if __name__ == "__main__":
    main()
