#!/usr/bin/env python3
"""Desk-scale benchmark: synthesize a corpus, train every forecasting variant,
evaluate against the oracle-loss logistic baseline, and write a summary.

Reuses finished stages when rerun with the same workdir, so an interrupted
benchmark resumes instead of restarting.

Usage:
    python3 scripts/run_desk_benchmark.py --workdir /tmp/bench --runs 2000
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

import numpy as np

from trajcast import cli
from trajcast.forecaster import ModelConfig

NEURAL_VARIANTS = ("neuneu", "noloss", "average")


def _run(argv: list[str]) -> None:
    code = cli.main(argv)
    if code != 0:
        raise RuntimeError(f"command failed with exit {code}: {' '.join(argv)}")


def _slice_mae(doc: dict, keep) -> float:
    errs = [r["abs_err"] for r in doc["records"] if keep(r)]
    return float(np.mean(errs)) if errs else float("nan")


def run_benchmark(
    workdir,
    runs: int = 2000,
    tokens: int = 4096,
    masks: int = 6,
    corpus_seed: int = 11,
    data_seed: int = 7,
    train_seed: int = 1,
    frac: float = 0.2,
    sweep_fracs: tuple[float, float] = (0.1, 0.5),
    reuse: bool = True,
) -> dict:
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    corpus = workdir / "corpus"
    timings: dict[str, float] = {}
    t_start = time.time()

    t0 = time.time()
    if not (reuse and (corpus / "corpus.json").exists()):
        _run([
            "synth", "--out", str(corpus), "--runs", str(runs),
            "--tokens", str(tokens), "--seed", str(corpus_seed),
            "--t-min", "8", "--t-max", "12",
        ])
    timings["synth"] = time.time() - t0

    reports: dict[str, dict] = {}
    for variant in NEURAL_VARIANTS:
        t0 = time.time()
        manifest = workdir / f"{variant}.jsonl"
        if not (reuse and manifest.exists()):
            _run([
                "build-data", "--trajs", str(corpus / "train"),
                "--variant", variant, "--drop-p", "0.4", "--masks", str(masks),
                "--seed", str(data_seed), "--out", str(manifest),
            ])
        config = workdir / f"{variant}.config.json"
        config.write_text(
            json.dumps(ModelConfig.desk(variant, tokens=tokens).to_dict(), indent=1)
        )
        ckpt = workdir / f"{variant}.ckpt"
        if not (reuse and ckpt.exists()):
            _run([
                "train", "--manifest", str(manifest), "--config", str(config),
                "--seed", str(train_seed), "--out", str(ckpt),
            ])
        timings[f"train_{variant}"] = time.time() - t0

        t0 = time.time()
        report = workdir / f"{variant}.report.json"
        _run([
            "evaluate", "--ckpt", str(ckpt), "--trajs", str(corpus / "heldout"),
            "--frac", str(frac), "--report", str(report),
            "--csv", str(workdir / f"{variant}.records.csv"),
        ])
        reports[variant] = json.loads(report.read_text())
        timings[f"eval_{variant}"] = time.time() - t0

    t0 = time.time()
    fits = workdir / "logistic.fits.json"
    if not (reuse and fits.exists()):
        _run(["fit-logistic", "--trajs", str(corpus / "train"), "--out", str(fits)])
    report = workdir / "logistic.report.json"
    _run([
        "evaluate", "--logistic", str(fits), "--trajs", str(corpus / "heldout"),
        "--frac", str(frac), "--report", str(report),
        "--csv", str(workdir / "logistic.records.csv"), "--oracle-losses",
    ])
    reports["logistic"] = json.loads(report.read_text())
    timings["logistic"] = time.time() - t0

    # context-sweep analog for the primary model: error vs observed fraction
    t0 = time.time()
    sweep = {}
    for f in sweep_fracs:
        rep_path = workdir / f"neuneu.sweep{f}.report.json"
        _run([
            "evaluate", "--ckpt", str(workdir / "neuneu.ckpt"),
            "--trajs", str(corpus / "heldout"), "--frac", str(f),
            "--report", str(rep_path),
            "--csv", str(workdir / f"neuneu.sweep{f}.csv"),
        ])
        sweep[str(f)] = json.loads(rep_path.read_text())["aggregates"]["mae"]
    timings["sweep"] = time.time() - t0

    summary: dict = {"models": {}, "sweep": sweep, "timings": timings}
    for name, doc in reports.items():
        agg = doc["aggregates"]
        summary["models"][name] = {
            "mae": agg["mae"],
            "coverage": agg["coverage"],
            "ranking": agg["ranking"]["accuracy"] if agg["ranking"] else None,
            "ranking_pairs": agg["ranking"]["n_pairs"] if agg["ranking"] else 0,
            "mae_inverse": _slice_mae(doc, lambda r: r["task"] == "inverse"),
            "mae_matched": _slice_mae(doc, lambda r: r["run"].startswith("mm-")),
            "n_records": len(doc["records"]),
        }
    summary["total_seconds"] = time.time() - t_start
    (workdir / "summary.json").write_text(
        json.dumps(summary, indent=1, sort_keys=True) + "\n"
    )
    return summary


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--workdir", required=True)
    parser.add_argument("--runs", type=int, default=2000)
    parser.add_argument("--tokens", type=int, default=4096)
    parser.add_argument("--masks", type=int, default=6)
    parser.add_argument("--seed", type=int, default=11)
    parser.add_argument("--fresh", action="store_true",
                        help="ignore previously finished stages")
    args = parser.parse_args(argv)
    summary = run_benchmark(
        args.workdir, runs=args.runs, tokens=args.tokens, masks=args.masks,
        corpus_seed=args.seed, reuse=not args.fresh,
    )
    models = summary["models"]
    print(f"{'model':<10} {'mae':>8} {'inverse':>8} {'matched':>8} "
          f"{'coverage':>9} {'ranking':>8}")
    for name in ("neuneu", "noloss", "average", "logistic"):
        m = models[name]
        rank = f"{m['ranking']:.3f}" if m["ranking"] is not None else "-"
        print(f"{name:<10} {m['mae']:>8.4f} {m['mae_inverse']:>8.4f} "
              f"{m['mae_matched']:>8.4f} {m['coverage']:>9.3f} {rank:>8}")
    print(f"context sweep (neuneu mae): {summary['sweep']}")
    print(f"total: {summary['total_seconds']:.0f} s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
