#!/usr/bin/env python3
"""Forecast error as a function of observed context length for one checkpoint.

Writes a plot-ready CSV (fraction, mae, n_records) over a heldout corpus.

Usage:
    python3 scripts/sweep_context.py --ckpt bench/neuneu.ckpt \
        --trajs bench/corpus/heldout --out sweep.csv
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from trajcast import datapipe, evalharness, forecaster
from trajcast.datapipe import TokenLossStore


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--ckpt", required=True)
    parser.add_argument("--trajs", required=True)
    parser.add_argument("--out", required=True)
    parser.add_argument("--fractions", default="0.1,0.2,0.3,0.4,0.5,0.6,0.7")
    parser.add_argument("--oracle-losses", action="store_true")
    args = parser.parse_args(argv)

    fractions = [float(f) for f in args.fractions.split(",")]
    ckpt = forecaster.load_checkpoint(args.ckpt)
    store = TokenLossStore()
    predictor = forecaster.make_predictor(ckpt, store, args.oracle_losses)
    paths = sorted(Path(args.trajs).glob("*.json"))
    paths = [p for p in paths if p.name not in ("corpus.json", "run_manifest.json")]
    trajs = [datapipe.read_trajectory(p) for p in paths]

    lines = ["fraction,mae,n_records"]
    for frac in fractions:
        records = evalharness.evaluate_runs(predictor, trajs, frac=frac)
        mae = evalharness.mae(
            [r.pred for r in records], [r.truth for r in records]
        )
        lines.append(f"{frac!r},{mae!r},{len(records)}")
        print(f"fraction {frac}: mae {mae:.4f} over {len(records)} records")
    Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return 0


if __name__ == "__main__":
    sys.exit(main())
