"""Evaluation protocol: error metrics, calibration, ranking, and reports.

Predictors are plain callables ``(traj, context, horizons) -> [h, 3]`` rows
of (median, lower, upper), so trained models, baselines, and test stubs all
evaluate through the same path.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datapipe import Trajectory, ValidationError, take_first_fraction

__all__ = [
    "EvalRecord",
    "EvalReport",
    "PairRecord",
    "mae",
    "calibration_coverage",
    "ranking_accuracy",
    "bootstrap_ci",
    "context_sweep",
    "evaluate_runs",
    "build_report",
    "final_records",
    "write_report_json",
    "write_records_csv",
]

_TIE_EPS = 1e-12


@dataclass
class EvalRecord:
    """One (run, task, horizon) prediction against its ground truth."""

    run_id: str
    task_id: str
    horizon: int
    pred: float
    lo: float
    hi: float
    truth: float

    @property
    def abs_err(self) -> float:
        return abs(self.pred - self.truth)


def mae(preds, truths) -> float:
    preds = np.asarray(preds, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.float64)
    if preds.size == 0 or preds.shape != truths.shape:
        raise ValidationError(
            f"need matching nonempty arrays, got {preds.shape} vs {truths.shape}"
        )
    return float(np.abs(preds - truths).mean())


def calibration_coverage(intervals, truths) -> float:
    """Fraction of truths inside their closed [lo, hi] interval."""
    truths = np.asarray(truths, dtype=np.float64)
    intervals = np.asarray(intervals, dtype=np.float64)
    if truths.size == 0 or intervals.shape != (truths.size, 2):
        raise ValidationError("need one (lo, hi) interval per truth")
    lo, hi = intervals[:, 0], intervals[:, 1]
    if np.any(lo > hi):
        raise ValidationError("interval with lo > hi")
    inside = (truths >= lo) & (truths <= hi)
    return float(inside.mean())


@dataclass
class PairRecord:
    task_id: str
    config_a: str
    config_b: str
    pred_a: float
    pred_b: float
    truth_a: float
    truth_b: float
    score: float


def ranking_accuracy(
    final_preds: dict, final_truths: dict, pair_rule=None
) -> tuple[float, list[PairRecord]]:
    """Pairwise ordering accuracy of final-performance predictions.

    Keys are (config_id, task_id). Every unordered key pair accepted by
    ``pair_rule`` (default: same task, different config) is scored 1 when
    the predicted ordering matches the true one, 0 when it does not, and
    0.5 when the prediction is an exact tie. Pairs whose true values tie
    are excluded.
    """
    if set(final_preds) != set(final_truths):
        raise ValidationError("prediction and truth keys differ")
    if pair_rule is None:
        def pair_rule(ka, kb):
            return ka[1] == kb[1] and ka[0] != kb[0]

    keys = sorted(final_preds)
    pairs: list[PairRecord] = []
    for i, ka in enumerate(keys):
        for kb in keys[i + 1 :]:
            if not pair_rule(ka, kb):
                continue
            ta, tb = final_truths[ka], final_truths[kb]
            if abs(ta - tb) < _TIE_EPS:
                continue  # no true ordering to score against
            pa, pb = final_preds[ka], final_preds[kb]
            if abs(pa - pb) < _TIE_EPS:
                score = 0.5
            else:
                score = 1.0 if (pa > pb) == (ta > tb) else 0.0
            pairs.append(
                PairRecord(ka[1], ka[0], kb[0], pa, pb, ta, tb, score)
            )
    if not pairs:
        raise ValidationError("no scorable pairs")
    accuracy = float(np.mean([p.score for p in pairs]))
    return accuracy, pairs


def bootstrap_ci(
    values, resamples: int = 10_000, level: float = 0.95, seed: int = 0
) -> tuple[float, float]:
    """Percentile bootstrap interval for the mean, deterministic per seed."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValidationError("cannot bootstrap an empty sample")
    if not 0.0 < level < 1.0:
        raise ValidationError(f"level {level} outside (0, 1)")
    rng = np.random.default_rng(seed)
    # chunked so the index matrix stays small for large samples
    chunk = max(1, int(2e7 // max(values.size, 1)))
    means = np.empty(resamples)
    done = 0
    while done < resamples:
        rows = min(chunk, resamples - done)
        idx = rng.integers(0, values.size, size=(rows, values.size))
        means[done : done + rows] = values[idx].mean(axis=1)
        done += rows
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(means, [alpha, 1.0 - alpha])
    return float(lo), float(hi)


def evaluate_runs(predict_fn, trajs, frac: float = 0.2) -> list[EvalRecord]:
    """Condition on each run's first fraction and score all later checkpoints."""
    records: list[EvalRecord] = []
    for traj in trajs:
        context, heldout = take_first_fraction(traj, frac)
        horizons = [j - len(context) for j, _ in heldout]
        rows = np.asarray(predict_fn(traj, context, horizons), dtype=np.float64)
        if rows.shape != (len(horizons), 3):
            raise ValidationError(
                f"predictor returned {rows.shape}, expected ({len(horizons)}, 3)"
            )
        for (j, truth), g, (pred, lo, hi) in zip(heldout, horizons, rows):
            records.append(
                EvalRecord(
                    run_id=traj.run_id,
                    task_id=traj.task_id,
                    horizon=int(g),
                    pred=float(pred),
                    lo=float(lo),
                    hi=float(hi),
                    truth=float(truth),
                )
            )
    return records


def context_sweep(predict_fn, traj: Trajectory, fractions) -> list[tuple[float, float]]:
    """Error of one run's forecasts as the observed prefix grows."""
    fractions = [float(f) for f in fractions]
    if any(not 0.0 < f < 1.0 for f in fractions) or any(
        a >= b for a, b in zip(fractions, fractions[1:])
    ):
        raise ValidationError("fractions must be strictly increasing in (0, 1)")
    out = []
    for frac in fractions:
        records = evaluate_runs(predict_fn, [traj], frac)
        out.append((frac, mae([r.pred for r in records], [r.truth for r in records])))
    return out


def final_records(records: list[EvalRecord]) -> dict[tuple[str, str], EvalRecord]:
    """The largest-horizon record per (run, task): the end-of-training forecast."""
    out: dict[tuple[str, str], EvalRecord] = {}
    for rec in records:
        key = (rec.run_id, rec.task_id)
        if key not in out or rec.horizon > out[key].horizon:
            out[key] = rec
    return out


@dataclass
class EvalReport:
    records: list[EvalRecord]
    mae_overall: float
    mae_per_task: dict[str, float]
    mae_per_horizon: dict[int, float]
    coverage: float
    ranking: dict | None

    def to_dict(self) -> dict:
        return {
            "aggregates": {
                "mae": self.mae_overall,
                "mae_per_task": dict(sorted(self.mae_per_task.items())),
                "mae_per_horizon": {
                    str(k): v for k, v in sorted(self.mae_per_horizon.items())
                },
                "coverage": self.coverage,
                "ranking": self.ranking,
            },
            "records": [
                {
                    "run": r.run_id,
                    "task": r.task_id,
                    "horizon": r.horizon,
                    "pred": r.pred,
                    "lo": r.lo,
                    "hi": r.hi,
                    "truth": r.truth,
                    "abs_err": r.abs_err,
                }
                for r in self.records
            ],
        }


def build_report(records: list[EvalRecord], with_ranking: bool = True) -> EvalReport:
    """Aggregate raw records; every aggregate recomputes from the records."""
    if not records:
        raise ValidationError("no evaluation records")
    errs = np.array([r.abs_err for r in records])
    per_task: dict[str, float] = {}
    per_horizon: dict[int, float] = {}
    for key_fn, table in ((lambda r: r.task_id, per_task), (lambda r: r.horizon, per_horizon)):
        groups: dict = {}
        for r in records:
            groups.setdefault(key_fn(r), []).append(r.abs_err)
        for k, v in groups.items():
            table[k] = float(np.mean(v))
    coverage = calibration_coverage(
        [(r.lo, r.hi) for r in records], [r.truth for r in records]
    )
    ranking = None
    if with_ranking:
        finals = final_records(records)
        preds = {k: rec.pred for k, rec in finals.items()}
        truths = {k: rec.truth for k, rec in finals.items()}
        try:
            acc, pairs = ranking_accuracy(preds, truths)
            scores = [p.score for p in pairs]
            lo, hi = bootstrap_ci(scores, resamples=10_000, level=0.95, seed=0)
            ranking = {
                "accuracy": acc,
                "n_pairs": len(pairs),
                "ci_lo": lo,
                "ci_hi": hi,
            }
        except ValidationError:
            ranking = None  # single run or single config per task
    return EvalReport(
        records=records,
        mae_overall=float(errs.mean()),
        mae_per_task=per_task,
        mae_per_horizon=per_horizon,
        coverage=coverage,
        ranking=ranking,
    )


def write_report_json(report: EvalReport, path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(
        json.dumps(report.to_dict(), sort_keys=True, indent=1) + "\n",
        encoding="utf-8",
    )
    tmp.replace(path)


def write_records_csv(records: list[EvalRecord], path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run", "task", "horizon", "pred", "lo", "hi", "truth", "abs_err"])
        for r in records:
            writer.writerow(
                [r.run_id, r.task_id, r.horizon, repr(r.pred), repr(r.lo),
                 repr(r.hi), repr(r.truth), repr(r.abs_err)]
            )
    tmp.replace(path)
