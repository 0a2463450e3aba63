"""Logistic scaling-law baseline: least-squares sigmoid fits in loss space.

Maps a mean validation loss to an accuracy through a four-parameter
logistic, fitted per task with damped Gauss-Newton iterations from a fixed
grid of starting points. At evaluation time the baseline receives the true
future mean losses, so it isolates the loss-to-accuracy mapping problem.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datapipe import Trajectory, ValidationError

__all__ = [
    "LogisticParams",
    "FitError",
    "logistic_predict",
    "logistic_jacobian",
    "lm_refine",
    "LMResult",
    "fit_logistic",
    "evaluate_logistic",
    "write_params",
    "read_params",
]

_MAX_ITER = 200
_GRAD_TOL = 1e-8
_LAMBDA_MAX = 1e12


class FitError(RuntimeError):
    """Every start diverged; carries the best sum of squared residuals seen."""

    def __init__(self, message: str, best_sse: float):
        super().__init__(message)
        self.best_sse = best_sse


@dataclass
class LogisticParams:
    """a / (1 + exp(-k (loss - l0))) + b, with fit metadata."""

    a: float
    k: float
    l0: float
    b: float
    sse: float = float("nan")
    n_points: int = 0

    def theta(self) -> np.ndarray:
        return np.array([self.a, self.k, self.l0, self.b], dtype=np.float64)

    def to_dict(self, task_id: str = "") -> dict:
        return {
            "task_id": task_id,
            "a": self.a,
            "k": self.k,
            "L0": self.l0,
            "b": self.b,
            "sse": self.sse,
            "n_points": self.n_points,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "LogisticParams":
        return cls(
            a=float(doc["a"]),
            k=float(doc["k"]),
            l0=float(doc["L0"]),
            b=float(doc["b"]),
            sse=float(doc.get("sse", float("nan"))),
            n_points=int(doc.get("n_points", 0)),
        )


def _sigmoid(z: np.ndarray) -> np.ndarray:
    """Overflow-safe logistic function, branched on sign."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def logistic_predict(params: LogisticParams, mean_loss) -> np.ndarray | float:
    """Evaluate the fitted sigmoid at one or many mean losses."""
    x = np.asarray(mean_loss, dtype=np.float64)
    s = _sigmoid(params.k * (x - params.l0))
    out = params.a * s + params.b
    return float(out) if np.ndim(mean_loss) == 0 else out


def logistic_jacobian(theta: np.ndarray, x: np.ndarray) -> np.ndarray:
    """d f / d (a, k, l0, b) rows for each loss value, in closed form."""
    a, k, l0, _ = theta
    s = _sigmoid(k * (x - l0))
    sp = s * (1.0 - s)
    jac = np.empty((x.size, 4))
    jac[:, 0] = s
    jac[:, 1] = a * sp * (x - l0)
    jac[:, 2] = -a * sp * k
    jac[:, 3] = 1.0
    return jac


@dataclass
class LMResult:
    theta: np.ndarray
    sse: float
    sse_trace: list[float]
    grad_norm: float
    iterations: int
    converged: bool


def lm_refine(x: np.ndarray, y: np.ndarray, theta0: np.ndarray) -> LMResult:
    """Damped Gauss-Newton from one start; the SSE never increases.

    Steps solve (J'J + damping * diag(J'J)) delta = J'r and are only accepted
    when they reduce the SSE; rejected steps raise the damping. Stops when
    the gradient norm falls below 1e-8, the iteration cap is hit, or the
    damping saturates.
    """
    theta = np.asarray(theta0, dtype=np.float64).copy()
    resid = y - logistic_predict(LogisticParams(*theta), x)
    sse = float(resid @ resid)
    trace = [sse]
    lam = 1e-3
    grad_norm = np.inf
    converged = False
    it = 0
    while it < _MAX_ITER:
        it += 1
        jac = logistic_jacobian(theta, x)
        grad = 2.0 * (jac.T @ resid)
        grad_norm = float(np.linalg.norm(grad))
        if grad_norm <= _GRAD_TOL:
            converged = True
            break
        jtj = jac.T @ jac
        jtr = jac.T @ resid
        stepped = False
        while lam <= _LAMBDA_MAX:
            damped = jtj + lam * np.diag(np.maximum(np.diag(jtj), 1e-12))
            try:
                delta = np.linalg.solve(damped, jtr)
            except np.linalg.LinAlgError:
                lam *= 3.0
                continue
            cand = theta + delta
            cand_resid = y - logistic_predict(LogisticParams(*cand), x)
            cand_sse = float(cand_resid @ cand_resid)
            if np.isfinite(cand_sse) and cand_sse < sse:
                theta, resid, sse = cand, cand_resid, cand_sse
                trace.append(sse)
                lam = max(lam / 3.0, 1e-12)
                stepped = True
                break
            lam *= 3.0
        if not stepped:
            break  # damping saturated: local minimum to working precision
    return LMResult(theta, sse, trace, grad_norm, it, converged or grad_norm <= 1e-4)


def _start_grid(x: np.ndarray, chance_level: float | None) -> list[np.ndarray]:
    l0s = np.quantile(x, [0.25, 0.5, 0.75])
    bs = [0.0] if chance_level is None else [0.0, float(chance_level)]
    starts = []
    for a in (0.25, 0.5, 0.75, 1.0):
        for k in (0.5, -0.5, 2.0, -2.0, 8.0, -8.0):
            for l0 in l0s:
                for b in bs:
                    starts.append(np.array([a, k, l0, b]))
    return starts


def fit_logistic(
    pairs, seed: int = 0, chance_level: float | None = None
) -> LogisticParams:
    """Least-squares logistic fit over (mean loss, accuracy) pairs.

    Runs the damped Gauss-Newton refiner from a fixed multi-start grid and
    keeps the lowest-SSE solution, preferring ones whose predictions stay
    within [-0.05, 1.05] over the data range. Pairs are sorted internally,
    so the fit is exactly invariant to input order. ``seed`` is accepted
    for interface stability; the procedure is deterministic without it.
    """
    del seed
    pairs = sorted((float(x), float(y)) for x, y in pairs)
    if len(pairs) < 5:
        raise ValidationError(f"need at least 5 pairs to fit, got {len(pairs)}")
    x = np.array([p[0] for p in pairs])
    y = np.array([p[1] for p in pairs])
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValidationError("non-finite values in fit data")

    results: list[LMResult] = []
    for theta0 in _start_grid(x, chance_level):
        results.append(lm_refine(x, y, theta0))
    usable = [r for r in results if np.isfinite(r.sse) and r.converged]
    if not usable:
        finite = [r.sse for r in results if np.isfinite(r.sse)]
        best = min(finite) if finite else float("inf")
        raise FitError("no start converged", best_sse=best)
    usable.sort(key=lambda r: r.sse)

    probe = np.linspace(x.min(), x.max(), 64)
    chosen = None
    for r in usable:
        preds = logistic_predict(LogisticParams(*r.theta), probe)
        if np.all(preds >= -0.05) and np.all(preds <= 1.05):
            chosen = r
            break
    if chosen is None:
        chosen = usable[0]
    a, k, l0, b = chosen.theta
    return LogisticParams(a=a, k=k, l0=l0, b=b, sse=chosen.sse, n_points=x.size)


def evaluate_logistic(
    traj: Trajectory,
    params: LogisticParams,
    oracle_future_mean_losses,
    n_context: int,
) -> np.ndarray:
    """Clamped predictions for the checkpoints after an observed prefix.

    ``oracle_future_mean_losses`` supplies the true mean loss at each
    heldout checkpoint, one per checkpoint in (n_context, T].
    """
    losses = np.asarray(oracle_future_mean_losses, dtype=np.float64)
    expected = traj.n_checkpoints - n_context
    if losses.size != expected:
        raise ValidationError(
            f"run {traj.run_id!r}: {losses.size} oracle losses for "
            f"{expected} heldout checkpoints"
        )
    if expected == 0:
        return np.array([])
    return np.clip(logistic_predict(params, losses), 0.0, 1.0)


def write_params(path, fits: dict[str, LogisticParams]) -> None:
    """Serialize per-task fits as a JSON list sorted by task id."""
    docs = [fits[task].to_dict(task) for task in sorted(fits)]
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(docs, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    tmp.replace(path)


def read_params(path) -> dict[str, LogisticParams]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if isinstance(doc, dict):
        doc = [doc]
    return {entry["task_id"]: LogisticParams.from_dict(entry) for entry in doc}
