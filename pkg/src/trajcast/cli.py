"""Command-line pipeline: synthesize, build examples, train, fit, evaluate.

Every command is deterministic given its flags and seed, writes its outputs
atomically, and drops a run manifest (flags echo plus input content hashes)
alongside them so results stay auditable. Exit codes are stable: 0 ok,
2 usage or bad config, 3 I/O, 4 data validation, 5 numeric abort while
training, 6 oracle loss data required but not granted.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import datapipe, evalharness, forecaster, logfit, synthgen
from .datapipe import DataFormatError, MissingOracleData, TokenLossStore, ValidationError
from .forecaster import ConfigError, TrainingAborted

__all__ = ["main", "entry", "RunManifest"]

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_DATA = 4
EXIT_NUMERIC = 5
EXIT_ORACLE = 6


# ---------------------------------------------------------------------------
# Run manifests
# ---------------------------------------------------------------------------


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hash_path(path) -> str:
    """Content hash of a file, or of a directory's sorted (name, hash) pairs."""
    path = Path(path)
    if path.is_file():
        return _sha256_file(path)
    h = hashlib.sha256()
    for f in sorted(path.rglob("*")):
        if f.is_file():
            h.update(f"{f.relative_to(path)}:{_sha256_file(f)}\n".encode())
    return h.hexdigest()


@dataclass
class RunManifest:
    """Audit record written alongside every command's outputs.

    Paths are stored relative to the manifest's own location and nothing
    time-dependent is recorded, so reruns with identical flags and seeds
    produce byte-identical manifests.
    """

    command: str
    args: dict
    seed: int | None
    inputs: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)

    def write(self, path) -> None:
        path = Path(path)
        base = path.resolve().parent

        def rel(p):
            return os.path.relpath(Path(p).resolve(), base)

        doc = {
            "command": self.command,
            "args": {k: self.args[k] for k in sorted(self.args)},
            "seed": self.seed,
            "inputs": {rel(k): v for k, v in sorted(self.inputs.items())},
            "outputs": sorted(rel(p) for p in self.outputs),
        }
        _write_json(path, doc)


def _write_json(path, doc) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    tmp.replace(path)


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _cmd_synth(args) -> int:
    out = Path(args.out)
    families = tuple(args.families.split(","))
    info = synthgen.gen_corpus(
        out,
        n_runs=args.runs,
        families=families,
        tokens=args.tokens,
        seed=args.seed,
        heldout_frac=args.heldout_frac,
        matched_frac=args.matched_frac,
        zero_shot_family=args.zero_shot_family,
        t_min=args.t_min,
        t_max=args.t_max,
        noise_std=args.noise_std,
    )
    manifest = RunManifest(
        command="synth",
        args={
            "runs": args.runs, "families": args.families, "tokens": args.tokens,
            "heldout_frac": args.heldout_frac, "matched_frac": args.matched_frac,
            "zero_shot_family": args.zero_shot_family, "t_min": args.t_min,
            "t_max": args.t_max, "noise_std": args.noise_std,
        },
        seed=args.seed,
        outputs=[str(out / "train"), str(out / "heldout"), str(out / "corpus.json")],
    )
    manifest.write(out / "run_manifest.json")
    print(
        f"wrote {len(info.train_runs)} train runs, {len(info.heldout_runs)} "
        f"heldout runs, {info.token_files} token files to {out}"
    )
    return EXIT_OK


def _cmd_build_data(args) -> int:
    traj_dir = Path(args.trajs)
    traj_paths = sorted(traj_dir.glob("*.json"))
    traj_paths = [p for p in traj_paths if p.name not in ("corpus.json", "run_manifest.json")]
    if not traj_paths:
        raise ValidationError(f"no trajectory files in {traj_dir}")
    descriptors = []
    for idx, path in enumerate(traj_paths):
        traj = datapipe.read_trajectory(path)
        descriptors.extend(
            datapipe.enumerate_descriptors(
                traj,
                str(path.resolve()),
                args.variant,
                p_drop=args.drop_p,
                masks=args.masks,
                seed_seq=np.random.SeedSequence([args.seed, idx]),
            )
        )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    datapipe.write_example_manifest(out, descriptors)
    manifest = RunManifest(
        command="build-data",
        args={"variant": args.variant, "drop_p": args.drop_p, "masks": args.masks},
        seed=args.seed,
        inputs={str(traj_dir): _hash_path(traj_dir)},
        outputs=[str(out)],
    )
    manifest.write(Path(str(out) + ".manifest.json"))
    print(f"wrote {len(descriptors)} examples to {out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    config = forecaster.load_model_config(args.config)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    trace_path = Path(args.trace) if args.trace else Path(str(out) + ".trace.csv")

    def progress(step, total, loss):
        if step == 1 or step % 50 == 0 or step == total:
            _log(f"step {step}/{total} loss {loss:.5f}")

    def write_trace(trace):
        tmp = trace_path.with_suffix(trace_path.suffix + ".tmp")
        lines = ["step,lr,loss"]
        lines += [f"{s},{lr!r},{loss!r}" for s, lr, loss in trace]
        tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
        tmp.replace(trace_path)

    try:
        ckpt, trace = forecaster.train_from_manifest(
            args.manifest, config, args.seed, progress=progress
        )
    except TrainingAborted as aborted:
        forecaster.save_checkpoint(aborted.checkpoint, out)
        write_trace(aborted.trace)
        _log(f"training aborted: {aborted}; last good checkpoint kept at {out}")
        return EXIT_NUMERIC
    forecaster.save_checkpoint(ckpt, out)
    write_trace(trace)
    manifest = RunManifest(
        command="train",
        args={},
        seed=args.seed,
        inputs={
            str(args.manifest): _hash_path(args.manifest),
            str(args.config): _hash_path(args.config),
        },
        outputs=[str(out), str(trace_path)],
    )
    manifest.write(Path(str(out) + ".manifest.json"))
    print(f"trained {config.variant} for {len(trace)} steps, final loss {trace[-1][2]:.5f}")
    return EXIT_OK


def _load_heldout(traj_dir: Path) -> list:
    paths = sorted(traj_dir.glob("*.json"))
    paths = [p for p in paths if p.name not in ("corpus.json", "run_manifest.json")]
    if not paths:
        raise ValidationError(f"no trajectory files in {traj_dir}")
    return [datapipe.read_trajectory(p) for p in paths]


def _cmd_fit_logistic(args) -> int:
    trajs = _load_heldout(Path(args.trajs))
    store = TokenLossStore()
    wanted = None if args.task is None else {args.task}
    pairs_by_task: dict[str, list] = {}
    chance_by_task: dict[str, float] = {}
    for traj in trajs:
        if wanted is not None and traj.task_id not in wanted:
            continue
        bucket = pairs_by_task.setdefault(traj.task_id, [])
        for t in range(1, traj.n_checkpoints + 1):
            bucket.append((store.mean_loss(traj, t), float(traj.accuracies[t - 1])))
        chance_by_task[traj.task_id] = min(
            chance_by_task.get(traj.task_id, 1.0), float(traj.accuracies.min())
        )
    if not pairs_by_task:
        raise ValidationError(f"no runs with task {args.task!r} in {args.trajs}")
    fits = {}
    for task in sorted(pairs_by_task):
        fits[task] = logfit.fit_logistic(
            pairs_by_task[task], seed=args.seed, chance_level=chance_by_task[task]
        )
        _log(
            f"fit {task}: {len(pairs_by_task[task])} points, "
            f"sse {fits[task].sse:.5f}"
        )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    logfit.write_params(out, fits)
    manifest = RunManifest(
        command="fit-logistic",
        args={"task": args.task},
        seed=args.seed,
        inputs={str(args.trajs): _hash_path(args.trajs)},
        outputs=[str(out)],
    )
    manifest.write(Path(str(out) + ".manifest.json"))
    print(f"fitted {len(fits)} task(s) to {out}")
    return EXIT_OK


def _make_logistic_predictor(fits, store: TokenLossStore):
    def predict(traj, context, horizons):
        if traj.task_id not in fits:
            raise ValidationError(f"no logistic fit for task {traj.task_id!r}")
        params = fits[traj.task_id]
        s_k = int(context.checkpoint_indices()[-1])
        losses = [store.mean_loss(traj, s_k + int(g)) for g in horizons]
        preds = logfit.evaluate_logistic(traj, params, losses, n_context=s_k)
        return np.stack([preds, preds, preds], axis=1)

    return predict


def _cmd_evaluate(args) -> int:
    trajs = _load_heldout(Path(args.trajs))
    store = TokenLossStore()
    inputs = {str(args.trajs): _hash_path(args.trajs)}
    if args.logistic:
        if not args.oracle_losses:
            raise MissingOracleData(
                "the logistic baseline consumes true future mean losses; "
                "pass --oracle-losses to grant them"
            )
        fits = logfit.read_params(args.logistic)
        predictor = _make_logistic_predictor(fits, store)
        inputs[str(args.logistic)] = _hash_path(args.logistic)
        model_name = "logistic"
    else:
        ckpt = forecaster.load_checkpoint(args.ckpt)
        predictor = forecaster.make_predictor(ckpt, store, args.oracle_losses)
        inputs[str(args.ckpt)] = _hash_path(args.ckpt)
        model_name = ckpt.config.variant
    records = evalharness.evaluate_runs(predictor, trajs, frac=args.frac)
    report = evalharness.build_report(records)
    evalharness.write_report_json(report, args.report)
    evalharness.write_records_csv(records, args.csv)
    manifest = RunManifest(
        command="evaluate",
        args={"model": model_name, "frac": args.frac,
              "oracle_losses": bool(args.oracle_losses)},
        seed=None,
        inputs=inputs,
        outputs=[str(args.report), str(args.csv)],
    )
    manifest.write(Path(str(args.report) + ".manifest.json"))
    ranking = report.ranking or {}
    print(
        f"{model_name}: mae {report.mae_overall:.4f} over {len(records)} records, "
        f"coverage {report.coverage:.3f}"
        + (
            f", ranking {ranking['accuracy']:.3f} over {ranking['n_pairs']} pairs"
            if ranking
            else ""
        )
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser and dispatch
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trajcast",
        description="Forecast downstream-task accuracy from training trajectories.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--runs", type=int, default=100)
    p.add_argument("--families", default=",".join(synthgen.FAMILIES))
    p.add_argument("--tokens", type=int, default=4096)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--heldout-frac", type=float, default=0.2)
    p.add_argument("--matched-frac", type=float, default=0.25)
    p.add_argument("--zero-shot-family", default=None)
    p.add_argument("--t-min", type=int, default=8)
    p.add_argument("--t-max", type=int, default=12)
    p.add_argument("--noise-std", type=float, default=0.01)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("build-data", help="expand trajectories into training examples")
    p.add_argument("--trajs", required=True)
    p.add_argument("--variant", required=True, choices=datapipe.REPRESENTATION_KINDS)
    p.add_argument("--drop-p", type=float, default=0.4)
    p.add_argument("--masks", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_build_data)

    p = sub.add_parser("train", help="train a model from an example manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--trace", default=None)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("fit-logistic", help="fit the logistic baseline per task")
    p.add_argument("--trajs", required=True)
    p.add_argument("--task", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_fit_logistic)

    p = sub.add_parser("evaluate", help="score forecasts on heldout runs")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--ckpt", default=None)
    group.add_argument("--logistic", default=None)
    p.add_argument("--trajs", required=True)
    p.add_argument("--frac", type=float, default=0.2)
    p.add_argument("--report", required=True)
    p.add_argument("--csv", required=True)
    p.add_argument("--oracle-losses", action="store_true")
    p.set_defaults(func=_cmd_evaluate)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_USAGE
    try:
        return args.func(args)
    except ConfigError as exc:
        _log(f"config error: {exc}")
        return EXIT_USAGE
    except MissingOracleData as exc:
        _log(f"oracle data required: {exc}")
        return EXIT_ORACLE
    except TrainingAborted as exc:
        _log(f"numeric abort: {exc}")
        return EXIT_NUMERIC
    except (DataFormatError, ValidationError) as exc:
        _log(f"data error: {exc}")
        return EXIT_DATA
    except OSError as exc:
        _log(f"i/o error: {exc}")
        return EXIT_IO


def entry() -> None:  # console-script hook
    sys.exit(main())


if __name__ == "__main__":
    entry()
