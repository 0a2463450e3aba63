"""Trajectory ingestion, validation-loss representations, and example construction.

A trajectory is an ordered sequence of checkpoint accuracies for one
(run, task) pair, optionally backed by per-checkpoint token-probability
files. Training examples are built by imputing unit gaps, randomly
dropping checkpoints with gap absorption, and pairing every prefix of
the surviving sequence with each future checkpoint as a target.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "ValidationError",
    "DataFormatError",
    "MissingOracleData",
    "Trajectory",
    "ContextSequence",
    "HistogramDelta",
    "ExampleDescriptor",
    "TrainingExample",
    "REPRESENTATION_KINDS",
    "losses_to_probs",
    "aggregate_whitespace",
    "average_prob",
    "histogram",
    "hist_diff",
    "impute_unit_gaps",
    "drop_with_absorption",
    "truncate_context",
    "take_first_fraction",
    "make_training_examples",
    "enumerate_descriptors",
    "attach_representation",
    "TokenLossStore",
    "read_trajectory",
    "write_trajectory",
    "read_token_prob_file",
    "write_token_prob_file",
    "write_example_manifest",
    "read_example_manifest",
]

REPRESENTATION_KINDS = ("neuneu", "average", "histdiff", "noloss", "diffprobe")

# Variants whose representation needs data from checkpoints after the
# context end (granted only under the oracle evaluation protocol).
ORACLE_KINDS = ("histdiff", "diffprobe")


class ValidationError(ValueError):
    """A domain invariant was violated by input data."""


class DataFormatError(Exception):
    """A file failed structural validation; carries path and byte offset."""

    def __init__(self, path, offset: int, message: str):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{path} @ byte {offset}: {message}")


class MissingOracleData(Exception):
    """Future-checkpoint loss data was required but unavailable or not allowed."""


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass
class Trajectory:
    """One training run's accuracy sequence for a single task."""

    run_id: str
    task_id: str
    accuracies: np.ndarray
    compute_unit_flops: float = 1.0
    token_prob_files: list[str] | None = None
    base_dir: Path | None = None  # resolution root for relative file paths

    def __post_init__(self):
        self.accuracies = np.asarray(self.accuracies, dtype=np.float64)
        if self.accuracies.ndim != 1 or self.accuracies.size < 2:
            raise ValidationError(
                f"run {self.run_id!r}: need at least 2 checkpoints, "
                f"got shape {self.accuracies.shape}"
            )
        if np.any(self.accuracies < 0.0) or np.any(self.accuracies > 1.0):
            bad = self.accuracies[(self.accuracies < 0) | (self.accuracies > 1)][0]
            raise ValidationError(f"run {self.run_id!r}: accuracy {bad} outside [0, 1]")
        if self.token_prob_files is not None and len(self.token_prob_files) != len(
            self.accuracies
        ):
            raise ValidationError(
                f"run {self.run_id!r}: {len(self.token_prob_files)} token files "
                f"for {len(self.accuracies)} checkpoints"
            )

    @property
    def n_checkpoints(self) -> int:
        return int(self.accuracies.size)

    def token_file_path(self, checkpoint: int) -> Path:
        """Absolute path of the token-probability file for a 1-based checkpoint."""
        if self.token_prob_files is None:
            raise MissingOracleData(
                f"run {self.run_id!r} has no token-probability files"
            )
        rel = Path(self.token_prob_files[checkpoint - 1])
        if rel.is_absolute() or self.base_dir is None:
            return rel
        return self.base_dir / rel


@dataclass
class ContextSequence:
    """Alternating (accuracy, gap) pairs plus the gap to the prediction target.

    ``gap`` is the number of compute units after its accuracy reading; the
    final pair's gap is replaced by ``target_gap`` when fed to a model.
    """

    pairs: list[tuple[float, int]]
    target_gap: int = 1

    def __post_init__(self):
        if not self.pairs:
            raise ValidationError("context sequence must be nonempty")
        self.pairs = [(float(y), int(g)) for y, g in self.pairs]
        for y, g in self.pairs:
            if not 0.0 <= y <= 1.0:
                raise ValidationError(f"context accuracy {y} outside [0, 1]")
            if g < 1:
                raise ValidationError(f"context gap {g} must be >= 1")
        self.target_gap = int(self.target_gap)
        if self.target_gap < 1:
            raise ValidationError(f"target gap {self.target_gap} must be >= 1")

    def __len__(self) -> int:
        return len(self.pairs)

    def ys(self) -> np.ndarray:
        return np.array([y for y, _ in self.pairs], dtype=np.float64)

    def gaps(self) -> np.ndarray:
        return np.array([g for _, g in self.pairs], dtype=np.int64)

    def effective_gaps(self) -> np.ndarray:
        """Gaps as consumed by a model: the last one is the target gap."""
        g = self.gaps()
        g[-1] = self.target_gap
        return g

    def with_target_gap(self, target_gap: int) -> "ContextSequence":
        return ContextSequence(list(self.pairs), target_gap=target_gap)

    def checkpoint_indices(self) -> np.ndarray:
        """Original 1-based checkpoint indices, assuming a unit-gap origin.

        Valid for sequences built by impute_unit_gaps and then trimmed by
        drop/truncation, where each surviving gap is the count of original
        checkpoints it spans.
        """
        g = self.gaps()
        return np.concatenate(([1], 1 + np.cumsum(g[:-1])))


@dataclass
class HistogramDelta:
    """Difference of two normalized probability histograms."""

    delta: np.ndarray

    def __post_init__(self):
        self.delta = np.asarray(self.delta, dtype=np.float64)
        if self.delta.ndim != 1 or self.delta.size < 2:
            raise ValidationError("histogram delta must be a vector of >= 2 bins")
        if abs(float(self.delta.sum())) > 1e-9:
            raise ValidationError(f"histogram delta sums to {self.delta.sum()}, not 0")
        if np.any(np.abs(self.delta) > 1.0 + 1e-12):
            raise ValidationError("histogram delta entries must lie in [-1, 1]")

    @property
    def bin_count(self) -> int:
        return int(self.delta.size)


@dataclass(frozen=True)
class ExampleDescriptor:
    """Pointer-level description of one training example.

    ``ctx_indices`` are ascending 1-based checkpoint indices of the surviving
    context; ``target_index`` is the future checkpoint being predicted.
    """

    traj_path: str
    ctx_indices: tuple[int, ...]
    target_index: int
    variant: str

    @property
    def s_k(self) -> int:
        return self.ctx_indices[-1]

    @property
    def target_gap(self) -> int:
        return self.target_index - self.s_k


@dataclass
class TrainingExample:
    """A materialized example: context, attached representation, and target."""

    context: ContextSequence
    representation: object  # ndarray, HistogramDelta, or None per variant
    target_accuracy: float
    variant: str
    descriptor: ExampleDescriptor | None = None


# ---------------------------------------------------------------------------
# Loss representations
# ---------------------------------------------------------------------------


def losses_to_probs(losses) -> np.ndarray:
    """Map per-token losses to probabilities via p = exp(-loss)."""
    losses = np.asarray(losses, dtype=np.float64)
    if not np.all(np.isfinite(losses)):
        raise ValidationError("losses must be finite")
    if np.any(losses < 0):
        raise ValidationError(f"negative loss {losses[losses < 0][0]}")
    return np.exp(-losses)


def aggregate_whitespace(subword_probs, word_spans) -> np.ndarray:
    """Combine subword probabilities into per-word probabilities.

    ``word_spans`` is a list of half-open ``(start, stop)`` index ranges
    that must partition the whole input in order. Each word's probability
    is the product of its subword probabilities.
    """
    p = np.asarray(subword_probs, dtype=np.float64)
    expected = 0
    for start, stop in word_spans:
        if start != expected:
            raise ValidationError(
                f"span ({start}, {stop}) leaves a gap or overlap at index {expected}"
            )
        if stop <= start:
            raise ValidationError(f"empty span ({start}, {stop})")
        expected = stop
    if expected != p.size:
        raise ValidationError(f"spans cover {expected} of {p.size} entries")
    return np.array([p[start:stop].prod() for start, stop in word_spans])


def average_prob(p) -> float:
    p = np.asarray(p, dtype=np.float64)
    if p.size == 0:
        raise ValidationError("cannot average an empty probability vector")
    return float(p.mean())


def histogram(p, bins: int) -> np.ndarray:
    """Normalized histogram over ``bins`` equal cells of [0, 1].

    Cell b covers ((b-1)/B, b/B]; exact zeros land in the first cell so
    the histogram always sums to one.
    """
    if bins < 2:
        raise ValidationError(f"need at least 2 bins, got {bins}")
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0) or np.any(p > 1):
        raise ValidationError("probabilities must lie in [0, 1]")
    idx = np.ceil(p * bins).astype(np.int64)
    idx = np.clip(idx, 1, bins)
    counts = np.bincount(idx - 1, minlength=bins).astype(np.float64)
    return counts / p.size


def hist_diff(h_now, h_future) -> HistogramDelta:
    h_now = np.asarray(h_now, dtype=np.float64)
    h_future = np.asarray(h_future, dtype=np.float64)
    if h_now.shape != h_future.shape:
        raise ValidationError(
            f"histogram length mismatch: {h_now.shape} vs {h_future.shape}"
        )
    for name, h in (("current", h_now), ("future", h_future)):
        if abs(float(h.sum()) - 1.0) > 1e-9:
            raise ValidationError(f"{name} histogram sums to {h.sum()}, not 1")
    return HistogramDelta(h_future - h_now)


# ---------------------------------------------------------------------------
# Context construction and augmentation
# ---------------------------------------------------------------------------


def impute_unit_gaps(accuracies) -> ContextSequence:
    """Lift a raw accuracy sequence to (accuracy, gap=1) pairs."""
    accuracies = np.asarray(accuracies, dtype=np.float64)
    if accuracies.size < 2:
        raise ValidationError("need at least 2 accuracies")
    return ContextSequence([(float(y), 1) for y in accuracies])


def drop_with_absorption(
    seq: ContextSequence, p_drop: float, rng: np.random.Generator
) -> ContextSequence:
    """Randomly delete elements, folding each deleted gap into its predecessor.

    The first element is never dropped (there is nothing before it to absorb
    its gap); the total gap sum is preserved for every draw.
    """
    if not 0.0 <= p_drop < 1.0:
        raise ValidationError(f"p_drop {p_drop} outside [0, 1)")
    kept: list[tuple[float, int]] = [seq.pairs[0]]
    for y, g in seq.pairs[1:]:
        if rng.random() < p_drop:
            py, pg = kept[-1]
            kept[-1] = (py, pg + g)
        else:
            kept.append((y, g))
    return ContextSequence(kept, target_gap=seq.target_gap)


def truncate_context(seq: ContextSequence, max_pairs: int) -> ContextSequence:
    """Drop oldest elements past ``max_pairs``, absorbing their gaps forward."""
    if max_pairs < 1:
        raise ValidationError("max_pairs must be >= 1")
    if len(seq) <= max_pairs:
        return seq
    cut = len(seq) - max_pairs
    absorbed = sum(g for _, g in seq.pairs[:cut])
    head_y, head_g = seq.pairs[cut]
    pairs = [(head_y, head_g + absorbed)] + list(seq.pairs[cut + 1 :])
    return ContextSequence(pairs, target_gap=seq.target_gap)


def take_first_fraction(
    traj: Trajectory, frac: float
) -> tuple[ContextSequence, list[tuple[int, float]]]:
    """Split a run into an observed prefix and heldout (index, accuracy) targets.

    The context covers the first max(2, floor(frac * T)) checkpoints with
    unit gaps; everything after is returned as prediction targets.
    """
    if not 0.0 < frac < 1.0:
        raise ValidationError(f"fraction {frac} outside (0, 1)")
    t = traj.n_checkpoints
    if t < 3:
        raise ValidationError(f"run {traj.run_id!r}: need at least 3 checkpoints")
    n_ctx = max(2, int(np.floor(frac * t)))
    n_ctx = min(n_ctx, t - 1)
    context = impute_unit_gaps(traj.accuracies[:n_ctx])
    heldout = [(j, float(traj.accuracies[j - 1])) for j in range(n_ctx + 1, t + 1)]
    return context, heldout


# ---------------------------------------------------------------------------
# Training example construction
# ---------------------------------------------------------------------------


def make_training_examples(
    seq: ContextSequence,
    traj: Trajectory,
    representation_kind: str,
    loss_store: "TokenLossStore | None",
    bins: int = 64,
) -> list[TrainingExample]:
    """One example per future checkpoint for a context ending at s_k < T.

    The context's final gap is replaced by the distance to each target.
    Representations read only the data their variant is entitled to:
    token probabilities at s_k (neuneu), per-checkpoint mean probabilities
    up to s_k (average), the histogram change from s_k to the target
    (histdiff and diffprobe, which see the future by design), or nothing.
    """
    if representation_kind not in REPRESENTATION_KINDS:
        raise ValidationError(f"unknown representation kind {representation_kind!r}")
    indices = seq.checkpoint_indices()
    s_k = int(indices[-1])
    t_total = traj.n_checkpoints
    if s_k >= t_total:
        raise ValidationError(
            f"context ends at checkpoint {s_k}, nothing to predict in run of {t_total}"
        )
    examples = []
    for j in range(s_k + 1, t_total + 1):
        desc = ExampleDescriptor(
            traj_path="", ctx_indices=tuple(int(i) for i in indices),
            target_index=j, variant=representation_kind,
        )
        rep = attach_representation(desc, traj, loss_store, bins=bins)
        examples.append(
            TrainingExample(
                context=seq.with_target_gap(j - s_k),
                representation=rep,
                target_accuracy=float(traj.accuracies[j - 1]),
                variant=representation_kind,
                descriptor=desc,
            )
        )
    return examples


def attach_representation(
    desc: ExampleDescriptor,
    traj: Trajectory,
    loss_store: "TokenLossStore | None",
    bins: int = 64,
):
    """Fetch the validation-loss representation for one descriptor."""
    kind = desc.variant
    if kind == "noloss":
        return None
    if loss_store is None:
        raise MissingOracleData(
            f"variant {kind!r} needs token-probability data for run {traj.run_id!r}"
        )
    s_k = desc.s_k
    if kind == "neuneu":
        return loss_store.probs(traj, s_k)
    if kind == "average":
        return np.array(
            [loss_store.mean_prob(traj, i) for i in range(1, s_k + 1)],
            dtype=np.float64,
        )
    if kind in ("histdiff", "diffprobe"):
        h_now = loss_store.histogram(traj, s_k, bins)
        h_future = loss_store.histogram(traj, desc.target_index, bins)
        return hist_diff(h_now, h_future)
    raise ValidationError(f"unknown representation kind {kind!r}")


def enumerate_descriptors(
    traj: Trajectory,
    traj_path: str,
    variant: str,
    p_drop: float,
    masks: int,
    seed_seq: np.random.SeedSequence,
) -> list[ExampleDescriptor]:
    """All (context prefix, future target) descriptors for one run.

    Each mask draws an independent dropped subsequence; every proper prefix
    of the surviving sequence becomes a context whose future checkpoints are
    enumerated as targets. With ``p_drop == 0`` and one mask this yields
    exactly sum over s_k of (T - s_k) examples.
    """
    if variant not in REPRESENTATION_KINDS:
        raise ValidationError(f"unknown variant {variant!r}")
    if masks < 1:
        raise ValidationError("masks must be >= 1")
    t_total = traj.n_checkpoints
    base = impute_unit_gaps(traj.accuracies)
    out: list[ExampleDescriptor] = []
    for mask_idx, child in enumerate(seed_seq.spawn(masks)):
        rng = np.random.default_rng(child)
        survived = drop_with_absorption(base, p_drop, rng)
        indices = survived.checkpoint_indices()
        for k in range(len(indices)):
            s_k = int(indices[k])
            if s_k >= t_total:
                continue
            ctx = tuple(int(i) for i in indices[: k + 1])
            for j in range(s_k + 1, t_total + 1):
                out.append(
                    ExampleDescriptor(
                        traj_path=traj_path,
                        ctx_indices=ctx,
                        target_index=j,
                        variant=variant,
                    )
                )
    return out


def context_from_descriptor(desc: ExampleDescriptor, traj: Trajectory) -> ContextSequence:
    """Rebuild the (accuracy, gap) context a descriptor points at."""
    idx = np.asarray(desc.ctx_indices, dtype=np.int64)
    ys = traj.accuracies[idx - 1]
    gaps = np.append(np.diff(idx), 1)
    pairs = [(float(y), int(g)) for y, g in zip(ys, gaps)]
    return ContextSequence(pairs, target_gap=desc.target_gap)


# ---------------------------------------------------------------------------
# Token-probability store
# ---------------------------------------------------------------------------


class TokenLossStore:
    """Cached access to per-checkpoint token probabilities and derivations.

    All derived quantities (means, losses, histograms) go through
    :meth:`probs`, so instrumenting that single method observes every
    checkpoint read.
    """

    def __init__(self):
        self._probs: dict[tuple[str, int], np.ndarray] = {}
        self._derived: dict[tuple, object] = {}

    def probs(self, traj: Trajectory, checkpoint: int) -> np.ndarray:
        """Token probabilities at a 1-based checkpoint (float32, cached)."""
        if not 1 <= checkpoint <= traj.n_checkpoints:
            raise ValidationError(
                f"run {traj.run_id!r}: checkpoint {checkpoint} outside "
                f"[1, {traj.n_checkpoints}]"
            )
        key = (traj.run_id, checkpoint)
        cached = self._probs.get(key)
        if cached is None:
            path = traj.token_file_path(checkpoint)
            if not path.exists():
                raise DataFormatError(
                    path, 0, f"missing token file for run {traj.run_id!r} "
                    f"checkpoint {checkpoint}"
                )
            cached = read_token_prob_file(path)
            self._probs[key] = cached
        return cached

    def mean_prob(self, traj: Trajectory, checkpoint: int) -> float:
        key = ("mean", traj.run_id, checkpoint)
        if key not in self._derived:
            self._derived[key] = float(self.probs(traj, checkpoint).mean())
        return self._derived[key]

    def mean_loss(self, traj: Trajectory, checkpoint: int) -> float:
        """Average per-token loss, -log p with p floored at 1e-12."""
        key = ("loss", traj.run_id, checkpoint)
        if key not in self._derived:
            p = np.maximum(self.probs(traj, checkpoint).astype(np.float64), 1e-12)
            self._derived[key] = float(-np.log(p).mean())
        return self._derived[key]

    def histogram(self, traj: Trajectory, checkpoint: int, bins: int) -> np.ndarray:
        key = ("hist", traj.run_id, checkpoint, bins)
        if key not in self._derived:
            self._derived[key] = histogram(self.probs(traj, checkpoint), bins)
        return self._derived[key]


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

_TOKEN_MAGIC = b"NNSL"
_TOKEN_VERSION = 1
_PROB_SLACK = 1e-6


def write_trajectory(traj: Trajectory, path) -> None:
    path = Path(path)
    doc = {
        "run_id": traj.run_id,
        "task_id": traj.task_id,
        "compute_unit_flops": traj.compute_unit_flops,
        "accuracies": [float(y) for y in traj.accuracies],
        "token_prob_files": traj.token_prob_files,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    tmp.replace(path)


def read_trajectory(path) -> Trajectory:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataFormatError(path, exc.pos, f"invalid JSON: {exc.msg}") from exc
    for key in ("run_id", "task_id", "accuracies"):
        if key not in doc:
            raise DataFormatError(path, 0, f"missing field {key!r}")
    try:
        return Trajectory(
            run_id=doc["run_id"],
            task_id=doc["task_id"],
            accuracies=np.asarray(doc["accuracies"], dtype=np.float64),
            compute_unit_flops=float(doc.get("compute_unit_flops", 1.0)),
            token_prob_files=doc.get("token_prob_files"),
            base_dir=path.parent,
        )
    except ValidationError as exc:
        raise ValidationError(f"{path}: {exc}") from exc


def write_token_prob_file(path, probs) -> None:
    probs = np.asarray(probs)
    if np.any(probs < 0) or np.any(probs > 1):
        raise ValidationError("token probabilities must lie in [0, 1]")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_TOKEN_MAGIC)
        fh.write(struct.pack("<I", _TOKEN_VERSION))
        fh.write(struct.pack("<Q", probs.size))
        fh.write(probs.astype("<f4").tobytes())
    tmp.replace(path)


def read_token_prob_file(path) -> np.ndarray:
    """Read a token-probability file; returns float32 values in [0, 1]."""
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 16:
        raise DataFormatError(path, len(blob), "truncated header")
    if blob[:4] != _TOKEN_MAGIC:
        raise DataFormatError(path, 0, f"bad magic {blob[:4]!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != _TOKEN_VERSION:
        raise DataFormatError(path, 4, f"unsupported version {version}")
    (count,) = struct.unpack_from("<Q", blob, 8)
    expected = 16 + 4 * count
    if len(blob) != expected:
        raise DataFormatError(
            path, min(len(blob), expected),
            f"expected {expected} bytes for {count} values, found {len(blob)}",
        )
    values = np.frombuffer(blob, dtype="<f4", offset=16).copy()
    low = values < 0.0
    high = values > 1.0
    if np.any(values < -_PROB_SLACK) or np.any(values > 1.0 + _PROB_SLACK):
        bad = int(np.argmax((values < -_PROB_SLACK) | (values > 1.0 + _PROB_SLACK)))
        raise DataFormatError(
            path, 16 + 4 * bad, f"value {values[bad]} outside [0, 1]"
        )
    values[low] = 0.0
    values[high] = 1.0
    return values


def write_example_manifest(path, descriptors: list[ExampleDescriptor]) -> None:
    """One descriptor per line; trajectory paths stored relative to the manifest."""
    path = Path(path)
    base = path.parent.resolve()
    lines = []
    for d in descriptors:
        rel = Path(d.traj_path)
        if rel.is_absolute():
            rel = Path(os.path.relpath(rel, base))
        lines.append(
            json.dumps(
                {
                    "traj": str(rel),
                    "ctx": list(d.ctx_indices),
                    "j": d.target_index,
                    "variant": d.variant,
                },
                sort_keys=True,
            )
        )
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    tmp.replace(path)


def read_example_manifest(path) -> tuple[list[ExampleDescriptor], str]:
    """Load descriptors (paths resolved to absolute) and their shared variant."""
    path = Path(path)
    base = path.parent.resolve()
    descriptors: list[ExampleDescriptor] = []
    variants = set()
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(path, n, f"line {n}: invalid JSON") from exc
            try:
                desc = ExampleDescriptor(
                    traj_path=str((base / doc["traj"]).resolve()),
                    ctx_indices=tuple(int(i) for i in doc["ctx"]),
                    target_index=int(doc["j"]),
                    variant=doc["variant"],
                )
            except (KeyError, TypeError) as exc:
                raise DataFormatError(path, n, f"line {n}: bad descriptor") from exc
            variants.add(desc.variant)
            descriptors.append(desc)
    if not descriptors:
        raise ValidationError(f"{path}: empty manifest")
    if len(variants) > 1:
        raise ValidationError(f"{path}: mixed variants {sorted(variants)}")
    return descriptors, variants.pop()
