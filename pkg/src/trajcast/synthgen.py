"""Deterministic synthetic corpora: accuracy trajectories plus token probabilities.

Four trajectory families cover the qualitative behaviors a forecaster must
handle: saturating growth, early plateau, inverse scaling, and U-shapes.
Token probabilities are drawn from a two-component beta mixture whose mean
and variance both move with a latent capability, with a deliberate fold in
the mean curve: two distinct capabilities can share a mean while their
variances stay apart. Runs generated on the two sides of that fold are
indistinguishable to any consumer of the mean probability alone, which is
what lets the evaluation separate distribution-aware models from averaging
ones at desk scale.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import datapipe
from .datapipe import Trajectory, ValidationError

__all__ = [
    "FAMILIES",
    "FamilySpec",
    "mean_curve",
    "capability_path",
    "gen_trajectory",
    "token_mean",
    "token_variance",
    "matched_mean_partner",
    "gen_token_probs",
    "gen_corpus",
    "CorpusInfo",
]

FAMILIES = ("saturating", "plateau", "inverse", "u_shaped")

# Beta-mixture shape model. The low component holds still-hard tokens; the
# high component tracks mastered tokens and spreads with capability, so the
# branch separation in variance stays above 0.02 across the matched range.
_M_LO = 0.05


def _m_hi(c):
    return 0.42 + 0.56 * np.asarray(c, dtype=np.float64)


def _kappa_hi(c):
    return 12.0 - 5.0 * np.asarray(c, dtype=np.float64)


def _kappa_lo(c):
    return 9.0 - 4.0 * np.asarray(c, dtype=np.float64)


_MEAN_FOLD_TOP = 0.30  # capabilities below this have a matched partner above


def token_mean(c):
    """Mean token probability at capability ``c``; folded, not monotone.

    Dips until ~0.36 then rises, so every low capability shares its mean
    with exactly one higher capability of larger variance.
    """
    c = np.asarray(c, dtype=np.float64)
    return 0.2 + 0.5 * c - 0.35 * np.sin(np.pi * c)


def _mixture_weight(c):
    return (token_mean(c) - _M_LO) / (_m_hi(c) - _M_LO)


def token_variance(c):
    """Analytic variance of the token mixture at capability ``c``."""
    c = np.asarray(c, dtype=np.float64)
    w = _mixture_weight(c)
    m_hi = _m_hi(c)
    v_hi = m_hi * (1.0 - m_hi) / (_kappa_hi(c) + 1.0)
    v_lo = _M_LO * (1.0 - _M_LO) / (_kappa_lo(c) + 1.0)
    between = w * (1.0 - w) * (m_hi - _M_LO) ** 2
    return between + w * v_hi + (1.0 - w) * v_lo


_RISE_START = 0.36  # the mean is strictly increasing from here to 1


def matched_mean_partner(c: float) -> float:
    """The higher capability whose token mean equals that of low ``c``.

    Solved by bisection on the rising branch of the mean curve; defined for
    c in [0, 0.30].
    """
    if not 0.0 <= c <= _MEAN_FOLD_TOP:
        raise ValidationError(
            f"capability {c} outside the folded range [0, {_MEAN_FOLD_TOP}]"
        )
    target = float(token_mean(c))
    lo, hi = _RISE_START, 1.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if float(token_mean(mid)) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def gen_token_probs(
    latent_capability: float, n: int, seed, position_ranks=None
) -> np.ndarray:
    """Sample ``n`` token probabilities at one capability, deterministically.

    With ``position_ranks`` (a fixed uniform[0,1] vector shared by a whole
    corpus), the mastered component is assigned positionally: position i is
    mastered once the mixture weight passes its rank. That mirrors scoring
    every checkpoint on one fixed validation sample, where each position is
    the same word everywhere and easy words are mastered first. Without
    ranks the assignment is drawn per call. The per-token marginal is the
    same two-component mixture either way.
    """
    if n < 1:
        raise ValidationError("need at least one token")
    c = float(np.clip(latent_capability, 0.0, 1.0))
    rng = np.random.default_rng(seed)
    w = float(_mixture_weight(c))
    m_hi = float(_m_hi(c))
    k_hi = float(_kappa_hi(c))
    k_lo = float(_kappa_lo(c))
    if position_ranks is None:
        take_hi = rng.random(n) < w
    else:
        ranks = np.asarray(position_ranks, dtype=np.float64)
        if ranks.shape != (n,):
            raise ValidationError(
                f"position ranks must have shape ({n},), got {ranks.shape}"
            )
        take_hi = ranks < w
    hi = rng.beta(m_hi * k_hi, (1.0 - m_hi) * k_hi, n)
    lo = rng.beta(_M_LO * k_lo, (1.0 - _M_LO) * k_lo, n)
    return np.clip(np.where(take_hi, hi, lo), 0.0, 1.0)


# ---------------------------------------------------------------------------
# Trajectory families
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FamilySpec:
    """Latent parameters of one synthetic training run."""

    family: str
    chance: float = 0.25
    ceiling: float = 0.8
    rate: float = 0.8
    midpoint: float = 5.0
    dip_depth: float = 0.0
    dip_loc: float = 4.0
    dip_width: float = 1.5
    noise_std: float = 0.01
    t_checkpoints: int = 10
    capability_branch: str = "natural"  # natural | low | partner

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValidationError(f"unknown family {self.family!r}")
        if self.t_checkpoints < 4:
            raise ValidationError("need at least 4 checkpoints")
        if self.noise_std < 0:
            raise ValidationError("noise_std must be >= 0")
        if self.capability_branch not in ("natural", "low", "partner"):
            raise ValidationError(f"unknown branch {self.capability_branch!r}")


def _sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def mean_curve(spec: FamilySpec) -> np.ndarray:
    """Noiseless accuracy curve at checkpoints 1..T."""
    t = np.arange(1, spec.t_checkpoints + 1, dtype=np.float64)
    span = spec.ceiling - spec.chance
    if spec.family in ("saturating", "plateau"):
        y = spec.chance + span * _sigmoid(spec.rate * (t - spec.midpoint))
    elif spec.family == "inverse":
        y = spec.chance + span * _sigmoid(-spec.rate * (t - spec.midpoint))
    elif spec.family == "u_shaped":
        base = spec.chance + span * _sigmoid(spec.rate * (t - spec.midpoint))
        dip = spec.dip_depth * np.exp(
            -((t - spec.dip_loc) ** 2) / (2.0 * spec.dip_width**2)
        )
        y = base - dip
    else:  # pragma: no cover - guarded by FamilySpec
        raise ValidationError(spec.family)
    return np.clip(y, 0.0, 1.0)


def capability_path(spec: FamilySpec) -> np.ndarray:
    """Latent capability per checkpoint, driving the token distribution.

    The natural branch blends current and final accuracy, so token data
    carries forward-looking signal. The low/partner branches walk the two
    sides of the token-mean fold and are used for matched run pairs.
    """
    t_total = spec.t_checkpoints
    if spec.capability_branch == "natural":
        curve = mean_curve(spec)
        return np.clip(0.5 * curve + 0.5 * curve[-1], 0.0, 1.0)
    low = 0.02 + 0.09 * np.arange(t_total, dtype=np.float64) / (t_total - 1)
    if spec.capability_branch == "low":
        return low
    return np.array([matched_mean_partner(c) for c in low])


def gen_trajectory(
    spec: FamilySpec, seed, run_id: str = "synthetic", task_id: str | None = None
) -> Trajectory:
    """Noisy accuracy trajectory for one run; deterministic per seed."""
    rng = np.random.default_rng(seed)
    noisy = mean_curve(spec) + rng.normal(0.0, spec.noise_std, spec.t_checkpoints)
    return Trajectory(
        run_id=run_id,
        task_id=task_id if task_id is not None else spec.family,
        accuracies=np.clip(noisy, 0.0, 1.0),
        compute_unit_flops=1.0,
    )


# ---------------------------------------------------------------------------
# Corpus generation
# ---------------------------------------------------------------------------


@dataclass
class CorpusInfo:
    out_dir: Path
    train_runs: list[str] = field(default_factory=list)
    heldout_runs: list[str] = field(default_factory=list)
    token_files: int = 0

    def summary(self) -> dict:
        return {
            "train_runs": self.train_runs,
            "heldout_runs": self.heldout_runs,
            "n_token_files": self.token_files,
        }


def _draw_natural_spec(rng, family, t_total, noise_std) -> FamilySpec:
    if family == "saturating":
        return FamilySpec(
            family, chance=rng.uniform(0.2, 0.32), ceiling=rng.uniform(0.55, 0.9),
            rate=rng.uniform(0.5, 1.1), midpoint=rng.uniform(0.45, 0.7) * t_total,
            noise_std=noise_std, t_checkpoints=t_total,
        )
    if family == "plateau":
        return FamilySpec(
            family, chance=rng.uniform(0.2, 0.32), ceiling=rng.uniform(0.38, 0.52),
            rate=rng.uniform(1.2, 2.0), midpoint=rng.uniform(0.15, 0.3) * t_total,
            noise_std=noise_std, t_checkpoints=t_total,
        )
    if family == "inverse":
        return FamilySpec(
            family, chance=rng.uniform(0.1, 0.3), ceiling=rng.uniform(0.55, 0.9),
            rate=rng.uniform(0.5, 1.2), midpoint=rng.uniform(0.3, 0.7) * t_total,
            noise_std=noise_std, t_checkpoints=t_total,
        )
    return FamilySpec(
        "u_shaped", chance=rng.uniform(0.2, 0.3), ceiling=rng.uniform(0.6, 0.85),
        rate=rng.uniform(0.6, 1.2), midpoint=rng.uniform(0.4, 0.6) * t_total,
        dip_depth=rng.uniform(0.1, 0.25), dip_loc=rng.uniform(0.25, 0.5) * t_total,
        dip_width=rng.uniform(1.0, 2.0), noise_std=noise_std, t_checkpoints=t_total,
    )


def _draw_matched_pair(rng, t_total, noise_std) -> tuple[FamilySpec, FamilySpec]:
    """A plateau run and a saturating run with near-identical early curves.

    Their capability paths sit on opposite branches of the token-mean fold,
    so their token means match at every checkpoint while their variances
    and futures diverge.
    """
    chance = rng.uniform(0.22, 0.3)
    plateau = FamilySpec(
        "plateau", chance=chance, ceiling=rng.uniform(0.4, 0.5),
        rate=rng.uniform(1.2, 1.5), midpoint=rng.uniform(0.3, 0.36) * t_total,
        noise_std=noise_std, t_checkpoints=t_total, capability_branch="low",
    )
    saturating = FamilySpec(
        "saturating", chance=chance, ceiling=rng.uniform(0.75, 0.9),
        rate=rng.uniform(0.7, 0.95), midpoint=rng.uniform(0.6, 0.72) * t_total,
        noise_std=noise_std, t_checkpoints=t_total, capability_branch="partner",
    )
    return plateau, saturating


def _write_run(out_dir: Path, run_id: str, spec: FamilySpec, tokens: int,
               run_seed, token_seed_root, position_ranks) -> int:
    traj = gen_trajectory(spec, run_seed, run_id=run_id, task_id=spec.family)
    caps = capability_path(spec)
    probs_dir = out_dir / "probs" / run_id
    probs_dir.mkdir(parents=True, exist_ok=True)
    rel_files = []
    for t in range(1, spec.t_checkpoints + 1):
        rel = f"probs/{run_id}/c{t:03d}.nnsl"
        probs = gen_token_probs(
            caps[t - 1], tokens, np.random.SeedSequence(token_seed_root + [t]),
            position_ranks=position_ranks,
        )
        datapipe.write_token_prob_file(out_dir / rel, probs)
        rel_files.append(rel)
    traj.token_prob_files = rel_files
    datapipe.write_trajectory(traj, out_dir / f"{run_id}.json")
    return spec.t_checkpoints


def gen_corpus(
    out_dir,
    n_runs: int,
    families=FAMILIES,
    tokens: int = 4096,
    seed: int = 0,
    heldout_frac: float = 0.2,
    matched_frac: float = 0.25,
    zero_shot_family: str | None = None,
    t_min: int = 8,
    t_max: int = 12,
    noise_std: float = 0.01,
) -> CorpusInfo:
    """Write a train/heldout corpus of trajectory and token-probability files.

    Runs are split by index with disjoint derived seeds. When both plateau
    and saturating are available, ``matched_frac`` of each split is emitted
    as matched-mean pairs (run ids prefixed ``mm-``). A ``zero_shot_family``
    is withheld from the training split but kept in the heldout split.
    """
    families = tuple(families)
    if not families or any(f not in FAMILIES for f in families):
        raise ValidationError(f"families must be drawn from {FAMILIES}")
    if n_runs < 2:
        raise ValidationError("need at least 2 runs")
    if zero_shot_family is not None and zero_shot_family not in families:
        raise ValidationError(f"zero-shot family {zero_shot_family!r} not in menu")
    out_dir = Path(out_dir)
    info = CorpusInfo(out_dir=out_dir)
    n_heldout = int(round(n_runs * heldout_frac))
    n_heldout = min(max(n_heldout, 1), n_runs - 1)
    split_sizes = {"train": n_runs - n_heldout, "heldout": n_heldout}

    can_match = {"plateau", "saturating"} <= set(families)
    structure_rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    # one shared difficulty rank per token position: every file in the corpus
    # scores "the same validation sample", so positional structure carries
    # across runs instead of being per-file noise
    position_ranks = np.random.default_rng(
        np.random.SeedSequence([seed, 3])
    ).random(tokens)
    gidx = 0
    for split in ("train", "heldout"):
        split_dir = out_dir / split
        split_dir.mkdir(parents=True, exist_ok=True)
        size = split_sizes[split]
        n_pairs = math.floor(size * matched_frac / 2) if can_match else 0
        menu = list(families)
        if split == "train" and zero_shot_family is not None and len(menu) > 1:
            menu = [f for f in menu if f != zero_shot_family]
        queue: list[tuple[FamilySpec, bool]] = []
        for i in range(size):
            if not queue:
                t_total = int(structure_rng.integers(t_min, t_max + 1))
                if i < 2 * n_pairs:
                    pair = _draw_matched_pair(structure_rng, t_total, noise_std)
                    queue = [(pair[0], True), (pair[1], True)]
                else:
                    fam = menu[int(structure_rng.integers(len(menu)))]
                    if split == "heldout" and zero_shot_family and i == size - 1:
                        fam = zero_shot_family
                    queue = [(_draw_natural_spec(structure_rng, fam, t_total, noise_std), False)]
            spec, matched = queue.pop(0)
            prefix = "mm-" if matched else ""
            run_id = f"{prefix}{spec.family}-{gidx:05d}"
            info.token_files += _write_run(
                split_dir, run_id, spec, tokens,
                np.random.SeedSequence([seed, 1, gidx]), [seed, 2, gidx],
                position_ranks,
            )
            getattr(info, f"{split}_runs").append(run_id)
            gidx += 1

    summary = {
        "seed": seed,
        "n_runs": n_runs,
        "families": list(families),
        "tokens": tokens,
        "heldout_frac": heldout_frac,
        "matched_frac": matched_frac,
        "zero_shot_family": zero_shot_family,
        "t_range": [t_min, t_max],
        "noise_std": noise_std,
        **info.summary(),
    }
    tmp = out_dir / "corpus.json.tmp"
    tmp.write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    tmp.replace(out_dir / "corpus.json")
    return info
