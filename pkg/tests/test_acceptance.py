"""Acceptance gate: every release criterion, one pass/fail line each.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the lines as they
print. The end-to-end benchmark (criteria 7-9) trains three desk-scale
models on a 2,000-run synthetic corpus; set TRAJCAST_BENCH_DIR to keep and
reuse its artifacts across invocations.
"""

import itertools
import math
import os
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from gradcheck import check_gradients

from trajcast import datapipe as dp
from trajcast import encoders as enc
from trajcast import evalharness as ev
from trajcast import forecaster as fc
from trajcast import logfit
from trajcast import ndgrad
from trajcast import cli
from trajcast.ndgrad import Tensor

SCRIPTS = Path(__file__).resolve().parent.parent / "scripts"
if str(SCRIPTS) not in sys.path:
    sys.path.insert(0, str(SCRIPTS))

from run_desk_benchmark import run_benchmark  # noqa: E402


def check(cid: str, condition: bool, detail: str) -> None:
    print(f"ACCEPTANCE {cid}: {'PASS' if condition else 'FAIL'} ({detail})")
    assert condition, f"criterion {cid}: {detail}"


# ---------------------------------------------------------------------------
# 1. Gradient oracle
# ---------------------------------------------------------------------------


class TestCriterion1Gradients:
    """Every differentiable kernel vs central finite differences, 10 seeds."""

    SEEDS = range(10)

    def test_gradient_oracle_all_kernels(self):
        t_start = time.time()
        worst: dict[str, float] = {}

        def track(name, err):
            worst[name] = max(worst.get(name, 0.0), err)

        for seed in self.SEEDS:
            rng = np.random.default_rng(seed)

            x = rng.standard_normal((2, 2, 14))
            w = rng.standard_normal((3, 2, 5))
            b = rng.standard_normal(3)
            probe = rng.standard_normal((2, 3, 6))
            track("conv1d", check_gradients(
                lambda p: ndgrad.tensor_sum(ndgrad.mul(
                    ndgrad.conv1d(p[0], p[1], p[2], stride=2, padding=1), probe)),
                [x, w, b]))

            xg = rng.standard_normal(15) * 2
            pg = rng.standard_normal(15)
            track("gelu", check_gradients(
                lambda p: ndgrad.tensor_sum(ndgrad.mul(ndgrad.gelu(p[0]), pg)), [xg]))

            xn = rng.standard_normal((2, 4, 6))
            gn_probe = rng.standard_normal((2, 4, 6))
            track("group_norm", check_gradients(
                lambda p: ndgrad.tensor_sum(ndgrad.mul(
                    ndgrad.group_norm(p[0], p[1], p[2], groups=2), gn_probe)),
                [xn, rng.standard_normal(4), rng.standard_normal(4)]))

            xl = rng.standard_normal((3, 8))
            ln_probe = rng.standard_normal((3, 8))
            track("layer_norm", check_gradients(
                lambda p: ndgrad.tensor_sum(ndgrad.mul(
                    ndgrad.layer_norm(p[0], p[1], p[2]), ln_probe)),
                [xl, rng.standard_normal(8), rng.standard_normal(8)]))

            xr = rng.standard_normal((2, 4, 6))
            rp = rng.standard_normal((2, 4, 6))
            track("rope", check_gradients(
                lambda p: ndgrad.tensor_sum(ndgrad.mul(
                    ndgrad.rope_apply(p[0], np.arange(4)), rp)), [xr]))

            d, ffn = 4, 6
            keys = sorted(_attn_params(rng, d, ffn))
            raw = _attn_params(rng, d, ffn)
            xa = rng.standard_normal((1, 3, d))
            pa = rng.standard_normal((1, 3, d))
            track("attention_block", check_gradients(
                lambda p: ndgrad.tensor_sum(ndgrad.mul(ndgrad.attention_block(
                    p[0], dict(zip(keys, p[1:])), heads=2), pa)),
                [xa] + [raw[k] for k in keys]))

            emb_probe = rng.standard_normal(8)
            wy, by = rng.standard_normal(4), rng.standard_normal(4)
            wg, bg = rng.standard_normal(4), rng.standard_normal(4)
            track("context_embed", check_gradients(
                lambda p: ndgrad.tensor_sum(ndgrad.mul(ndgrad.concat([
                    ndgrad.add(ndgrad.mul(p[4], p[0]), p[1]),
                    ndgrad.add(ndgrad.mul(p[5], p[2]), p[3]),
                ], axis=-1), emb_probe)),
                [wy, by, wg, bg, np.array(rng.uniform(0.1, 0.9)),
                 np.array(rng.uniform(0.5, 2.5))]))

            track("cnn_encoder", self._cnn_encoder_err(seed))
            track("average_encoder", self._average_encoder_err(seed))
            track("histdiff_encoder", self._histdiff_encoder_err(seed))
            track("pinball_of_forward", self._end_to_end_err(seed))

        elapsed = time.time() - t_start
        worst_overall = max(worst.values())
        kernel_worst = max(v for k, v in worst.items() if k != "pinball_of_forward")
        check(
            "1",
            kernel_worst <= 1e-4 and worst["pinball_of_forward"] <= 1e-3
            and elapsed < 120,
            f"kernel rel err {kernel_worst:.2e} <= 1e-4, end-to-end "
            f"{worst['pinball_of_forward']:.2e} <= 1e-3, 10 seeds, {elapsed:.0f}s < 120s",
        )

    def _cnn_encoder_err(self, seed):
        rng = np.random.default_rng(seed)
        cfg = enc.EncoderConfig(kind="cnn", input_len=16, channels=(2, 4),
                                kernel_size=8, stride=4, padding=4, hidden_dim=4)
        params = enc.init_encoder_params(cfg, rng)
        names = sorted(params)
        arrays = [rng.standard_normal(params[n].shape) * 0.3 for n in names]
        probs = rng.uniform(size=16)
        probe = rng.standard_normal(4)
        return check_gradients(
            lambda p: ndgrad.tensor_sum(ndgrad.mul(
                enc.cnn_encode(probs, dict(zip(names, p)), cfg), probe)),
            arrays)

    def _average_encoder_err(self, seed):
        rng = np.random.default_rng(seed)
        v = rng.uniform(size=5)
        probe = rng.standard_normal(4)
        return check_gradients(
            lambda p: ndgrad.tensor_sum(ndgrad.mul(enc.average_encode(
                v, {"enc.lin.w": p[0], "enc.lin.b": p[1]}), probe)),
            [rng.standard_normal(4), rng.standard_normal(4)])

    def _histdiff_encoder_err(self, seed):
        rng = np.random.default_rng(seed)
        cfg = enc.EncoderConfig(kind="histdiff", bin_count=6, hidden_dim=4)
        params = enc.init_encoder_params(cfg, rng)
        names = sorted(params)
        arrays = [rng.standard_normal(params[n].shape) * 0.4 for n in names]
        delta = rng.standard_normal(6) * 0.2
        delta -= delta.mean()
        probe = rng.standard_normal(4)
        return check_gradients(
            lambda p: ndgrad.tensor_sum(ndgrad.mul(
                enc.histdiff_encode(delta, dict(zip(names, p))), probe)),
            arrays)

    def _end_to_end_err(self, seed):
        # desk-scale check: hidden 16, one layer, loss of the full forward
        cfg = fc.ModelConfig(
            variant="neuneu", hidden_dim=16, layers=1, heads=2, ffn_dim=16,
            encoder=enc.EncoderConfig(kind="cnn", input_len=16, channels=(2, 4),
                                      kernel_size=8, stride=4, padding=4,
                                      hidden_dim=16),
        )
        model = fc.Forecaster.init(cfg, seed)
        rng = np.random.default_rng(seed + 500)
        names = sorted(model.params)
        arrays = [
            model.params[n].data + rng.standard_normal(model.params[n].shape) * 0.05
            for n in names
        ]
        probs = rng.uniform(size=16)
        ys = np.array([[0.3, 0.5]])
        gaps = np.array([[1.0, 3.0]])
        target = np.array([rng.uniform(0.2, 0.8)])

        def build(p):
            m = fc.Forecaster(cfg, dict(zip(names, p)))
            raw = m.forward_batch(ys, gaps, probs[None, :])
            return ndgrad.tensor_sum(fc.pinball_loss(raw, target, cfg.quantiles))

        return check_gradients(build, arrays, tol=1e-3)


def _attn_params(rng, d, ffn):
    return {
        "ln1_gain": np.ones(d), "ln1_shift": np.zeros(d),
        "wq": rng.standard_normal((d, d)) * 0.4,
        "bq": rng.standard_normal(d) * 0.4,
        "wk": rng.standard_normal((d, d)) * 0.4,
        "bk": rng.standard_normal(d) * 0.4,
        "wv": rng.standard_normal((d, d)) * 0.4,
        "bv": rng.standard_normal(d) * 0.4,
        "wo": rng.standard_normal((d, d)) * 0.4,
        "bo": rng.standard_normal(d) * 0.4,
        "ln2_gain": np.ones(d), "ln2_shift": np.zeros(d),
        "ffn_w1": rng.standard_normal((d, ffn)) * 0.4,
        "ffn_b1": rng.standard_normal(ffn) * 0.4,
        "ffn_w2": rng.standard_normal((ffn, d)) * 0.4,
        "ffn_b2": rng.standard_normal(d) * 0.4,
    }


# ---------------------------------------------------------------------------
# 2. Shape oracle
# ---------------------------------------------------------------------------


class TestCriterion2Shapes:
    def test_conv_stack_lengths(self):
        def chain(n):
            lengths = [n]
            for _ in range(4):
                lengths.append((lengths[-1] + 2 * 32 - 64) // 16 + 1)
            return lengths[1:]

        full = enc.EncoderConfig(kind="cnn", input_len=256000, hidden_dim=512)
        desk = enc.EncoderConfig(kind="cnn", input_len=4096, hidden_dim=64)
        ok = (
            full.conv_lengths() == chain(256000) == [16001, 1001, 63, 4]
            and full.flatten_dim() == 256
            and desk.conv_lengths() == chain(4096) == [257, 17, 2, 1]
            and desk.flatten_dim() == 64
        )
        check("2", ok, "256000 -> 16001/1001/63/4 flatten 256; "
                       "4096 -> 257/17/2/1 flatten 64")


# ---------------------------------------------------------------------------
# 3. Pinball oracle
# ---------------------------------------------------------------------------


class TestCriterion3Pinball:
    def test_pinball_matches_term_by_term_oracle(self):
        def oracle(raw, a, taus):
            total = 0.0
            for q, t in zip(raw, taus):
                total += t * (a - q) if a >= q else (1 - t) * (q - a)
            return total

        taus = fc.DEFAULT_QUANTILES
        rng = np.random.default_rng(123)
        raw = rng.uniform(-0.5, 1.5, size=(10_000, 5))
        a = rng.uniform(0, 1, size=10_000)
        ours = fc.pinball_loss(raw, a).data
        ref = np.array([oracle(r, t, taus) for r, t in zip(raw, a)])
        max_gap = float(np.abs(ours - ref).max())
        worked = float(
            fc.pinball_loss(np.array([0.4, 0.45, 0.5, 0.55, 0.6]), 0.5).data
        )
        check(
            "3",
            max_gap <= 1e-12 and abs(worked - 0.045) <= 1e-12,
            f"max |impl - oracle| {max_gap:.1e} over 1e4 draws; worked example "
            f"{worked:.3f} == 0.045",
        )


# ---------------------------------------------------------------------------
# 4. Logistic recovery
# ---------------------------------------------------------------------------


class TestCriterion4Logistic:
    def test_planted_recovery_and_jacobian(self):
        t0 = time.time()
        x = np.linspace(1.8, 4.2, 50)
        truth = logfit.LogisticParams(0.55, -4.0, 3.0, 0.25)
        y = logfit.logistic_predict(truth, x)
        grid = np.linspace(x.min(), x.max(), 200)

        clean = logfit.fit_logistic(zip(x, y))
        clean_err = float(np.abs(
            logfit.logistic_predict(clean, grid) - logfit.logistic_predict(truth, grid)
        ).max())

        rng = np.random.default_rng(7)
        noisy = logfit.fit_logistic(zip(x, y + rng.normal(0, 0.01, x.size)))
        noisy_mae = float(np.abs(
            logfit.logistic_predict(noisy, grid) - logfit.logistic_predict(truth, grid)
        ).mean())

        jac_err = 0.0
        for seed in range(10):
            r = np.random.default_rng(seed)
            theta = np.array([r.uniform(0.2, 1.0), r.uniform(-5, 5),
                              r.uniform(1, 4), r.uniform(0, 0.4)])
            xs = r.uniform(0.5, 5.0, 12)
            jac = logfit.logistic_jacobian(theta, xs)
            h = 1e-6
            for j in range(4):
                up, down = theta.copy(), theta.copy()
                up[j] += h
                down[j] -= h
                fd = (logfit.logistic_predict(logfit.LogisticParams(*up), xs)
                      - logfit.logistic_predict(logfit.LogisticParams(*down), xs)) / (2 * h)
                scale = max(1.0, float(np.abs(fd).max()))
                jac_err = max(jac_err, float(np.abs(jac[:, j] - fd).max()) / scale)

        elapsed = time.time() - t0
        check(
            "4",
            clean_err <= 1e-6 and noisy_mae <= 0.015 and jac_err <= 1e-6
            and elapsed < 10,
            f"noiseless max err {clean_err:.1e} <= 1e-6; noisy mae {noisy_mae:.4f} "
            f"<= 0.015; jacobian err {jac_err:.1e} <= 1e-6; {elapsed:.1f}s < 10s",
        )


# ---------------------------------------------------------------------------
# 5. Augmentation invariants
# ---------------------------------------------------------------------------


class _LeakStore(dp.TokenLossStore):
    def __init__(self, table):
        super().__init__()
        self.table = table
        self.reads = []

    def probs(self, traj, checkpoint):
        self.reads.append(checkpoint)
        return self.table[checkpoint]


class TestCriterion5Augmentation:
    def test_drop_invariants_and_leakage(self):
        base = dp.impute_unit_gaps(np.random.default_rng(0).uniform(size=12))
        total = base.gaps().sum()
        ok = True
        for seed in range(1000):
            out = dp.drop_with_absorption(base, 0.4, np.random.default_rng(seed))
            ok &= out.gaps().sum() == total
            # the first accuracy always survives; its gap may absorb drops
            ok &= out.pairs[0][0] == base.pairs[0][0]
        identity = dp.drop_with_absorption(
            base, 0.0, np.random.default_rng(1)
        ).pairs == base.pairs

        traj = dp.Trajectory(
            run_id="leak", task_id="t",
            accuracies=np.linspace(0.2, 0.8, 8),
        )
        rng = np.random.default_rng(3)
        table = {t: rng.uniform(0, 1, 32).astype(np.float32) for t in range(1, 9)}
        leaks_clean = True
        for kind in ("neuneu", "average", "noloss"):
            store = _LeakStore(table)
            seq = dp.impute_unit_gaps(traj.accuracies[:4])
            dp.make_training_examples(seq, traj, kind, store, bins=8)
            leaks_clean &= all(t <= 4 for t in store.reads)
        store = _LeakStore(table)
        dp.make_training_examples(
            dp.impute_unit_gaps(traj.accuracies[:4]), traj, "histdiff", store, bins=8
        )
        future_ok = set(store.reads) == {4, 5, 6, 7, 8}

        check(
            "5",
            ok and identity and leaks_clean and future_ok,
            "1000 seeds: gap sums conserved, first element kept, p=0 identity; "
            "no future reads for neuneu/average/noloss; histdiff reads exactly "
            "context end + targets",
        )


# ---------------------------------------------------------------------------
# 6. Histogram invariants
# ---------------------------------------------------------------------------


class TestCriterion6Histograms:
    def test_normalization_and_boundary(self):
        rng = np.random.default_rng(5)
        ok = True
        for _ in range(200):
            p = rng.uniform(0, 1, 64)
            h = dp.histogram(p, 16)
            ok &= abs(h.sum() - 1.0) <= 1e-12
            q = rng.uniform(0, 1, 64)
            delta = dp.hist_diff(dp.histogram(q, 16), h)
            ok &= abs(delta.delta.sum()) <= 1e-12
        boundary = dp.histogram(np.array([0.0]), 8)
        check(
            "6",
            ok and boundary[0] == 1.0,
            "sum(h)=1 +/- 1e-12, sum(dh)=0 +/- 1e-12 over 200 draws; p=0 in bin 1",
        )


# ---------------------------------------------------------------------------
# 7-9. Desk benchmark: training quality, calibration, ranking
# ---------------------------------------------------------------------------


@pytest.fixture(scope="session")
def benchmark(tmp_path_factory):
    workdir = os.environ.get("TRAJCAST_BENCH_DIR")
    if workdir is None:
        workdir = tmp_path_factory.mktemp("benchmark")
    return run_benchmark(workdir, runs=2000, tokens=4096, masks=6)


class TestCriterion7Benchmark:
    def test_neural_beats_logistic_and_averaging(self, benchmark):
        m = benchmark["models"]
        nn, lg, av = m["neuneu"], m["logistic"], m["average"]
        ok_overall = nn["mae"] < lg["mae"]
        ok_inverse = nn["mae_inverse"] <= 0.8 * lg["mae_inverse"]
        ok_matched = nn["mae_matched"] < av["mae_matched"]
        ok_budget = benchmark["total_seconds"] <= 45 * 60
        check(
            "7a", ok_overall,
            f"neuneu mae {nn['mae']:.4f} < logistic {lg['mae']:.4f}",
        )
        check(
            "7b", ok_inverse,
            f"inverse-family neuneu {nn['mae_inverse']:.4f} <= "
            f"0.8 x logistic {lg['mae_inverse']:.4f}",
        )
        check(
            "7c", ok_matched,
            f"matched-mean slice neuneu {nn['mae_matched']:.4f} < "
            f"average {av['mae_matched']:.4f}",
        )
        check(
            "7", ok_budget,
            f"benchmark wall time {benchmark['total_seconds']:.0f}s <= 2700s",
        )
        sweep = benchmark["sweep"]
        if sweep["0.5"] > sweep["0.1"]:
            import warnings

            warnings.warn(
                "context sweep not monotone: "
                f"mae(0.5)={sweep['0.5']:.4f} > mae(0.1)={sweep['0.1']:.4f}"
            )


class TestCriterion8Calibration:
    def test_coverage_band_and_brute_force_equality(self, benchmark):
        cov = benchmark["models"]["neuneu"]["coverage"]
        rng = np.random.default_rng(2)
        lo = rng.uniform(0, 0.5, 500)
        hi = lo + rng.uniform(0, 0.5, 500)
        y = rng.uniform(0, 1, 500)
        brute = sum(1 for a, b, t in zip(lo, hi, y) if a <= t <= b) / 500
        impl = ev.calibration_coverage(np.stack([lo, hi], 1), y)
        check(
            "8",
            0.60 <= cov <= 0.95 and impl == brute,
            f"heldout coverage {cov:.3f} in [0.60, 0.95]; counter matches "
            f"brute force exactly",
        )


class TestCriterion9Ranking:
    def test_oracle_equality_and_model_ordering(self, benchmark):
        rng = np.random.default_rng(17)
        preds, truths = {}, {}
        for c in range(8):
            for t in range(4):
                key = (f"c{c}", f"t{t}")
                preds[key] = float(rng.uniform())
                truths[key] = float(rng.uniform())
        acc, pairs = ev.ranking_accuracy(preds, truths)
        keys = sorted(preds)
        scores = []
        for ka, kb in itertools.combinations(keys, 2):
            if ka[1] != kb[1] or ka[0] == kb[0]:
                continue
            if abs(truths[ka] - truths[kb]) < 1e-12:
                continue
            if abs(preds[ka] - preds[kb]) < 1e-12:
                scores.append(0.5)
            else:
                scores.append(
                    1.0 if (preds[ka] > preds[kb]) == (truths[ka] > truths[kb])
                    else 0.0
                )
        brute = float(np.mean(scores))
        nn = benchmark["models"]["neuneu"]["ranking"]
        lg = benchmark["models"]["logistic"]["ranking"]
        check(
            "9",
            acc == brute and len(pairs) == len(scores) and nn >= lg,
            f"harness == brute force ({acc:.4f}, {len(pairs)} pairs); "
            f"neuneu ranking {nn:.3f} >= logistic {lg:.3f}",
        )


# ---------------------------------------------------------------------------
# 10. Determinism of the full pipeline
# ---------------------------------------------------------------------------


class TestCriterion10Determinism:
    def test_repeated_pipeline_is_byte_identical(self, tmp_path):
        def pipeline(root: Path):
            corpus = root / "corpus"
            assert cli.main([
                "synth", "--out", str(corpus), "--runs", "8", "--tokens", "64",
                "--seed", "5", "--t-min", "5", "--t-max", "7",
            ]) == 0
            manifest = root / "data.jsonl"
            assert cli.main([
                "build-data", "--trajs", str(corpus / "train"),
                "--variant", "noloss", "--drop-p", "0.4", "--masks", "2",
                "--seed", "3", "--out", str(manifest),
            ]) == 0
            config = root / "config.json"
            config.write_text(
                __import__("json").dumps(
                    fc.ModelConfig.desk("noloss", epochs=2, batch_size=64).to_dict()
                )
            )
            ckpt = root / "model.ckpt"
            assert cli.main([
                "train", "--manifest", str(manifest), "--config", str(config),
                "--seed", "2", "--out", str(ckpt),
            ]) == 0
            assert cli.main([
                "evaluate", "--ckpt", str(ckpt), "--trajs", str(corpus / "heldout"),
                "--frac", "0.25", "--report", str(root / "report.json"),
                "--csv", str(root / "records.csv"),
            ]) == 0

        a, b = tmp_path / "a", tmp_path / "b"
        pipeline(a)
        pipeline(b)
        a_files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
        b_files = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
        same_tree = a_files == b_files
        diffs = [
            str(rel) for rel in a_files
            if (a / rel).read_bytes() != (b / rel).read_bytes()
        ]
        check(
            "10",
            same_tree and not diffs,
            f"{len(a_files)} files byte-identical across repeated "
            f"synth/build-data/train/evaluate" + (f"; differs: {diffs}" if diffs else ""),
        )
