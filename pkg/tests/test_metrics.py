import itertools
import math

import numpy as np
import pytest

from stainforge.metrics import (
    BootstrapConfig,
    MetricError,
    PearsonAccumulator,
    auprc,
    bootstrap_ci,
    cellcount_correlation,
    f1_binary,
    pearson_global,
    psnr,
    random_baseline_f1,
    ssim,
)

# ---------------------------------------------------------------- oracles


def auprc_bruteforce(scores, labels):
    """Average precision by explicit threshold sweep over distinct scores."""
    scores = list(map(float, scores))
    labels = list(map(bool, labels))
    n_pos = sum(labels)
    if n_pos == 0:
        return float("nan")
    thresholds = sorted(set(scores), reverse=True)
    ap = 0.0
    prev_recall = 0.0
    for t in thresholds:
        pred = [s >= t for s in scores]
        tp = sum(p and y for p, y in zip(pred, labels))
        precision = tp / sum(pred)
        recall = tp / n_pos
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


def f1_bruteforce(pred, true):
    tp = sum(p and t for p, t in zip(pred, true))
    fp = sum(p and not t for p, t in zip(pred, true))
    fn = sum(t and not p for p, t in zip(pred, true))
    d = 2 * tp + fp + fn
    return 0.0 if d == 0 else 2 * tp / d


def pearson_bruteforce(x, y):
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    xc = x - x.mean()
    yc = y - y.mean()
    den = math.sqrt((xc**2).sum() * (yc**2).sum())
    if den == 0:
        return float("nan")
    return float((xc * yc).sum() / den)


def ssim_bruteforce(x, y, L=255.0, size=11, sigma=1.5):
    """Direct per-window loop with explicit Gaussian weighted moments."""
    ax = np.arange(size, dtype=float) - (size - 1) / 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    w = np.outer(g, g)
    w /= w.sum()
    c1 = (0.01 * L) ** 2
    c2 = (0.03 * L) ** 2
    h, wd = x.shape
    vals = []
    for r in range(h - size + 1):
        for c in range(wd - size + 1):
            px = x[r : r + size, c : c + size]
            py = y[r : r + size, c : c + size]
            mx = (w * px).sum()
            my = (w * py).sum()
            vxx = (w * px * px).sum() - mx**2
            vyy = (w * py * py).sum() - my**2
            vxy = (w * px * py).sum() - mx * my
            vals.append(
                ((2 * mx * my + c1) * (2 * vxy + c2))
                / ((mx**2 + my**2 + c1) * (vxx + vyy + c2))
            )
    return float(np.mean(vals))


# ---------------------------------------------------------------- PSNR


class TestPsnr:
    def test_identical_is_inf(self):
        x = np.random.default_rng(0).uniform(0, 255, (8, 8))
        assert psnr(x, x) == float("inf")

    def test_known_value(self):
        # constant offset of 1: MSE = 1, PSNR = 20 log10(255) = 48.1308 dB
        x = np.zeros((8, 8))
        assert psnr(x + 1.0, x) == pytest.approx(20 * math.log10(255.0), abs=1e-9)
        assert psnr(x + 1.0, x) == pytest.approx(48.1308, abs=1e-3)

    def test_matches_definition_random(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            a = rng.uniform(0, 255, (6, 6))
            b = rng.uniform(0, 255, (6, 6))
            mse = np.mean((a - b) ** 2)
            assert psnr(a, b) == pytest.approx(10 * math.log10(255**2 / mse), rel=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(MetricError):
            psnr(np.zeros((2, 2)), np.zeros((3, 3)))


# ---------------------------------------------------------------- SSIM


class TestSsim:
    def test_identical_is_one(self):
        x = np.random.default_rng(2).uniform(0, 255, (16, 16))
        assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)

    def test_constant_shift_closed_form(self):
        # flat images differing by a constant: variances vanish and
        # SSIM = (2 mx my + C1) / (mx^2 + my^2 + C1)
        mx, my = 100.0, 140.0
        x = np.full((16, 16), mx)
        y = np.full((16, 16), my)
        c1 = (0.01 * 255) ** 2
        expected = (2 * mx * my + c1) / (mx**2 + my**2 + c1)
        assert ssim(x, y) == pytest.approx(expected, abs=1e-9)

    def test_independent_noise_low(self):
        rng = np.random.default_rng(3)
        x = rng.uniform(0, 255, (64, 64))
        y = rng.uniform(0, 255, (64, 64))
        assert abs(ssim(x, y)) < 0.1

    def test_matches_bruteforce(self):
        rng = np.random.default_rng(4)
        for _ in range(5):
            x = rng.uniform(0, 255, (15, 18))
            y = np.clip(x + rng.normal(0, 20, x.shape), 0, 255)
            assert ssim(x, y) == pytest.approx(ssim_bruteforce(x, y), abs=1e-6)

    def test_too_small(self):
        with pytest.raises(MetricError):
            ssim(np.zeros((8, 8)), np.zeros((8, 8)))


# ---------------------------------------------------------------- Pearson


class TestPearson:
    def test_perfect_and_anti(self):
        x = np.arange(10.0)
        assert pearson_global([x], [2 * x + 3]) == pytest.approx(1.0)
        assert pearson_global([x], [-x]) == pytest.approx(-1.0)

    def test_zero_variance_nan(self):
        assert math.isnan(pearson_global([np.ones(10)], [np.arange(10.0)]))

    def test_single_sample_nan(self):
        acc = PearsonAccumulator()
        acc.update(np.array([1.0]), np.array([2.0]))
        assert math.isnan(acc.result())

    def test_chunked_equals_concatenated(self):
        """Streaming over chunks must equal one-shot over the concatenation."""
        rng = np.random.default_rng(5)
        xs = [rng.uniform(0, 1, rng.integers(2, 50)) for _ in range(8)]
        ys = [x * 2 + rng.normal(0, 0.1, x.size) for x in xs]
        streamed = pearson_global(xs, ys)
        oneshot = pearson_bruteforce(np.concatenate(xs), np.concatenate(ys))
        assert streamed == pytest.approx(oneshot, rel=1e-10)

    def test_merge_equals_sequential(self):
        rng = np.random.default_rng(6)
        x1, y1 = rng.uniform(0, 1, 30), rng.uniform(0, 1, 30)
        x2, y2 = rng.uniform(0, 1, 40), rng.uniform(0, 1, 40)
        a = PearsonAccumulator()
        a.update(x1, y1)
        b = PearsonAccumulator()
        b.update(x2, y2)
        seq = PearsonAccumulator()
        seq.update(x1, y1)
        seq.update(x2, y2)
        assert a.merge(b).result() == pytest.approx(seq.result(), rel=1e-12)

    def test_not_mean_of_per_chunk(self):
        # global Pearson is over all pixels pooled, not a chunk average
        x1 = np.array([0.0, 1.0, 2.0])
        y1 = np.array([0.0, 1.0, 2.0])
        x2 = np.array([10.0, 11.0, 12.0])
        y2 = np.array([0.0, -1.0, -2.0])
        pooled = pearson_global([x1, x2], [y1, y2])
        per_chunk_mean = (pearson_bruteforce(x1, y1) + pearson_bruteforce(x2, y2)) / 2
        assert abs(pooled - per_chunk_mean) > 0.1


# ---------------------------------------------------------------- AUPRC / F1


class TestAuprc:
    def test_worked_example(self):
        # scores (0.9, 0.8, 0.7, 0.6), labels (1, 0, 1, 0):
        # steps at recall 0.5 (P=1) and 1.0 (P=2/3) -> 0.8333...
        got = auprc([0.9, 0.8, 0.7, 0.6], [True, False, True, False])
        assert got == pytest.approx(0.5 * 1.0 + 0.5 * (2.0 / 3.0), rel=1e-12)

    def test_perfect_ranking(self):
        assert auprc([0.9, 0.8, 0.2, 0.1], [True, True, False, False]) == pytest.approx(1.0)

    def test_no_positives_nan(self):
        assert math.isnan(auprc([0.5, 0.4], [False, False]))

    def test_all_tied_equals_prevalence(self):
        labels = [True, False, False, True, False]
        assert auprc([0.5] * 5, labels) == pytest.approx(2 / 5)

    def test_matches_bruteforce_random(self):
        """100 random instances of length <= 16, including heavy ties."""
        rng = np.random.default_rng(7)
        for i in range(100):
            n = int(rng.integers(2, 17))
            scores = rng.choice([0.1, 0.3, 0.3, 0.5, 0.7, 0.9], size=n)
            labels = rng.random(n) < 0.5
            if not labels.any():
                labels[0] = True
            assert auprc(scores, labels) == pytest.approx(
                auprc_bruteforce(scores, labels), abs=1e-9
            ), f"instance {i}"


class TestF1:
    def test_worked_example(self):
        # pred (1,1,0,0), true (1,0,1,0): TP=1 FP=1 FN=1 -> 2/(2+1+1) = 0.5
        assert f1_binary([1, 1, 0, 0], [1, 0, 1, 0]) == pytest.approx(0.5)
        # pred (1,1,0), true (1,1,1): TP=2 FN=1 -> 4/5
        assert f1_binary([1, 1, 0], [1, 1, 1]) == pytest.approx(0.8)

    def test_all_negative_zero(self):
        assert f1_binary([0, 0], [0, 0]) == 0.0

    def test_matches_bruteforce_random(self):
        rng = np.random.default_rng(8)
        for i in range(100):
            n = int(rng.integers(1, 17))
            p = rng.random(n) < 0.5
            t = rng.random(n) < 0.5
            assert f1_binary(p, t) == pytest.approx(f1_bruteforce(p, t), abs=1e-12)

    def test_exhaustive_small(self):
        for n in (1, 2, 3):
            for p in itertools.product([0, 1], repeat=n):
                for t in itertools.product([0, 1], repeat=n):
                    assert f1_binary(list(p), list(t)) == pytest.approx(
                        f1_bruteforce(p, t), abs=1e-12
                    )


# ---------------------------------------------------------------- bootstrap


class TestBootstrap:
    def test_bit_reproducible(self):
        rng = np.random.default_rng(9)
        tile_vals = rng.uniform(0, 1, 12)

        def metric(idx):
            return float(np.mean(tile_vals[idx]))

        a = bootstrap_ci(metric, 12, BootstrapConfig(seed=42))
        b = bootstrap_ci(metric, 12, BootstrapConfig(seed=42))
        assert (a.low, a.high) == (b.low, b.high)
        c = bootstrap_ci(metric, 12, BootstrapConfig(seed=43))
        assert (a.low, a.high) != (c.low, c.high)

    def test_resamples_within_exhaustive_support(self):
        # 3 tiles: every possible resample mean is enumerable; the CI
        # endpoints must lie inside [min, max] of that support
        tile_vals = np.array([1.0, 5.0, 9.0])

        def metric(idx):
            return float(np.mean(tile_vals[idx]))

        support = [
            np.mean([tile_vals[i], tile_vals[j], tile_vals[k]])
            for i in range(3)
            for j in range(3)
            for k in range(3)
        ]
        res = bootstrap_ci(metric, 3, BootstrapConfig(n_samples=200, seed=0))
        assert min(support) <= res.low <= res.high <= max(support)
        assert res.n_used == 200

    def test_constant_metric_degenerate_ci(self):
        res = bootstrap_ci(lambda idx: 0.7, 5, BootstrapConfig(n_samples=50, seed=1))
        assert res.low == res.high == 0.7

    def test_nan_resamples_skipped(self):
        calls = {"n": 0}

        def metric(idx):
            calls["n"] += 1
            return float("nan") if calls["n"] % 2 == 0 else 0.5

        res = bootstrap_ci(metric, 4, BootstrapConfig(n_samples=10, seed=2))
        assert res.n_skipped == 5
        assert res.n_used == 5

    def test_ci_contains_point_estimate(self):
        rng = np.random.default_rng(10)
        tile_vals = rng.uniform(0, 1, 50)

        def metric(idx):
            return float(np.mean(tile_vals[idx]))

        point = float(np.mean(tile_vals))
        res = bootstrap_ci(metric, 50, BootstrapConfig(n_samples=1000, seed=3))
        assert res.low <= point <= res.high

    def test_too_few_tiles(self):
        with pytest.raises(MetricError):
            bootstrap_ci(lambda idx: 0.0, 1)


# ---------------------------------------------------------------- baselines


class TestRandomBaseline:
    def test_tracks_prevalence(self):
        """With matched prevalence, expected random F1 is close to the
        prevalence itself for large n."""
        rng = np.random.default_rng(12)
        for p in (0.05, 0.3, 0.7):
            true = rng.random(10000) < p
            f1 = random_baseline_f1(true, p, runs=100, seed=0)
            assert abs(f1 - p) < 0.02, f"prevalence {p}: {f1}"

    def test_deterministic(self):
        true = np.random.default_rng(13).random(100) < 0.4
        assert random_baseline_f1(true, 0.4, seed=5) == random_baseline_f1(true, 0.4, seed=5)

    def test_prevalence_validation(self):
        with pytest.raises(MetricError):
            random_baseline_f1([True], 1.5)


class TestCountCorrelation:
    def test_perfect_line(self):
        ref = [1.0, 2.0, 3.0, 4.0]
        pred = [3.0, 5.0, 7.0, 9.0]  # 2x + 1
        r, slope, intercept = cellcount_correlation(pred, ref)
        assert r == pytest.approx(1.0)
        assert slope == pytest.approx(2.0)
        assert intercept == pytest.approx(1.0)

    def test_matches_polyfit(self):
        rng = np.random.default_rng(14)
        ref = rng.uniform(0, 50, 20)
        pred = 1.3 * ref + rng.normal(0, 2, 20)
        r, slope, intercept = cellcount_correlation(pred, ref)
        m, c = np.polyfit(ref, pred, 1)
        assert slope == pytest.approx(m, rel=1e-9)
        assert intercept == pytest.approx(c, rel=1e-6)
        assert r == pytest.approx(pearson_bruteforce(ref, pred), rel=1e-12)

    def test_zero_variance(self):
        r, slope, intercept = cellcount_correlation([1.0, 2.0], [3.0, 3.0])
        assert math.isnan(r) and math.isnan(slope)
