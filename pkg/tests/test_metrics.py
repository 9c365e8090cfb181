import math

import numpy as np
import pytest

from selcal.metrics import (
    Band,
    DEFAULT_SNR_BANDS,
    ScoredToken,
    confidence_accuracy_heatmap,
    ece,
    eer,
    nce,
    nll,
    overconfidence_mass,
    reliability_bins,
    snr_stratified_report,
)
from selcal.records import ValidationError


# ---------------------------------------------------------------------------
# Naive reference implementations: plain double loops, no vectorization, no
# shared helpers with the library. These are the oracles.
# ---------------------------------------------------------------------------

def naive_ece(tokens, m=10):
    n = len(tokens)
    total = 0.0
    for b in range(1, m + 1):
        lo, hi = (b - 1) / m, b / m
        members = [t for t in tokens
                   if (lo <= t.confidence < hi) or (b == m and t.confidence == 1.0)]
        if not members:
            continue
        conf = sum(t.confidence for t in members) / len(members)
        acc = sum(t.y for t in members) / len(members)
        total += len(members) / n * abs(acc - conf)
    return total


def naive_nce(tokens):
    n_correct = sum(t.y for t in tokens)
    n = len(tokens)
    p = n_correct / n
    h_base = -n_correct * math.log(p) - (n - n_correct) * math.log(1 - p)
    h_cond = 0.0
    for t in tokens:
        c = min(max(t.confidence, 1e-7), 1 - 1e-7)
        h_cond -= t.y * math.log(c) + (1 - t.y) * math.log(1 - c)
    return (h_base - h_cond) / h_base


def naive_nll(tokens):
    h = 0.0
    for t in tokens:
        c = min(max(t.confidence, 1e-7), 1 - 1e-7)
        h -= t.y * math.log(c) + (1 - t.y) * math.log(1 - c)
    return h / len(tokens)


def naive_eer(tokens):
    confs = sorted({t.confidence for t in tokens})
    thresholds = [0.0] + [(a + b) / 2 for a, b in zip(confs, confs[1:])] + [1.0]
    n_correct = sum(t.y for t in tokens)
    n_incorrect = len(tokens) - n_correct
    best = None
    for t in thresholds:
        far = sum(1 for tok in tokens if tok.y == 0 and tok.confidence >= t) / n_incorrect
        frr = sum(1 for tok in tokens if tok.y == 1 and tok.confidence < t) / n_correct
        key = (abs(far - frr), (far + frr) / 2)
        if best is None or key < best:
            best = key
    return best[1]


def naive_mass(tokens, threshold=0.7):
    return sum(1 for t in tokens if t.y == 0 and t.confidence >= threshold) / len(tokens)


def random_tokens(rng, n, with_snr=False):
    out = []
    for _ in range(n):
        c = float(rng.uniform(0.001, 1.0))
        y = int(rng.random() < rng.uniform(0, 1))
        snr = float(rng.uniform(-18, 10)) if with_snr else None
        out.append(ScoredToken(c, y, snr))
    return out


class TestHandValues:
    def test_ece_single_bin_matching(self):
        tokens = [ScoredToken(0.75, 1)] * 3 + [ScoredToken(0.75, 0)]
        assert ece(tokens) == pytest.approx(0.0, abs=1e-12)

    def test_ece_worked_example(self):
        tokens = [ScoredToken(0.95, 1), ScoredToken(0.95, 0),
                  ScoredToken(0.55, 1), ScoredToken(0.15, 0)]
        # per-bin arithmetic: 0.5*0.45 + 0.25*0.45 + 0.25*0.15
        assert ece(tokens) == pytest.approx(0.375, abs=1e-12)

    def test_nce_uninformative_confidence_is_zero(self):
        tokens = [ScoredToken(0.5, 1), ScoredToken(0.5, 0)]
        assert nce(tokens) == pytest.approx(0.0, abs=1e-12)

    def test_nce_worked_example(self):
        tokens = [ScoredToken(0.9, 1), ScoredToken(0.2, 0)]
        # direct evaluation of the NCE/H_cond/H_base definitions
        expected = 0.7630344058337938
        assert nce(tokens) == pytest.approx(expected, abs=1e-9)

    def test_eer_separable_is_zero(self):
        tokens = [ScoredToken(0.9, 1)] * 3 + [ScoredToken(0.1, 0)] * 2
        assert eer(tokens) == pytest.approx(0.0, abs=1e-12)

    def test_eer_worked_example(self):
        tokens = [ScoredToken(0.9, 1), ScoredToken(0.8, 1), ScoredToken(0.4, 1),
                  ScoredToken(0.6, 0), ScoredToken(0.2, 0)]
        assert eer(tokens) == pytest.approx(0.41667, abs=1e-5)

    def test_eer_mirror_symmetry(self):
        rng = np.random.default_rng(0)
        tokens = random_tokens(rng, 50)
        mirrored = [ScoredToken(1.0 - t.confidence, 1 - t.y) for t in tokens]
        assert eer(tokens) == pytest.approx(eer(mirrored), abs=1e-12)

    def test_mass_worked_example(self):
        tokens = [ScoredToken(0.8, 0), ScoredToken(0.8, 1),
                  ScoredToken(0.3, 0), ScoredToken(0.9, 0)]
        assert overconfidence_mass(tokens) == pytest.approx(0.5, abs=1e-12)

    def test_mass_all_correct_is_zero(self):
        tokens = [ScoredToken(0.99, 1)] * 5
        assert overconfidence_mass(tokens) == 0.0


class TestBinningConventions:
    def test_counts_example(self):
        tokens = [ScoredToken(0.05, 1), ScoredToken(0.15, 1),
                  ScoredToken(0.95, 1), ScoredToken(0.95, 0)]
        bins = reliability_bins(tokens, 10)
        assert bins.counts[0] == 1 and bins.counts[1] == 1 and bins.counts[9] == 2
        assert bins.counts.sum() == 4

    def test_confidence_one_goes_to_last_bin(self):
        bins = reliability_bins([ScoredToken(1.0, 1)], 10)
        assert bins.counts[9] == 1

    def test_exact_edge_goes_to_upper_bin(self):
        bins = reliability_bins([ScoredToken(0.1, 1)], 10)
        assert bins.counts[1] == 1

    def test_empty_set_is_error(self):
        with pytest.raises(ValidationError):
            reliability_bins([], 10)


class TestNaiveEquivalence:
    def test_all_metrics_match_naive_on_random_sets(self):
        rng = np.random.default_rng(1234)
        for _ in range(200):
            tokens = random_tokens(rng, int(rng.integers(2, 60)))
            ys = {t.y for t in tokens}
            assert ece(tokens) == pytest.approx(naive_ece(tokens), abs=1e-12)
            assert overconfidence_mass(tokens) == pytest.approx(
                naive_mass(tokens), abs=1e-12)
            assert nll(tokens) == pytest.approx(naive_nll(tokens), abs=1e-12)
            if ys == {0, 1}:
                assert nce(tokens) == pytest.approx(naive_nce(tokens), abs=1e-12)
                assert eer(tokens) == pytest.approx(naive_eer(tokens), abs=1e-12)


class TestProperties:
    def test_permutation_invariance(self):
        rng = np.random.default_rng(5)
        tokens = random_tokens(rng, 100)
        shuffled = list(tokens)
        rng.shuffle(shuffled)
        assert ece(tokens) == ece(shuffled)
        assert nce(tokens) == nce(shuffled)

    def test_nce_duplication_invariance(self):
        rng = np.random.default_rng(6)
        tokens = random_tokens(rng, 40)
        assert nce(tokens + tokens) == pytest.approx(nce(tokens), abs=1e-12)

    def test_calibrated_monte_carlo_has_small_ece(self):
        rng = np.random.default_rng(7)
        conf = rng.uniform(0.01, 0.999, size=20_000)
        y = (rng.random(20_000) < conf).astype(int)
        tokens = [ScoredToken(float(c), int(v)) for c, v in zip(conf, y)]
        assert ece(tokens) < 0.01

    def test_single_class_nce_is_error(self):
        with pytest.raises(ValidationError, match="single-class"):
            nce([ScoredToken(0.5, 1), ScoredToken(0.7, 1)])

    def test_clamping_avoids_infinities(self):
        tokens = [ScoredToken(1.0, 0), ScoredToken(1e-9, 1), ScoredToken(0.4, 0)]
        assert math.isfinite(nll(tokens))


class TestStratifiedReport:
    def test_single_band_equals_global(self):
        rng = np.random.default_rng(8)
        tokens = random_tokens(rng, 200, with_snr=True)
        for t in tokens:
            t.snr_db = -7.0
        report = snr_stratified_report(tokens, bands=[Band(-10.0, -5.0)])
        row = report.rows[0]
        assert row.count == 200
        assert row.ece == pytest.approx(ece(tokens), abs=1e-12)
        assert row.nce == pytest.approx(nce(tokens), abs=1e-12)
        assert row.overconfidence_mass == pytest.approx(
            overconfidence_mass(tokens), abs=1e-12)

    def test_empty_band_reports_zero_count(self):
        tokens = [ScoredToken(0.5, 1, snr_db=-7.0), ScoredToken(0.8, 0, snr_db=-7.0)]
        report = snr_stratified_report(tokens)
        by_label = {r.band.label: r for r in report.rows}
        assert by_label["(5,10]"].count == 0
        assert by_label["(5,10]"].ece is None

    def test_low_count_bands_are_flagged(self):
        tokens = [ScoredToken(0.5, 1, snr_db=-7.0)] * 10 + [ScoredToken(0.6, 0, snr_db=-7.0)]
        report = snr_stratified_report(tokens)
        by_label = {r.band.label: r for r in report.rows}
        assert by_label["[-10,-5]"].low_confidence

    def test_missing_snr_is_error(self):
        with pytest.raises(ValidationError, match="snr_db"):
            snr_stratified_report([ScoredToken(0.5, 1)])

    def test_default_bands_match_reporting_layout(self):
        labels = [b.label for b in DEFAULT_SNR_BANDS]
        assert labels == ["(5,10]", "(0,5]", "(-5,0]", "[-10,-5]",
                          "[-15,-10)", "[-18,-15]"]


class TestHeatmap:
    def test_calibrated_cells_near_bin_center(self):
        rng = np.random.default_rng(9)
        tokens = []
        for _ in range(30_000):
            c = float(rng.uniform(0.02, 0.999))
            tokens.append(ScoredToken(c, int(rng.random() < c), snr_db=-7.0))
        cells = confidence_accuracy_heatmap(tokens, 10, [Band(-10.0, -5.0)])
        for cell in cells:
            center = (cell.bin_lo + cell.bin_hi) / 2
            # Wilson 95% half-width
            n = cell.count
            p = cell.accuracy
            half = 1.96 * math.sqrt(max(p * (1 - p), 0.25 / n) / n) + 0.05
            assert abs(p - center) <= half + 0.05

    def test_single_band_rows_equal_reliability(self):
        rng = np.random.default_rng(10)
        tokens = random_tokens(rng, 300, with_snr=True)
        for t in tokens:
            t.snr_db = -12.0
        cells = confidence_accuracy_heatmap(tokens, 10, [Band(-15.0, -10.0)])
        bins = reliability_bins(tokens, 10)
        for cell in cells:
            k = int(cell.bin_lo * 10)
            assert cell.accuracy == pytest.approx(bins.accuracy[k], abs=1e-12)
            assert cell.count == bins.counts[k]
