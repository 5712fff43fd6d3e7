import math

import numpy as np
import pytest
from scipy import special

from pvqrng import stats
from pvqrng.bitio import BitStream


def bits(text: str) -> np.ndarray:
    return np.array([int(c) for c in text], dtype=np.uint8)


def uniform_stream(rng, n_bits: int) -> np.ndarray:
    return rng.integers(0, 2, n_bits, dtype=np.uint8)


class TestMonobit:
    def test_known_answer(self):
        r = stats.monobit_test(bits("1011010101"), min_bits=1)
        assert r.statistic == pytest.approx(2 / math.sqrt(10))
        assert r.p_value == pytest.approx(0.527089, abs=1e-6)

    def test_alternating_is_perfectly_balanced(self):
        r = stats.monobit_test(np.tile([0, 1], 5000).astype(np.uint8))
        assert r.p_value == 1.0

    def test_all_zeros_fails_hard(self):
        r = stats.monobit_test(np.zeros(10**4, np.uint8))
        assert r.p_value < 1e-20

    def test_closed_form_cross_check(self):
        # independent route: p = erfc(|2*ones - n| / sqrt(2n))
        rng = np.random.default_rng(0)
        stream = uniform_stream(rng, 4096)
        ones = int(stream.sum())
        expected = math.erfc(abs(2 * ones - 4096) / math.sqrt(2 * 4096))
        assert stats.monobit_test(stream).p_value == pytest.approx(expected, rel=1e-12)

    def test_min_length(self):
        with pytest.raises(stats.StreamTooShortError):
            stats.monobit_test(np.zeros(99, np.uint8))

    def test_accepts_bitstream(self):
        s = BitStream.from_bits(np.tile([0, 1], 100).astype(np.uint8))
        assert stats.monobit_test(s).p_value == 1.0


class TestBlockFrequency:
    def test_alternating_blocks_balanced(self):
        r = stats.block_frequency_test(np.tile([0, 1], 2000).astype(np.uint8), 10)
        assert r.statistic == 0.0
        assert r.p_value == 1.0

    def test_all_ones_chi2(self):
        r = stats.block_frequency_test(np.ones(1000, np.uint8), 10)
        assert r.statistic == pytest.approx(1000.0)
        assert r.p_value < 1e-100

    def test_nist_worked_example(self):
        r = stats.block_frequency_test(bits("0110011010"), 3, min_blocks=1)
        assert r.statistic == pytest.approx(1.0)
        assert r.p_value == pytest.approx(0.801252, abs=1e-6)

    def test_gamma_cross_check(self):
        rng = np.random.default_rng(1)
        stream = uniform_stream(rng, 12800)
        r = stats.block_frequency_test(stream, 128)
        n_blocks = 100
        pis = stream.reshape(n_blocks, 128).mean(axis=1)
        chi2 = 4 * 128 * float(((pis - 0.5) ** 2).sum())
        assert r.p_value == pytest.approx(float(special.gammaincc(n_blocks / 2, chi2 / 2)), rel=1e-12)

    def test_min_length(self):
        with pytest.raises(stats.StreamTooShortError):
            stats.block_frequency_test(np.zeros(999, np.uint8), 10)


class TestRuns:
    def test_known_answer(self):
        r = stats.runs_test(bits("1001101011"), min_bits=1)
        assert r.statistic == 7.0
        assert r.p_value == pytest.approx(0.147232, abs=1e-6)
        assert not r.prerequisite_failed

    def test_alternating_is_antipersistent(self):
        r = stats.runs_test(np.tile([0, 1], 5000).astype(np.uint8))
        assert r.p_value == pytest.approx(0.0, abs=1e-12)

    def test_all_zeros_sets_prerequisite_flag(self):
        r = stats.runs_test(np.zeros(1000, np.uint8))
        assert r.prerequisite_failed
        assert r.p_value == 0.0

    def test_min_length(self):
        with pytest.raises(stats.StreamTooShortError):
            stats.runs_test(np.zeros(10, np.uint8))


class TestAutocorrelation:
    def test_period_two_stream_at_lag_two(self):
        r = stats.autocorrelation_test(np.tile([0, 1], 2000).astype(np.uint8), 2)
        assert r.statistic == pytest.approx(-math.sqrt(3998))
        assert r.p_value == pytest.approx(0.0, abs=1e-12)

    def test_self_xor_is_exactly_zero(self):
        rng = np.random.default_rng(9)
        stream = uniform_stream(rng, 5000)
        d = 3
        agreement = int((stream[:-d] ^ stream[d:]).sum())
        r = stats.autocorrelation_test(stream, d)
        # statistic is a deterministic function of the XOR count
        assert r.statistic == pytest.approx(2 * (agreement - (5000 - d) / 2) / math.sqrt(5000 - d))

    def test_uniform_stream_passes(self):
        rng = np.random.default_rng(12)
        stream = uniform_stream(rng, 10**6)
        for lag in (1, 2, 8, 16):
            assert stats.autocorrelation_test(stream, lag).p_value > 1e-4

    def test_bad_lag(self):
        with pytest.raises(ValueError):
            stats.autocorrelation_test(np.zeros(5000, np.uint8), 0)

    def test_min_length(self):
        with pytest.raises(stats.StreamTooShortError):
            stats.autocorrelation_test(np.zeros(500, np.uint8), 1)


class TestBlockEntropy:
    def test_all_zeros(self):
        assert stats.block_entropy(np.zeros(1000, np.uint8), 1, min_blocks_per_symbol=1) == 0.0

    def test_alternating_single_bit(self):
        assert stats.block_entropy(np.tile([0, 1], 500).astype(np.uint8), 1, min_blocks_per_symbol=1) == pytest.approx(1.0)

    def test_uniform_k8_near_maximal(self):
        rng = np.random.default_rng(21)
        h = stats.block_entropy(uniform_stream(rng, 10**6), 8)
        # plug-in bias bound: (2^k - 1) / (2 N ln 2) with N = 125000 blocks
        assert h >= 7.99
        assert h <= 8.0

    def test_min_length(self):
        with pytest.raises(stats.StreamTooShortError):
            stats.block_entropy(np.zeros(1000, np.uint8), 8)


class TestMutualInformation:
    def test_self_information_of_balanced_stream(self):
        rng = np.random.default_rng(2)
        x = uniform_stream(rng, 10**5)
        assert stats.mutual_information(x, x) == pytest.approx(1.0, abs=0.01)

    def test_complement_is_fully_informative(self):
        rng = np.random.default_rng(3)
        x = uniform_stream(rng, 10**5)
        assert stats.mutual_information(x, 1 - x) == stats.mutual_information(x, x)

    def test_equals_single_bit_entropy(self):
        rng = np.random.default_rng(4)
        x = uniform_stream(rng, 10**5)
        h = stats.block_entropy(x, 1, min_blocks_per_symbol=1)
        assert stats.mutual_information(x, x) == pytest.approx(h, abs=1e-12)

    def test_independent_streams_near_zero(self):
        rng = np.random.default_rng(5)
        x = uniform_stream(rng, 10**6)
        y = uniform_stream(rng, 10**6)
        assert 0.0 <= stats.mutual_information(x, y) < 1e-4

    def test_nonnegative_on_random_pairs(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            x = uniform_stream(rng, 20_000)
            noise = rng.random(20_000) < rng.uniform(0, 0.5)
            y = x ^ noise.astype(np.uint8)
            assert stats.mutual_information(x, y) >= 0.0

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            stats.mutual_information(np.zeros(10**4, np.uint8), np.zeros(10**4 + 1, np.uint8))


class TestKsUniformity:
    def test_quantile_midpoints_best_case(self):
        m = 100
        ps = [(2 * i - 1) / (2 * m) for i in range(1, m + 1)]
        d, _ = stats.ks_uniformity(ps)
        assert d == pytest.approx(1 / (2 * m), abs=1e-15)

    def test_degenerate_half_point_mass(self):
        d, p = stats.ks_uniformity([0.5] * 20)
        assert d == pytest.approx(0.5)
        assert p < 1e-4

    def test_kolmogorov_series_cross_check(self):
        # independent route: evaluate the alternating series directly
        d, p = stats.ks_uniformity([0.5] * 20)
        lam = (math.sqrt(20) + 0.12 + 0.11 / math.sqrt(20)) * d
        series = 2 * sum((-1) ** (j - 1) * math.exp(-2 * j * j * lam * lam) for j in range(1, 101))
        assert p == pytest.approx(series, rel=1e-9)

    def test_calibrated_uniform_sample_passes(self):
        rng = np.random.default_rng(8)
        _, p = stats.ks_uniformity(rng.uniform(0, 1, 100))
        assert p > 0.01

    def test_permutation_invariant(self):
        rng = np.random.default_rng(10)
        ps = rng.uniform(0, 1, 40)
        d1, p1 = stats.ks_uniformity(ps)
        d2, p2 = stats.ks_uniformity(ps[::-1])
        assert d1 == d2 and p1 == p2

    def test_too_few_pvalues(self):
        with pytest.raises(ValueError):
            stats.ks_uniformity([0.5, 0.5])

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            stats.ks_uniformity([0.1, 0.2, 0.3, 0.4, 1.5])


class TestBattery:
    def test_uniform_stream_passes_default(self):
        rng = np.random.default_rng(30)
        report = stats.run_battery(uniform_stream(rng, 10**6))
        assert report.decision == "Pass"
        assert all(r.p_value >= 1e-4 for r in report.results)
        assert report.ks_p >= 0.01
        assert len(report.results) == 7  # monobit, blockfreq, runs, 4 lags

    def test_extended_has_at_least_twenty(self):
        rng = np.random.default_rng(31)
        report = stats.run_battery(uniform_stream(rng, 10**6), stats.BatteryConfig.extended())
        assert len(report.results) >= 20

    def test_all_zeros_fails(self):
        report = stats.run_battery(np.zeros(10**6, np.uint8))
        assert report.decision == "Fail"
        monobit = next(r for r in report.results if r.test_name == "monobit")
        assert monobit.p_value < 1e-20

    def test_slight_bias_fails(self):
        rng = np.random.default_rng(32)
        stream = (rng.random(10**6) < 0.52).astype(np.uint8)
        report = stats.run_battery(stream)
        assert report.decision == "Fail"
        monobit = next(r for r in report.results if r.test_name == "monobit")
        assert monobit.p_value < 1e-100

    def test_verdict_monotone_under_added_failure(self):
        rng = np.random.default_rng(33)
        report = stats.run_battery((rng.random(10**6) < 0.52).astype(np.uint8))
        assert report.decision == "Fail"
        extra = report.results + (stats.TestResult("injected", 99.0, 1e-9, None),)
        ks_d, ks_p = stats.ks_uniformity([r.p_value for r in extra])
        worse = stats.BatteryReport(
            results=extra, ks_statistic=ks_d, ks_p=ks_p,
            alpha_single=report.alpha_single, alpha_ks=report.alpha_ks, n_bits=report.n_bits,
        )
        assert worse.decision == "Fail"

    def test_short_stream_tests_skipped_not_fatal(self):
        rng = np.random.default_rng(34)
        cfg = stats.BatteryConfig(block_sizes=(10, 10_000), autocorr_lags=(1, 2), entropy_block_bits=None, min_bits=100)
        report = stats.run_battery(uniform_stream(rng, 2000), cfg)
        names = [r.test_name for r in report.results]
        assert "block_frequency_m10" in names
        assert any(name == "block_frequency_m10000" for name, _ in report.skipped)

    def test_sorted_pvalues_tie_broken_by_name(self):
        results = (
            stats.TestResult("b_test", 0.0, 0.5, None),
            stats.TestResult("a_test", 0.0, 0.5, None),
            stats.TestResult("c_test", 0.0, 0.1, None),
            stats.TestResult("d_test", 0.0, 0.9, None),
            stats.TestResult("e_test", 0.0, 0.7, None),
        )
        ks_d, ks_p = stats.ks_uniformity([r.p_value for r in results])
        report = stats.BatteryReport(results=results, ks_statistic=ks_d, ks_p=ks_p,
                                     alpha_single=1e-4, alpha_ks=0.01, n_bits=1000)
        assert report.sorted_pvalues() == [0.1, 0.5, 0.5, 0.7, 0.9]

    def test_deterministic(self):
        rng = np.random.default_rng(35)
        stream = uniform_stream(rng, 200_000)
        r1 = stats.run_battery(stream)
        r2 = stats.run_battery(stream)
        assert stats.render_report(r1) == stats.render_report(r2)


class TestCalibration:
    """The p-value formulas themselves are validated against uniform input."""

    def test_pvalues_uniform_over_many_streams(self):
        # smoke-scale version of the full acceptance calibration
        rng = np.random.default_rng(40)
        n_streams, n_bits = 60, 2**16
        cfg = stats.BatteryConfig(block_sizes=(64,), autocorr_lags=(1, 8), entropy_block_bits=None, min_bits=1000)
        per_test: dict[str, list[float]] = {}
        for _ in range(n_streams):
            report = stats.run_battery(uniform_stream(rng, n_bits), cfg)
            for r in report.results:
                per_test.setdefault(r.test_name, []).append(r.p_value)
        assert len(per_test) == 5  # monobit, block_frequency, runs, two lags
        for name, ps in per_test.items():
            _, ks_p = stats.ks_uniformity(ps)
            assert ks_p > 0.01, f"{name} p-values are not uniform (ks_p={ks_p})"


class TestReportFormats:
    def make_report(self):
        rng = np.random.default_rng(50)
        return stats.run_battery(rng.integers(0, 2, 200_000, dtype=np.uint8))

    def test_render_parse_round_trip(self):
        report = self.make_report()
        text = stats.render_report(report)
        back = stats.parse_report_text(text)
        assert stats.render_report(back) == text
        assert back.decision == report.decision
        assert back.sorted_pvalues() == report.sorted_pvalues()

    def test_report_lines_are_three_columns(self):
        text = stats.render_report(self.make_report())
        for line in text.splitlines():
            if line.startswith("#"):
                continue
            assert len(line.split("\t")) == 3

    def test_version_header_present(self):
        text = stats.render_report(self.make_report())
        assert text.splitlines()[0] == "# pvqrng-battery-report v1"

    def test_prerequisite_flag_survives_round_trip(self):
        report = stats.run_battery(np.zeros(10**6, np.uint8))
        back = stats.parse_report_text(stats.render_report(report))
        runs = next(r for r in back.results if r.test_name == "runs")
        assert runs.prerequisite_failed

    def test_csv_shape_and_version(self):
        report = self.make_report()
        csv = stats.sorted_pvalues_csv(report)
        lines = csv.splitlines()
        assert lines[0] == "# pvqrng-pvalues v1"
        assert lines[1] == "index,sorted_p,uniform_quantile"
        rows = [line.split(",") for line in lines[2:]]
        assert len(rows) == len(report.results)
        sorted_p = [float(r[1]) for r in rows]
        assert sorted_p == sorted(sorted_p)
        for i, row in enumerate(rows, start=1):
            assert int(row[0]) == i
            assert float(row[2]) == pytest.approx((i - 0.5) / len(rows))

    def test_parse_rejects_garbage(self):
        with pytest.raises(ValueError):
            stats.parse_report_text("not a report\n")
