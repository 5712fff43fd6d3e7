"""Randomness test battery, entropy estimators and p-value aggregation.

Each test maps a bit stream to a statistic with a closed-form p-value
under the uniform-bits null.  The battery aggregates the individual
p-values with a Kolmogorov-Smirnov uniformity check, so a stream can fail
either because one test is individually damning or because the whole
p-value profile is skewed.

Report text format (version ``pvqrng-battery-report v1``): one
``test_name<TAB>statistic<TAB>p_value`` line per test, metadata carried
in ``#``-comment lines.  Sorted p-values for plotting are emitted as CSV
``index,sorted_p,uniform_quantile`` (version ``pvqrng-pvalues v1``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .bitio import BitStream

__all__ = [
    "StreamTooShortError",
    "TestResult",
    "BatteryConfig",
    "BatteryReport",
    "monobit_test",
    "block_frequency_test",
    "runs_test",
    "autocorrelation_test",
    "block_entropy",
    "mutual_information",
    "ks_uniformity",
    "run_battery",
    "render_report",
    "parse_report_text",
    "sorted_pvalues_csv",
]

REPORT_FORMAT = "pvqrng-battery-report v1"
CSV_FORMAT = "pvqrng-pvalues v1"


class StreamTooShortError(ValueError):
    """A test's minimum stream length was not met."""


@dataclass(frozen=True)
class TestResult:
    """Outcome of one statistical test.

    ``n_used`` is None for results reconstructed from report text, which
    does not carry it.  ``prerequisite_failed`` marks tests whose own
    applicability condition failed (p_value is pinned to 0 in that case).
    """

    test_name: str
    statistic: float
    p_value: float
    n_used: int | None = None
    prerequisite_failed: bool = False

    def __post_init__(self):
        if not (0.0 <= self.p_value <= 1.0):
            raise ValueError(f"p_value outside [0, 1]: {self.p_value!r}")


def _as_bits(s: BitStream | np.ndarray) -> np.ndarray:
    if isinstance(s, BitStream):
        return s.bits()
    arr = np.ascontiguousarray(s, dtype=np.uint8)
    if arr.ndim != 1:
        raise ValueError("bits must be 1-d")
    return arr


def _require(n: int, minimum: int, test: str) -> None:
    if n < minimum:
        raise StreamTooShortError(f"{test} needs >= {minimum} bits, got {n}")


def monobit_test(s: BitStream | np.ndarray, min_bits: int = 100) -> TestResult:
    """Balance of ones and zeros: s_obs = |sum(2b-1)| / sqrt(n), p = erfc(s_obs/sqrt2)."""
    bits = _as_bits(s)
    n = bits.size
    _require(n, min_bits, "monobit")
    s_n = 2.0 * float(bits.sum()) - n
    s_obs = abs(s_n) / math.sqrt(n)
    p = math.erfc(s_obs / math.sqrt(2.0))
    return TestResult("monobit", s_obs, p, n)


def block_frequency_test(s: BitStream | np.ndarray, block_len: int, min_blocks: int = 100) -> TestResult:
    """Chi-square of per-block ones-fractions against 1/2 over disjoint blocks."""
    if block_len < 1:
        raise ValueError("block_len must be >= 1")
    bits = _as_bits(s)
    n = bits.size
    _require(n, min_blocks * block_len, f"block_frequency[M={block_len}]")
    n_blocks = n // block_len
    pis = bits[: n_blocks * block_len].reshape(n_blocks, block_len).mean(axis=1)
    chi2 = 4.0 * block_len * float(((pis - 0.5) ** 2).sum())
    p = float(special.gammaincc(n_blocks / 2.0, chi2 / 2.0))
    return TestResult(f"block_frequency_m{block_len}", chi2, p, n_blocks * block_len)


def runs_test(s: BitStream | np.ndarray, min_bits: int = 100) -> TestResult:
    """Count of maximal runs versus the expectation for independent bits.

    Only meaningful when the stream is roughly balanced; if the ones
    fraction strays beyond 2/sqrt(n) from 1/2 the result is flagged
    ``prerequisite_failed`` with p = 0.
    """
    bits = _as_bits(s)
    n = bits.size
    _require(n, min_bits, "runs")
    pi = float(bits.mean())
    if abs(pi - 0.5) >= 2.0 / math.sqrt(n):
        return TestResult("runs", float("nan"), 0.0, n, prerequisite_failed=True)
    v_n = 1 + int((bits[1:] != bits[:-1]).sum())
    denom = 2.0 * math.sqrt(2.0 * n) * pi * (1.0 - pi)
    p = math.erfc(abs(v_n - 2.0 * n * pi * (1.0 - pi)) / denom)
    return TestResult("runs", float(v_n), p, n)


def autocorrelation_test(s: BitStream | np.ndarray, lag: int, min_bits: int = 1000) -> TestResult:
    """XOR agreement between the stream and its lag-shifted self.

    A_d = sum b_i ^ b_{i+d} over the n-d overlapping positions; under the
    null A_d is Binomial(n-d, 1/2), normalized to z and mapped through
    erfc.  Sensitive to periodic structure and long-range correlation.
    """
    if lag < 1:
        raise ValueError(f"lag must be >= 1, got {lag}")
    bits = _as_bits(s)
    m = bits.size - lag
    if m < min_bits:
        raise StreamTooShortError(f"autocorrelation lag {lag} needs >= {min_bits + lag} bits, got {bits.size}")
    a_d = float((bits[:-lag] ^ bits[lag:]).sum())
    z = 2.0 * (a_d - m / 2.0) / math.sqrt(m)
    p = math.erfc(abs(z) / math.sqrt(2.0))
    return TestResult(f"autocorrelation_d{lag}", z, p, m)


def block_entropy(s: BitStream | np.ndarray, block_bits: int, min_blocks_per_symbol: int = 100) -> float:
    """Plug-in Shannon entropy of disjoint k-bit blocks, in bits (0..k).

    Diagnostic only: the plug-in estimate is biased low by roughly
    (2^k - 1) / (2 N ln 2) for N blocks, so it has no calibrated null.
    """
    if block_bits < 1:
        raise ValueError("block_bits must be >= 1")
    bits = _as_bits(s)
    n = bits.size
    _require(n, min_blocks_per_symbol * 2**block_bits * block_bits, f"block_entropy[k={block_bits}]")
    n_blocks = n // block_bits
    blocks = bits[: n_blocks * block_bits].reshape(n_blocks, block_bits)
    weights = (1 << np.arange(block_bits - 1, -1, -1)).astype(np.int64)
    codes = blocks @ weights
    counts = np.bincount(codes, minlength=2**block_bits)
    probs = counts[counts > 0] / n_blocks
    return float(-(probs * np.log2(probs)).sum())


def mutual_information(x: BitStream | np.ndarray, y: BitStream | np.ndarray, min_bits: int = 10_000) -> float:
    """Plug-in mutual information between paired bit streams, in bits (>= 0)."""
    bx, by = _as_bits(x), _as_bits(y)
    if bx.size != by.size:
        raise ValueError(f"length mismatch: {bx.size} vs {by.size}")
    _require(bx.size, min_bits, "mutual_information")
    joint = np.bincount(2 * bx.astype(np.int64) + by, minlength=4).astype(np.float64)
    joint /= bx.size
    px = joint.reshape(2, 2).sum(axis=1)
    py = joint.reshape(2, 2).sum(axis=0)
    info = 0.0
    for a in (0, 1):
        for b in (0, 1):
            pj = joint[2 * a + b]
            if pj > 0.0:
                info += pj * math.log2(pj / (px[a] * py[b]))
    return max(info, 0.0)


def ks_uniformity(pvalues) -> tuple[float, float]:
    """Kolmogorov-Smirnov distance of a p-value sample from Uniform(0,1).

    Returns (D, p) with D the classic sup-distance of the empirical CDF
    and p from the asymptotic Kolmogorov distribution evaluated at
    lambda = (sqrt(m) + 0.12 + 0.11/sqrt(m)) * D.
    """
    ps = np.sort(np.asarray(list(pvalues), dtype=np.float64))
    m = ps.size
    if m < 5:
        raise ValueError(f"need >= 5 p-values, got {m}")
    if ps[0] < 0.0 or ps[-1] > 1.0:
        raise ValueError("p-values must lie in [0, 1]")
    i = np.arange(1, m + 1)
    d = float(np.maximum(i / m - ps, ps - (i - 1) / m).max())
    lam = (math.sqrt(m) + 0.12 + 0.11 / math.sqrt(m)) * d
    return d, float(special.kolmogorov(lam))


@dataclass(frozen=True)
class BatteryConfig:
    """Which tests to run and how to turn p-values into a verdict.

    Fail iff any single test p-value drops below ``alpha_single`` or the
    KS uniformity check over all p-values rejects at ``alpha_ks``.
    """

    block_sizes: tuple[int, ...] = (128,)
    autocorr_lags: tuple[int, ...] = (1, 2, 8, 16)
    entropy_block_bits: int | None = 8
    alpha_single: float = 1e-4
    alpha_ks: float = 0.01
    min_bits: int = 100_000

    def __post_init__(self):
        if not 0.0 < self.alpha_single < 1.0:
            raise ValueError("alpha_single must be in (0, 1)")
        if not 0.0 < self.alpha_ks < 1.0:
            raise ValueError("alpha_ks must be in (0, 1)")
        if any(m < 1 for m in self.block_sizes) or any(d < 1 for d in self.autocorr_lags):
            raise ValueError("block sizes and lags must be >= 1")

    @classmethod
    def extended(cls, **overrides) -> "BatteryConfig":
        """Wide battery (23 p-values) for sorted-p-value profile plots."""
        defaults = dict(
            block_sizes=(64, 128, 256, 512, 1024),
            autocorr_lags=tuple(range(1, 17)),
        )
        defaults.update(overrides)
        return cls(**defaults)


@dataclass(frozen=True)
class BatteryReport:
    """All per-test results plus the KS aggregate and verdict inputs."""

    results: tuple[TestResult, ...]
    ks_statistic: float
    ks_p: float
    alpha_single: float
    alpha_ks: float
    n_bits: int
    entropy_block_bits: int | None = None
    entropy_bits: float | None = None
    skipped: tuple[tuple[str, str], ...] = field(default_factory=tuple)

    def __post_init__(self):
        if not self.results:
            raise ValueError("report must contain at least one test result")

    def pvalues(self) -> list[float]:
        return [r.p_value for r in self.results]

    def sorted_pvalues(self) -> list[float]:
        # ties broken by test name so reports are reproducible
        return [p for p, _ in sorted((r.p_value, r.test_name) for r in self.results)]

    @property
    def decision(self) -> str:
        if min(self.pvalues()) < self.alpha_single:
            return "Fail"
        if not math.isnan(self.ks_p) and self.ks_p < self.alpha_ks:
            return "Fail"
        return "Pass"

    @property
    def passed(self) -> bool:
        return self.decision == "Pass"


def run_battery(s: BitStream | np.ndarray, config: BatteryConfig = BatteryConfig()) -> BatteryReport:
    """Run every configured test on one stream and aggregate the p-values.

    Per-test precondition failures (stream too short for that test) are
    recorded in ``skipped`` instead of aborting the battery.
    """
    bits = _as_bits(s)
    n = bits.size
    results: list[TestResult] = []
    skipped: list[tuple[str, str]] = []

    def attempt(name, fn):
        try:
            results.append(fn())
        except StreamTooShortError as exc:
            skipped.append((name, str(exc)))

    attempt("monobit", lambda: monobit_test(bits))
    for m in config.block_sizes:
        attempt(f"block_frequency_m{m}", lambda m=m: block_frequency_test(bits, m))
    attempt("runs", lambda: runs_test(bits))
    for d in config.autocorr_lags:
        attempt(f"autocorrelation_d{d}", lambda d=d: autocorrelation_test(bits, d))

    if not results:
        raise StreamTooShortError(f"stream of {n} bits is too short for every configured test")

    ps = [r.p_value for r in results]
    if len(ps) >= 5:
        ks_d, ks_p = ks_uniformity(ps)
    else:
        ks_d, ks_p = float("nan"), float("nan")

    ent_bits = None
    if config.entropy_block_bits is not None:
        try:
            ent_bits = block_entropy(bits, config.entropy_block_bits)
        except StreamTooShortError as exc:
            skipped.append((f"block_entropy_k{config.entropy_block_bits}", str(exc)))

    return BatteryReport(
        results=tuple(results),
        ks_statistic=ks_d,
        ks_p=ks_p,
        alpha_single=config.alpha_single,
        alpha_ks=config.alpha_ks,
        n_bits=n,
        entropy_block_bits=config.entropy_block_bits if ent_bits is not None else None,
        entropy_bits=ent_bits,
        skipped=tuple(skipped),
    )


def _fmt(x: float) -> str:
    return repr(float(x))


def render_report(report: BatteryReport) -> str:
    """Canonical text form: versioned header comments + tab-separated test lines.

    The rendering is deterministic (repr floats, fixed ordering), so equal
    reports serialize to identical bytes.
    """
    lines = [f"# {REPORT_FORMAT}"]
    lines.append(f"# n_bits={report.n_bits}")
    lines.append(f"# alpha_single={_fmt(report.alpha_single)}")
    lines.append(f"# alpha_ks={_fmt(report.alpha_ks)}")
    lines.append(f"# ks_statistic={_fmt(report.ks_statistic)}")
    lines.append(f"# ks_p={_fmt(report.ks_p)}")
    if report.entropy_bits is not None:
        lines.append(f"# block_entropy_k={report.entropy_block_bits}")
        lines.append(f"# block_entropy_bits={_fmt(report.entropy_bits)}")
    for name, reason in report.skipped:
        lines.append(f"# skipped {name}: {reason}")
    for r in report.results:
        if r.prerequisite_failed:
            lines.append(f"# prerequisite_failed {r.test_name}")
    for r in report.results:
        lines.append(f"{r.test_name}\t{_fmt(r.statistic)}\t{_fmt(r.p_value)}")
    return "\n".join(lines) + "\n"


def parse_report_text(text: str) -> BatteryReport:
    """Inverse of render_report (up to per-test n_used, which text omits)."""
    meta: dict[str, str] = {}
    skipped: list[tuple[str, str]] = []
    prereq_failed: set[str] = set()
    rows: list[tuple[str, float, float]] = []
    lines = text.splitlines()
    if not lines or lines[0] != f"# {REPORT_FORMAT}":
        raise ValueError("not a battery report (missing version header)")
    for line in lines[1:]:
        if not line.strip():
            continue
        if line.startswith("# skipped "):
            body = line[len("# skipped ") :]
            name, _, reason = body.partition(": ")
            skipped.append((name, reason))
        elif line.startswith("# prerequisite_failed "):
            prereq_failed.add(line[len("# prerequisite_failed ") :].strip())
        elif line.startswith("# ") and "=" in line:
            key, _, value = line[2:].partition("=")
            meta[key] = value
        elif line.startswith("#"):
            continue
        else:
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"bad report line: {line!r}")
            rows.append((parts[0], float(parts[1]), float(parts[2])))
    results = tuple(
        TestResult(name, stat, p, None, prerequisite_failed=name in prereq_failed)
        for name, stat, p in rows
    )
    ent_k = meta.get("block_entropy_k")
    return BatteryReport(
        results=results,
        ks_statistic=float(meta["ks_statistic"]),
        ks_p=float(meta["ks_p"]),
        alpha_single=float(meta["alpha_single"]),
        alpha_ks=float(meta["alpha_ks"]),
        n_bits=int(meta["n_bits"]),
        entropy_block_bits=int(ent_k) if ent_k is not None else None,
        entropy_bits=float(meta["block_entropy_bits"]) if "block_entropy_bits" in meta else None,
        skipped=tuple(skipped),
    )


def sorted_pvalues_csv(report: BatteryReport) -> str:
    """CSV of sorted p-values against uniform plotting positions (i-0.5)/m."""
    ps = report.sorted_pvalues()
    m = len(ps)
    lines = [f"# {CSV_FORMAT}", "index,sorted_p,uniform_quantile"]
    for i, p in enumerate(ps, start=1):
        lines.append(f"{i},{_fmt(p)},{_fmt((i - 0.5) / m)}")
    return "\n".join(lines) + "\n"
