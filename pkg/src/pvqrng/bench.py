"""Event-level simulation of the entangled-pair detection bench.

The source emits polarization-entangled photon pairs; the idler photon
picks a path at a 50/50 beam splitter (bit x_a), is analyzed in H/V at
one of two polarizing splitters (bit x_b, labels inverted on path 1),
and the signal photon is analyzed at a third splitter (bit x_c).  Six
detectors D1..D6 click with configurable efficiency and dark rates, and
coincidence pairing turns timestamped clicks back into bit triplets.

Detector-bit map::

    D1 = path 0, x_b = 0      D4 = path 1, x_b = 0
    D2 = path 0, x_b = 1      D5 = x_c = 0
    D3 = path 1, x_b = 1      D6 = x_c = 1

With a perfect source only (D1,D5), (D2,D6), (D3,D5), (D4,D6) ever fire
together, which realizes exactly the four even-parity triplets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .quantum import (
    DensityMatrix,
    NoiseParams,
    TripletBatch,
    analyzer_probabilities,
    apply_isotropic_noise,
    bell_state,
    derive_rng,
)

__all__ = [
    "Detector",
    "BenchConfig",
    "DetectionEvent",
    "EventStream",
    "CoincidenceRecord",
    "CoincidenceSet",
    "FitError",
    "VisibilityFit",
    "BASIS_ANGLES",
    "EXPECTED_PAIRS",
    "pair_triplet",
    "simulate_run",
    "find_coincidences",
    "collect_coincidences",
    "run_generation",
    "visibility_sweep",
    "measure_chsh",
    "write_events",
    "read_events",
]

EVENTS_FORMAT = "pvqrng-events v1"

ORIGIN_PHOTON = "photon"
ORIGIN_DARK = "dark"
_ORIGIN_CODES = {ORIGIN_PHOTON: 0, ORIGIN_DARK: 1}
_ORIGIN_NAMES = {v: k for k, v in _ORIGIN_CODES.items()}

# Signal-arm analyzer angle for each named polarization basis.
BASIS_ANGLES = {
    "H": 0.0,
    "D": math.pi / 4,
    "V": math.pi / 2,
    "A": 3 * math.pi / 4,
}

# Detector pairs that coincide for a perfect source.
EXPECTED_PAIRS = frozenset({(1, 5), (2, 6), (3, 5), (4, 6)})


class Detector(IntEnum):
    D1 = 1
    D2 = 2
    D3 = 3
    D4 = 4
    D5 = 5
    D6 = 6


class FitError(RuntimeError):
    """Fringe fit could not produce a meaningful visibility."""


def _six(value, name: str, lo: float, hi: float) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = np.full(6, float(arr))
    if arr.shape != (6,):
        raise ValueError(f"{name} must be a scalar or 6 values, got shape {arr.shape}")
    if arr.min() < lo or arr.max() > hi:
        raise ValueError(f"{name} values must lie in [{lo}, {hi}]")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class BenchConfig:
    """Physical parameters of one bench run.

    ``detector_efficiency`` and ``dark_rate`` accept a scalar (applied to
    all six detectors) or one value per detector D1..D6.  ``hwp_idler``
    sits before the beam splitter and rotates the idler analysis basis by
    twice its angle; ``hwp_signal`` does the same in front of the signal
    analyzer.
    """

    pair_rate: float = 1e5
    visibility: NoiseParams | float = 1.0
    detector_efficiency: object = 0.6
    dark_rate: object = 500.0
    coincidence_window: float = 1e-9
    duration: float = 1.0
    hwp_idler: float = 0.0
    hwp_signal: float = 0.0

    def __post_init__(self):
        if self.pair_rate < 0:
            raise ValueError("pair_rate must be >= 0")
        vis = self.visibility
        if not isinstance(vis, NoiseParams):
            vis = NoiseParams(float(vis))
        object.__setattr__(self, "visibility", vis)
        object.__setattr__(
            self, "detector_efficiency", _six(self.detector_efficiency, "detector_efficiency", 0.0, 1.0)
        )
        object.__setattr__(self, "dark_rate", _six(self.dark_rate, "dark_rate", 0.0, math.inf))
        if self.coincidence_window <= 0:
            raise ValueError("coincidence_window must be > 0")
        if self.duration <= 0:
            raise ValueError("duration must be > 0")

    def pair_state(self) -> DensityMatrix:
        """Two-photon polarization state leaving the source."""
        return apply_isotropic_noise(bell_state("phi-"), self.visibility)

    def joint_click_probabilities(self) -> np.ndarray:
        """Raw (r_b, r_c) outcome probabilities behind the configured waveplates."""
        return analyzer_probabilities(self.pair_state(), 2.0 * self.hwp_idler, 2.0 * self.hwp_signal)


@dataclass(frozen=True)
class DetectionEvent:
    """One detector click."""

    time: float
    detector: Detector
    origin: str

    def __post_init__(self):
        if self.origin not in _ORIGIN_CODES:
            raise ValueError(f"origin must be 'photon' or 'dark', got {self.origin!r}")


class EventStream:
    """Time-sorted detector clicks held columnar for speed.

    Iterating yields :class:`DetectionEvent`; the raw arrays (``times``
    seconds, ``detectors`` 1..6, ``origins`` 0 photon / 1 dark) stay
    available for vectorized processing.
    """

    __slots__ = ("times", "detectors", "origins")

    def __init__(self, times, detectors, origins):
        t = np.ascontiguousarray(times, dtype=np.float64)
        d = np.ascontiguousarray(detectors, dtype=np.uint8)
        o = np.ascontiguousarray(origins, dtype=np.uint8)
        if not (t.shape == d.shape == o.shape) or t.ndim != 1:
            raise ValueError("times, detectors, origins must be equal-length 1-d arrays")
        if t.size and np.any(np.diff(t) < 0):
            raise ValueError("events must be sorted by time")
        if d.size and (d.min() < 1 or d.max() > 6):
            raise ValueError("detector ids must be 1..6")
        self.times, self.detectors, self.origins = t, d, o

    def __len__(self) -> int:
        return self.times.size

    def __getitem__(self, i: int) -> DetectionEvent:
        return DetectionEvent(float(self.times[i]), Detector(int(self.detectors[i])), _ORIGIN_NAMES[int(self.origins[i])])

    def __iter__(self) -> Iterator[DetectionEvent]:
        for i in range(len(self)):
            yield self[i]

    def photon_count(self) -> int:
        return int((self.origins == 0).sum())

    def dark_count(self) -> int:
        return int((self.origins == 1).sum())

    def slice(self, start: int, stop: int) -> "EventStream":
        return EventStream(self.times[start:stop], self.detectors[start:stop], self.origins[start:stop])

    @classmethod
    def concatenate(cls, streams) -> "EventStream":
        return cls(
            np.concatenate([s.times for s in streams]),
            np.concatenate([s.detectors for s in streams]),
            np.concatenate([s.origins for s in streams]),
        )


def pair_triplet(idler_detector: int, signal_detector: int):
    """Bit triplet encoded by a (D1..D4, D5..D6) coincidence."""
    from .quantum import OutcomeTriplet

    idler = int(idler_detector)
    signal = int(signal_detector)
    if idler not in (1, 2, 3, 4):
        raise ValueError(f"idler detector must be D1..D4, got {idler}")
    if signal not in (5, 6):
        raise ValueError(f"signal detector must be D5 or D6, got {signal}")
    x_a = 0 if idler in (1, 2) else 1
    x_b = 1 if idler in (2, 3) else 0
    x_c = signal - 5
    return OutcomeTriplet(x_a, x_b, x_c)


@dataclass(frozen=True)
class CoincidenceRecord:
    """One accepted idler/signal pairing and the triplet it encodes."""

    idler_detector: Detector
    signal_detector: Detector
    triplet: object
    idler_time: float
    signal_time: float


class CoincidenceSet:
    """Columnar sequence of coincidence records in time order."""

    __slots__ = ("idler_detectors", "signal_detectors", "idler_times", "signal_times")

    def __init__(self, idler_detectors, signal_detectors, idler_times, signal_times):
        self.idler_detectors = np.ascontiguousarray(idler_detectors, dtype=np.uint8)
        self.signal_detectors = np.ascontiguousarray(signal_detectors, dtype=np.uint8)
        self.idler_times = np.ascontiguousarray(idler_times, dtype=np.float64)
        self.signal_times = np.ascontiguousarray(signal_times, dtype=np.float64)

    def __len__(self) -> int:
        return self.idler_detectors.size

    def __getitem__(self, i: int) -> CoincidenceRecord:
        idler = int(self.idler_detectors[i])
        signal = int(self.signal_detectors[i])
        return CoincidenceRecord(
            Detector(idler),
            Detector(signal),
            pair_triplet(idler, signal),
            float(self.idler_times[i]),
            float(self.signal_times[i]),
        )

    def __iter__(self) -> Iterator[CoincidenceRecord]:
        for i in range(len(self)):
            yield self[i]

    def triplet_batch(self) -> TripletBatch:
        if len(self) == 0:
            raise ValueError("no coincidences to convert")
        idler = self.idler_detectors
        x_a = (idler >= 3).astype(np.uint8)
        x_b = ((idler == 2) | (idler == 3)).astype(np.uint8)
        x_c = (self.signal_detectors - 5).astype(np.uint8)
        return TripletBatch(x_a, x_b, x_c)

    def accidental_mask(self) -> np.ndarray:
        """True where idler and signal timestamps differ.

        Photons of one pair share an emission timestamp exactly (no jitter
        is modeled), so unequal times mean the pairing is accidental.
        """
        return self.idler_times != self.signal_times

    @classmethod
    def concatenate(cls, sets) -> "CoincidenceSet":
        return cls(
            np.concatenate([s.idler_detectors for s in sets]),
            np.concatenate([s.signal_detectors for s in sets]),
            np.concatenate([s.idler_times for s in sets]),
            np.concatenate([s.signal_times for s in sets]),
        )


def _as_generator(seed) -> np.random.Generator:
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.PCG64(seed))
    return derive_rng(int(seed))


def simulate_run(config: BenchConfig, seed) -> EventStream:
    """One bench run: Poisson pair emissions, splitter outcomes, dark counts.

    Both photons of a pair carry the emission timestamp (timing jitter is
    not modeled); clicks are thinned by per-detector efficiency and merged
    with independent Poisson dark counts, then time-sorted.  Deterministic
    for a fixed seed.
    """
    rng = _as_generator(seed)
    eff = config.detector_efficiency
    dark = config.dark_rate

    n_pairs = rng.poisson(config.pair_rate * config.duration)
    pair_times = np.sort(rng.uniform(0.0, config.duration, n_pairs))
    probs = config.joint_click_probabilities()
    codes = rng.choice(4, size=n_pairs, p=probs)
    r_b = (codes >> 1).astype(np.uint8)
    r_c = (codes & 1).astype(np.uint8)
    paths = rng.integers(0, 2, size=n_pairs, dtype=np.uint8)

    det_idler = (1 + 2 * paths + r_b).astype(np.uint8)
    det_signal = (5 + r_c).astype(np.uint8)
    keep_idler = rng.random(n_pairs) < eff[det_idler - 1]
    keep_signal = rng.random(n_pairs) < eff[det_signal - 1]

    times = [pair_times[keep_idler], pair_times[keep_signal]]
    dets = [det_idler[keep_idler], det_signal[keep_signal]]
    origins = [np.zeros(int(keep_idler.sum()), np.uint8), np.zeros(int(keep_signal.sum()), np.uint8)]

    for d in range(6):
        n_dark = rng.poisson(dark[d] * config.duration)
        if n_dark:
            times.append(rng.uniform(0.0, config.duration, n_dark))
            dets.append(np.full(n_dark, d + 1, np.uint8))
            origins.append(np.ones(n_dark, np.uint8))

    t = np.concatenate(times)
    d = np.concatenate(dets)
    o = np.concatenate(origins)
    order = np.lexsort((d, t))
    return EventStream(t[order], d[order], o[order])


def _evaluate_block(dets: np.ndarray):
    """Classify one anchored window: a unique idler+signal pair or nothing."""
    idler_mask = dets <= 4
    n_idler = int(idler_mask.sum())
    n_signal = dets.size - n_idler
    if n_idler == 1 and n_signal == 1:
        return int(np.flatnonzero(idler_mask)[0]), int(np.flatnonzero(~idler_mask)[0])
    return None


def find_coincidences(events, window: float) -> CoincidenceSet:
    """Pair idler-side and signal-side clicks within a time window.

    Greedy left to right: the earliest unconsumed click anchors a window
    ``[t, t + window]``; if that window holds exactly one idler-side and
    one signal-side click they form a record, otherwise every click in it
    is dropped (lone clicks are unmatched, multi-click windows are
    ambiguous and discarded to avoid biased tie-breaks).  Either way the
    whole window is consumed before moving on.

    Accepts an :class:`EventStream` (fast, vectorized bookkeeping) or any
    iterable of :class:`DetectionEvent` (incremental, bounded buffer);
    both produce identical output for the same event sequence.
    """
    if window <= 0:
        raise ValueError("window must be > 0")
    if isinstance(events, EventStream):
        return _find_coincidences_arrays(events, window)
    return _find_coincidences_iter(events, window)


def _find_coincidences_arrays(ev: EventStream, window: float) -> CoincidenceSet:
    times, dets = ev.times, ev.detectors
    n = times.size
    block_ends = np.searchsorted(times, times + window, side="right")
    idler_idx: list[int] = []
    signal_idx: list[int] = []
    i = 0
    while i < n:
        j = int(block_ends[i])
        if j - i == 2:
            a, b = int(dets[i]), int(dets[i + 1])
            if a <= 4 and b >= 5:
                idler_idx.append(i)
                signal_idx.append(i + 1)
            elif a >= 5 and b <= 4:
                idler_idx.append(i + 1)
                signal_idx.append(i)
        elif j - i > 2:
            hit = _evaluate_block(dets[i:j])
            if hit is not None:
                idler_idx.append(i + hit[0])
                signal_idx.append(i + hit[1])
        i = j
    ii = np.asarray(idler_idx, dtype=np.intp)
    si = np.asarray(signal_idx, dtype=np.intp)
    return CoincidenceSet(dets[ii], dets[si], times[ii], times[si])


def _find_coincidences_iter(events: Iterable[DetectionEvent], window: float) -> CoincidenceSet:
    from collections import deque

    buf: deque[tuple[float, int]] = deque()
    out_idler: list[tuple[int, float]] = []
    out_signal: list[tuple[int, float]] = []
    last_time = -math.inf

    def flush_front():
        t0 = buf[0][0]
        block = []
        while buf and buf[0][0] <= t0 + window:
            block.append(buf.popleft())
        dets = np.array([d for _, d in block], dtype=np.uint8)
        hit = _evaluate_block(dets)
        if hit is not None:
            ti, di = block[hit[0]]
            ts, ds = block[hit[1]]
            out_idler.append((di, ti))
            out_signal.append((ds, ts))

    for ev in events:
        t = float(ev.time)
        if t < last_time:
            raise ValueError("events must be sorted by time")
        last_time = t
        buf.append((t, int(ev.detector)))
        while buf and buf[-1][0] > buf[0][0] + window:
            flush_front()
    while buf:
        flush_front()

    return CoincidenceSet(
        np.array([d for d, _ in out_idler], dtype=np.uint8),
        np.array([d for d, _ in out_signal], dtype=np.uint8),
        np.array([t for _, t in out_idler], dtype=np.float64),
        np.array([t for _, t in out_signal], dtype=np.float64),
    )


def _pair_yield(config: BenchConfig) -> float:
    """Rough probability that an emitted pair becomes a coincidence record."""
    eff = config.detector_efficiency
    return max(float(eff[:4].mean() * eff[4:].mean()), 1e-6)


def collect_coincidences(config: BenchConfig, n_target: int, seed: int, on_events=None) -> CoincidenceSet:
    """Simulate sub-seeded chunks until ``n_target`` coincidences exist.

    Records keep coincidence time order within and across chunks.  The
    result may slightly overshoot ``n_target``; callers truncate.
    ``on_events`` is called with each chunk's :class:`EventStream` (for
    debugging dumps).
    """
    if n_target < 1:
        raise ValueError("n_target must be >= 1")
    pieces: list[CoincidenceSet] = []
    total = 0
    chunk = 0
    while total < n_target:
        if chunk >= 10_000:
            raise RuntimeError(f"generation stalled: {total}/{n_target} coincidences after {chunk} chunks")
        remaining = n_target - total
        if config.pair_rate > 0:
            want_pairs = remaining / _pair_yield(config) * 1.15 + 100.0
            duration = want_pairs / config.pair_rate
        else:
            duration = config.duration
        sub = replace(config, duration=duration)
        ev = simulate_run(sub, np.random.SeedSequence(seed, spawn_key=(chunk,)))
        if on_events is not None:
            on_events(ev)
        recs = find_coincidences(ev, config.coincidence_window)
        if len(recs):
            pieces.append(recs)
            total += len(recs)
        chunk += 1
    return CoincidenceSet.concatenate(pieces)


def run_generation(config: BenchConfig, n_target: int, seed: int) -> TripletBatch:
    """Simulate until ``n_target`` coincidence triplets are collected."""
    batch = collect_coincidences(config, n_target, seed).triplet_batch()
    return TripletBatch(batch.x_a[:n_target], batch.x_b[:n_target], batch.x_c[:n_target])


@dataclass(frozen=True)
class VisibilityFit:
    """Fringe sweep data and its least-squares cosine fit.

    Model: counts(theta) = c0 * (1 + visibility * cos(4*(theta - theta0))) / 2,
    the period-pi/2 fringe a halfwave plate produces in front of a fixed
    analyzer.
    """

    angles: np.ndarray
    counts: np.ndarray
    c0: float
    visibility: float
    theta0: float

    def points(self) -> list[tuple[float, int]]:
        return [(float(a), int(c)) for a, c in zip(self.angles, self.counts)]


def visibility_sweep(
    config: BenchConfig,
    basis: str,
    angles,
    samples_per_angle: int,
    seed: int,
) -> VisibilityFit:
    """Sweep the idler halfwave plate and fit the coincidence fringe.

    ``basis`` fixes the signal-arm analyzer (H, D, V or A).  At each plate
    angle a run sized for ``samples_per_angle`` emitted pairs is simulated
    and (D1, D5) coincidences are counted.  The fitted ``visibility``
    estimates the source visibility; raises :class:`FitError` when the
    data cannot support the fringe model (e.g. all-zero counts).
    """
    if basis not in BASIS_ANGLES:
        raise ValueError(f"basis must be one of {sorted(BASIS_ANGLES)}, got {basis!r}")
    theta = np.asarray(list(angles), dtype=np.float64)
    if np.unique(theta).size < 8:
        raise ValueError("need at least 8 distinct sweep angles")
    if theta.max() - theta.min() < math.pi / 4:
        raise ValueError("sweep must span at least half a fringe period (pi/4)")
    if samples_per_angle < 1:
        raise ValueError("samples_per_angle must be >= 1")
    if config.pair_rate <= 0:
        raise ValueError("visibility sweep needs a positive pair rate")

    signal_plate = BASIS_ANGLES[basis] / 2.0
    counts = np.empty(theta.size)
    for k, ang in enumerate(theta):
        sub = replace(
            config,
            hwp_idler=float(ang),
            hwp_signal=signal_plate,
            duration=samples_per_angle / config.pair_rate,
        )
        ev = simulate_run(sub, np.random.SeedSequence(seed, spawn_key=(k,)))
        recs = find_coincidences(ev, config.coincidence_window)
        counts[k] = int(((recs.idler_detectors == 1) & (recs.signal_detectors == 5)).sum())

    design = np.column_stack([np.ones_like(theta), np.cos(4.0 * theta), np.sin(4.0 * theta)])
    coef, _, rank, _ = np.linalg.lstsq(design, counts, rcond=None)
    if rank < 3:
        raise FitError("sweep angles do not resolve the fringe (rank-deficient fit)")
    a0, a1, a2 = (float(c) for c in coef)
    if a0 <= 0:
        raise FitError("fit produced a non-positive mean count level")
    return VisibilityFit(
        angles=theta,
        counts=counts.astype(np.int64),
        c0=2.0 * a0,
        visibility=math.hypot(a1, a2) / a0,
        theta0=math.atan2(a2, a1) / 4.0,
    )


def measure_chsh(
    config: BenchConfig,
    settings: tuple[float, float, float, float],
    samples_per_setting: int,
    seed: int,
    arm: int = 0,
) -> tuple[float, float]:
    """Estimate the CHSH combination from simulated coincidence counts.

    ``settings`` are the analyzer angles (a, a', b, b'); the bench realizes
    each by setting the plates to half the angle.  ``arm`` selects which
    idler splitter supplies the counts: 0 uses (D1, D2), 1 uses (D3, D4);
    exactly ``samples_per_setting`` coincidences are collected per setting
    combination.  Returns (S, standard_error) with the error propagated
    from the binomial variance of each correlation estimate.
    """
    if samples_per_setting < 1000:
        raise ValueError("samples_per_setting must be >= 1000")
    if arm not in (0, 1):
        raise ValueError("arm must be 0 (D1/D2) or 1 (D3/D4)")
    a, a_prime, b, b_prime = settings
    combos = [(a, b), (a, b_prime), (a_prime, b), (a_prime, b_prime)]
    arm_dets = (1, 2) if arm == 0 else (3, 4)

    corr = np.empty(4)
    variances = np.empty(4)
    for k, (theta_a, theta_b) in enumerate(combos):
        sub = replace(config, hwp_idler=theta_a / 2.0, hwp_signal=theta_b / 2.0)
        collected = 0
        same = 0
        chunk = 0
        while collected < samples_per_setting:
            if chunk >= 10_000:
                raise RuntimeError("CHSH collection stalled")
            remaining = samples_per_setting - collected
            want_pairs = remaining / (_pair_yield(sub) * 0.5) * 1.15 + 100.0
            duration = want_pairs / sub.pair_rate if sub.pair_rate > 0 else sub.duration
            ev = simulate_run(replace(sub, duration=duration), np.random.SeedSequence(seed, spawn_key=(k, chunk)))
            recs = find_coincidences(ev, sub.coincidence_window)
            in_arm = (recs.idler_detectors == arm_dets[0]) | (recs.idler_detectors == arm_dets[1])
            idler = recs.idler_detectors[in_arm]
            signal = recs.signal_detectors[in_arm]
            take = min(idler.size, samples_per_setting - collected)
            if take:
                r_b = ((idler[:take] == 2) | (idler[:take] == 4)).astype(np.uint8)
                r_c = (signal[:take] - 5).astype(np.uint8)
                same += int((r_b == r_c).sum())
                collected += take
            chunk += 1
        p_same = same / samples_per_setting
        corr[k] = 2.0 * p_same - 1.0
        variances[k] = 4.0 * p_same * (1.0 - p_same) / samples_per_setting

    s_value = abs(corr[0] - corr[1] + corr[2] + corr[3])
    return float(s_value), float(math.sqrt(variances.sum()))


def write_events(path, events: EventStream) -> None:
    """Dump a click stream as ``time_ns<TAB>detector_id<TAB>origin`` lines.

    Timestamps are quantized to integer nanoseconds.
    """
    lines = [f"# {EVENTS_FORMAT}"]
    for t, d, o in zip(events.times, events.detectors, events.origins):
        lines.append(f"{round(float(t) * 1e9)}\t{int(d)}\t{_ORIGIN_NAMES[int(o)]}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_events(path) -> EventStream:
    times: list[float] = []
    dets: list[int] = []
    origins: list[int] = []
    for ln, line in enumerate(Path(path).read_text(encoding="ascii").splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(f"line {ln}: expected time_ns<TAB>detector<TAB>origin, got {line!r}")
        times.append(int(parts[0]) * 1e-9)
        dets.append(int(parts[1]))
        origins.append(_ORIGIN_CODES[parts[2]])
    return EventStream(np.array(times), np.array(dets, dtype=np.uint8), np.array(origins, dtype=np.uint8))
