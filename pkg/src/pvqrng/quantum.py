"""Exact quantum-state math for the three-stream entangled QRNG.

Everything here is analytic: state vectors and density matrices are small
(1-3 qubits), probabilities come from the Born rule, and sampling is the
only stochastic operation.  States are immutable after construction and a
fixed seed reproduces sampled output bit for bit.

Conventions
-----------
* Computational basis index is the bit string of the qubits, most
  significant bit first: for a 3-qubit state, amplitude ``amps[5]``
  belongs to ``|101>``.
* ``|0>`` is horizontal (H) polarization, ``|1>`` is vertical (V).
* Analyzer angles are in radians measured from H.  A halfwave plate at
  angle ``phi`` rotates the analysis basis by ``2*phi``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "PureState",
    "DensityMatrix",
    "NoiseParams",
    "OutcomeTriplet",
    "OutcomeDistribution",
    "TripletBatch",
    "CHSH_OPTIMAL_ANGLES",
    "tripartite_state",
    "bell_state",
    "project_qubit",
    "apply_isotropic_noise",
    "analyzer_probabilities",
    "correlation",
    "chsh_value",
    "outcome_distribution",
    "sample_triplets",
    "derive_rng",
]

_NORM_TOL = 1e-12


def derive_rng(seed: int, *key: int) -> np.random.Generator:
    """Deterministic generator for (seed, sub-key).

    Independent sub-streams (e.g. per simulation chunk) are derived from
    the same user seed by spawn key, so partitioned sampling stays
    reproducible without global RNG state.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=key)))


@dataclass(frozen=True)
class PureState:
    """Normalized state vector of 1-3 qubits."""

    dims: int
    amplitudes: np.ndarray

    def __post_init__(self):
        if self.dims not in (1, 2, 3):
            raise ValueError(f"dims must be 1, 2 or 3, got {self.dims}")
        amps = np.asarray(self.amplitudes, dtype=np.complex128)
        if amps.shape != (2**self.dims,):
            raise ValueError(f"expected {2**self.dims} amplitudes, got shape {amps.shape}")
        norm = float(np.sum(np.abs(amps) ** 2))
        if abs(norm - 1.0) > _NORM_TOL:
            raise ValueError(f"state not normalized: |psi|^2 = {norm!r}")
        amps.flags.writeable = False
        object.__setattr__(self, "amplitudes", amps)

    def projector(self) -> np.ndarray:
        """Rank-1 projector |psi><psi| as a dense matrix."""
        return np.outer(self.amplitudes, self.amplitudes.conj())

    def density_matrix(self) -> "DensityMatrix":
        return DensityMatrix(self.dims, self.projector())


@dataclass(frozen=True)
class DensityMatrix:
    """Hermitian, unit-trace, positive-semidefinite operator on 1-3 qubits."""

    dims: int
    entries: np.ndarray

    def __post_init__(self):
        if self.dims not in (1, 2, 3):
            raise ValueError(f"dims must be 1, 2 or 3, got {self.dims}")
        d = 2**self.dims
        rho = np.asarray(self.entries, dtype=np.complex128)
        if rho.shape != (d, d):
            raise ValueError(f"expected {d}x{d} matrix, got shape {rho.shape}")
        if not np.allclose(rho, rho.conj().T, atol=_NORM_TOL, rtol=0):
            raise ValueError("density matrix not Hermitian")
        tr = complex(np.trace(rho)).real
        if abs(tr - 1.0) > _NORM_TOL:
            raise ValueError(f"trace must be 1, got {tr!r}")
        if np.linalg.eigvalsh(rho).min() < -1e-10:
            raise ValueError("density matrix has a negative eigenvalue")
        rho.flags.writeable = False
        object.__setattr__(self, "entries", rho)


@dataclass(frozen=True)
class NoiseParams:
    """Isotropic-noise strength expressed as fringe visibility V in [0, 1]."""

    visibility: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.visibility <= 1.0:
            raise ValueError(f"visibility must be in [0, 1], got {self.visibility!r}")


@dataclass(frozen=True)
class OutcomeTriplet:
    """One measurement round: bits from the three detection stations.

    Parity ``x_a ^ x_b ^ x_c`` is even for ideal rounds but may be odd
    under noise; it is deliberately not an invariant of the type.
    """

    x_a: int
    x_b: int
    x_c: int

    def __post_init__(self):
        for name, v in (("x_a", self.x_a), ("x_b", self.x_b), ("x_c", self.x_c)):
            if v not in (0, 1):
                raise ValueError(f"{name} must be 0 or 1, got {v!r}")

    @property
    def parity(self) -> int:
        return self.x_a ^ self.x_b ^ self.x_c

    @property
    def code(self) -> int:
        """3-bit index (x_a x_b x_c), x_a most significant."""
        return (self.x_a << 2) | (self.x_b << 1) | self.x_c


class TripletBatch:
    """Columnar batch of n outcome triplets (uint8 arrays of equal length)."""

    __slots__ = ("x_a", "x_b", "x_c")

    def __init__(self, x_a, x_b, x_c):
        a = np.ascontiguousarray(x_a, dtype=np.uint8)
        b = np.ascontiguousarray(x_b, dtype=np.uint8)
        c = np.ascontiguousarray(x_c, dtype=np.uint8)
        if not (a.ndim == b.ndim == c.ndim == 1):
            raise ValueError("bit columns must be 1-d")
        if not (len(a) == len(b) == len(c)):
            raise ValueError(f"column lengths differ: {len(a)}, {len(b)}, {len(c)}")
        if len(a) == 0:
            raise ValueError("batch must contain at least one triplet")
        for name, col in (("x_a", a), ("x_b", b), ("x_c", c)):
            if col.max(initial=0) > 1:
                raise ValueError(f"{name} contains non-bit values")
        self.x_a, self.x_b, self.x_c = a, b, c

    def __len__(self) -> int:
        return len(self.x_a)

    def __getitem__(self, i: int) -> OutcomeTriplet:
        return OutcomeTriplet(int(self.x_a[i]), int(self.x_b[i]), int(self.x_c[i]))

    def parity(self) -> np.ndarray:
        """Per-round parity bits x_a ^ x_b ^ x_c."""
        return self.x_a ^ self.x_b ^ self.x_c

    def odd_parity_fraction(self) -> float:
        return float(self.parity().mean())

    @classmethod
    def concatenate(cls, batches) -> "TripletBatch":
        return cls(
            np.concatenate([b.x_a for b in batches]),
            np.concatenate([b.x_b for b in batches]),
            np.concatenate([b.x_c for b in batches]),
        )


@dataclass(frozen=True)
class OutcomeDistribution:
    """Probability of each 3-bit outcome (x_a, x_b, x_c).

    ``probabilities[k]`` is the probability of the outcome whose 3-bit
    code is ``k`` (x_a most significant).
    """

    probabilities: np.ndarray = field()

    def __post_init__(self):
        p = np.asarray(self.probabilities, dtype=np.float64)
        if p.shape != (8,):
            raise ValueError(f"expected 8 probabilities, got shape {p.shape}")
        if p.min() < -_NORM_TOL:
            raise ValueError(f"negative probability: {p.min()!r}")
        p = np.clip(p, 0.0, None)
        if abs(float(p.sum()) - 1.0) > _NORM_TOL:
            raise ValueError(f"probabilities sum to {p.sum()!r}, not 1")
        p = p / p.sum()  # absorb last-ulp drift so marginals of exact inputs stay exact
        p.flags.writeable = False
        object.__setattr__(self, "probabilities", p)

    def probability(self, x_a: int, x_b: int, x_c: int) -> float:
        return float(self.probabilities[(x_a << 2) | (x_b << 1) | x_c])

    def _cube(self) -> np.ndarray:
        return self.probabilities.reshape(2, 2, 2)

    def marginal(self, bit: int) -> np.ndarray:
        """p(x_bit = 0), p(x_bit = 1) for bit in {0: x_a, 1: x_b, 2: x_c}."""
        axes = tuple(ax for ax in range(3) if ax != bit)
        return self._cube().sum(axis=axes)

    def pair_marginal(self, bit_i: int, bit_j: int) -> np.ndarray:
        """2x2 joint marginal of two distinct bits, rows indexed by bit_i."""
        if bit_i == bit_j:
            raise ValueError("pair_marginal needs two distinct bits")
        other = ({0, 1, 2} - {bit_i, bit_j}).pop()
        joint = self._cube().sum(axis=other)
        if bit_i > bit_j:
            joint = joint.T
        return joint

    def bit_entropy(self, bit: int) -> float:
        """Shannon entropy of one bit's marginal, in bits."""
        return _entropy_bits(self.marginal(bit))

    def pairwise_mutual_information(self, bit_i: int, bit_j: int) -> float:
        """I(x_i; x_j) of the distribution itself, in bits."""
        joint = self.pair_marginal(bit_i, bit_j)
        return (
            _entropy_bits(joint.sum(axis=1))
            + _entropy_bits(joint.sum(axis=0))
            - _entropy_bits(joint)
        )

    def odd_parity_probability(self) -> float:
        codes = np.arange(8)
        odd = ((codes >> 2) ^ (codes >> 1) ^ codes) & 1
        return float(self.probabilities[odd == 1].sum())


def _entropy_bits(p) -> float:
    p = np.asarray(p, dtype=np.float64).ravel()
    p = p[p > 0.0]
    return float(-(p * np.log2(p)).sum())


def tripartite_state() -> PureState:
    """Three-qubit source state (|000> - |011> + |101> - |110>) / 2.

    Every computational-basis outcome with nonzero amplitude has even
    parity, which is what makes any one output stream erasable from the
    other two.
    """
    amps = np.zeros(8, dtype=np.complex128)
    amps[0b000] = 0.5
    amps[0b011] = -0.5
    amps[0b101] = 0.5
    amps[0b110] = -0.5
    return PureState(3, amps)


def bell_state(kind: str) -> PureState:
    """Two-qubit Bell state: ``phi-`` = (|00>-|11>)/sqrt2, ``psi-`` = (|01>-|10>)/sqrt2."""
    s = 1.0 / math.sqrt(2.0)
    k = kind.strip().lower()
    if k == "phi-":
        amps = [s, 0.0, 0.0, -s]
    elif k == "psi-":
        amps = [0.0, s, -s, 0.0]
    else:
        raise ValueError(f"unknown Bell state kind {kind!r} (expected 'phi-' or 'psi-')")
    return PureState(2, np.array(amps, dtype=np.complex128))


def project_qubit(state: PureState, qubit_index: int, outcome_bit: int):
    """Computational-basis projection of one qubit.

    Returns ``(probability, remainder)`` where ``remainder`` is the
    renormalized state of the other qubits, or ``None`` when the outcome
    has probability 0 (the post-measurement state is then undefined, and
    callers must not invent one).
    """
    if state.dims < 2:
        raise ValueError("projection needs a state of at least 2 qubits")
    if not 0 <= qubit_index < state.dims:
        raise ValueError(f"qubit_index {qubit_index} out of range for {state.dims} qubits")
    if outcome_bit not in (0, 1):
        raise ValueError(f"outcome_bit must be 0 or 1, got {outcome_bit!r}")
    cube = state.amplitudes.reshape((2,) * state.dims)
    kept = np.take(cube, outcome_bit, axis=qubit_index).ravel()
    prob = float(np.sum(np.abs(kept) ** 2))
    if prob <= 0.0:
        return 0.0, None
    return prob, PureState(state.dims - 1, kept / math.sqrt(prob))


def apply_isotropic_noise(state: PureState, params: NoiseParams | float) -> DensityMatrix:
    """Mix a pure state with white noise: rho = V |psi><psi| + (1-V) I/2^n.

    The single parameter V equals both the two-detector fringe visibility
    in the H/V basis (for a Bell-state input) and the factor by which
    every two-point correlation shrinks.
    """
    if not isinstance(params, NoiseParams):
        params = NoiseParams(float(params))
    v = params.visibility
    d = 2**state.dims
    rho = v * state.projector() + (1.0 - v) * np.eye(d) / d
    return DensityMatrix(state.dims, rho)


def _analyzer_ket(theta: float, outcome: int) -> np.ndarray:
    """Linear-polarizer eigenvector at angle theta: outcome 0 passes, 1 is orthogonal."""
    if outcome == 0:
        return np.array([math.cos(theta), math.sin(theta)], dtype=np.complex128)
    return np.array([-math.sin(theta), math.cos(theta)], dtype=np.complex128)


def analyzer_probabilities(rho: DensityMatrix, theta_a: float, theta_b: float) -> np.ndarray:
    """Joint outcome probabilities for two linear analyzers on a 2-qubit state.

    Returns the 4-vector ``p[2*a + b]`` for outcomes (a, b), each analyzer
    projecting onto ``cos(theta)|H> + sin(theta)|V>`` (outcome 0) or its
    orthogonal complement (outcome 1).
    """
    if rho.dims != 2:
        raise ValueError("analyzer_probabilities needs a 2-qubit state")
    probs = np.empty(4)
    for a in (0, 1):
        ka = _analyzer_ket(theta_a, a)
        for b in (0, 1):
            kb = _analyzer_ket(theta_b, b)
            ket = np.kron(ka, kb)
            probs[2 * a + b] = float(np.real(ket.conj() @ rho.entries @ ket))
    return np.clip(probs, 0.0, None)


def correlation(rho: DensityMatrix, theta_a: float, theta_b: float) -> float:
    """Two-analyzer correlation E = p(00) + p(11) - p(01) - p(10), in [-1, 1]."""
    p = analyzer_probabilities(rho, theta_a, theta_b)
    return float(p[0] + p[3] - p[1] - p[2])


# Analyzer settings (a, a', b, b') maximizing S for the phi- Bell state;
# found by grid search, gives S = 2*sqrt(2) exactly at V = 1.
CHSH_OPTIMAL_ANGLES = (0.0, math.pi / 4, -math.pi / 8, -3 * math.pi / 8)


def chsh_value(rho: DensityMatrix, a: float, a_prime: float, b: float, b_prime: float) -> float:
    """CHSH combination S = |E(a,b) - E(a,b') + E(a',b) + E(a',b')|."""
    return abs(
        correlation(rho, a, b)
        - correlation(rho, a, b_prime)
        + correlation(rho, a_prime, b)
        + correlation(rho, a_prime, b_prime)
    )


def outcome_distribution(rho_pair: DensityMatrix, bs_split: float = 0.5) -> OutcomeDistribution:
    """Distribution of (x_a, x_b, x_c) produced by the detection bench.

    ``x_a`` is the idler's path bit at the beam splitter (probability
    ``bs_split`` of path 0).  The photon pair state ``rho_pair`` is
    measured in the H/V basis, giving raw bits (r_b, r_c); ``x_c = r_c``
    and ``x_b = r_b`` on path 0 but ``x_b = 1 - r_b`` on path 1, where the
    second polarizing splitter carries inverted labels.  That label flip
    is what lines the four even-parity outcomes up at probability 1/4
    each for the ideal source.
    """
    if not 0.0 <= bs_split <= 1.0:
        raise ValueError(f"bs_split must be in [0, 1], got {bs_split!r}")
    raw = analyzer_probabilities(rho_pair, 0.0, 0.0)  # H/V basis on both arms
    p = np.zeros(8)
    for x_b in (0, 1):
        for x_c in (0, 1):
            p[(0 << 2) | (x_b << 1) | x_c] = bs_split * raw[2 * x_b + x_c]
            p[(1 << 2) | (x_b << 1) | x_c] = (1.0 - bs_split) * raw[2 * (1 - x_b) + x_c]
    return OutcomeDistribution(p)


def sample_triplets(dist: OutcomeDistribution, n: int, seed: int) -> TripletBatch:
    """Draw n independent triplets from ``dist``; bit-identical per seed."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = derive_rng(seed)
    codes = rng.choice(8, size=n, p=dist.probabilities)
    return TripletBatch((codes >> 2) & 1, (codes >> 1) & 1, codes & 1)
