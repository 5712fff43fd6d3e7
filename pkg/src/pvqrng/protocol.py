"""User-side protocol logic: sifting, submission payloads, final output.

The generation stage produces three correlated bit columns whose per-round
XOR is zero unless an error occurred.  Sifting removes the violating
rounds and reports their fraction as the quantum bit error rate (QBER).
Only the A stream ever leaves the user: the submission payload is a pure
function of it.  After the verifier's verdict the session either emits
the B stream (with the QBER) and seals or deletes C, or aborts and wipes
everything.

The sifted streams obey ``xp_a ^ xp_b ^ xp_c == 0`` position by position,
which is exactly why two of them must stay private: any two recover the
third.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bitio import TAG_A, TAG_C, BitStream, encode_stream
from .quantum import TripletBatch

__all__ = [
    "SessionStateError",
    "SiftedStreams",
    "SessionPhase",
    "Disposal",
    "FinalOutput",
    "Session",
    "sift",
]


class SessionStateError(RuntimeError):
    """An operation was attempted in the wrong session phase."""


class SessionPhase(enum.Enum):
    GENERATED = "Generated"
    SIFTED = "Sifted"
    SUBMITTED = "Submitted"
    PASSED = "Passed"
    FAILED = "Failed"
    FINALIZED = "Finalized"
    ABORTED = "Aborted"


class Disposal(enum.Enum):
    STORE_SEALED = "store_sealed"
    DELETE = "delete"


@dataclass
class SiftedStreams:
    """Parity-clean bit columns plus the error rate they were cleaned at.

    ``m`` (the common length) may be zero when every round violated
    parity; downstream submission then refuses to proceed.
    """

    xp_a: np.ndarray
    xp_b: np.ndarray
    xp_c: np.ndarray
    qber: float
    n_raw: int

    def __post_init__(self):
        a = np.ascontiguousarray(self.xp_a, dtype=np.uint8)
        b = np.ascontiguousarray(self.xp_b, dtype=np.uint8)
        c = np.ascontiguousarray(self.xp_c, dtype=np.uint8)
        if not (len(a) == len(b) == len(c)):
            raise ValueError("sifted columns must have equal length")
        if np.any((a ^ b ^ c) != 0):
            raise ValueError("sifted streams violate the parity condition")
        if not 0.0 <= self.qber <= 1.0:
            raise ValueError(f"qber must be in [0, 1], got {self.qber!r}")
        if len(a) != self.n_raw - round(self.qber * self.n_raw):
            raise ValueError("length inconsistent with n_raw and qber")
        self.xp_a, self.xp_b, self.xp_c = a, b, c

    @property
    def m(self) -> int:
        return len(self.xp_a)


def sift(batch: TripletBatch) -> SiftedStreams:
    """Drop every triplet whose XOR parity is odd; report the dropped fraction.

    Surviving triplets keep their original order.  Idempotent: sifting an
    already-clean batch removes nothing.
    """
    parity = batch.parity()
    keep = parity == 0
    n = len(batch)
    qber = float((~keep).sum()) / n
    return SiftedStreams(
        xp_a=batch.x_a[keep].copy(),
        xp_b=batch.x_b[keep].copy(),
        xp_c=batch.x_c[keep].copy(),
        qber=qber,
        n_raw=n,
    )


@dataclass(frozen=True)
class FinalOutput:
    """What the protocol hands back: the private stream and QBER, or a failure."""

    passed: bool
    bits: BitStream | None = None
    qber: float | None = None


def _wipe(arr: np.ndarray | None) -> None:
    if arr is not None and arr.flags.writeable:
        arr[:] = 0


class Session:
    """Single-owner state machine for one generation-to-output run.

    Phases move strictly ``Generated -> Sifted -> Submitted`` and then
    through ``Passed -> Finalized`` or ``Failed -> Aborted``; any other
    order raises :class:`SessionStateError`.  There is no code path that
    reveals the B stream without a passing verdict.
    """

    def __init__(self, batch: TripletBatch):
        self._batch: TripletBatch | None = batch
        self._sifted: SiftedStreams | None = None
        self._payload: bytes | None = None
        self.phase = SessionPhase.GENERATED

    def _expect(self, phase: SessionPhase, op: str) -> None:
        if self.phase is not phase:
            raise SessionStateError(f"{op} requires phase {phase.value}, session is {self.phase.value}")

    @property
    def sifted(self) -> SiftedStreams | None:
        return self._sifted

    def sift(self) -> SiftedStreams:
        self._expect(SessionPhase.GENERATED, "sift")
        self._sifted = sift(self._batch)
        self._batch = None
        self.phase = SessionPhase.SIFTED
        return self._sifted

    def prepare_submission(self) -> bytes:
        """Encode the public stream for the verifier.

        The payload is a pure function of ``xp_a`` (and its length): no
        byte of it depends on the B or C streams.
        """
        self._expect(SessionPhase.SIFTED, "prepare_submission")
        if self._sifted.m == 0:
            raise SessionStateError("nothing to submit: sifting removed every triplet")
        payload = encode_stream(TAG_A, BitStream.from_bits(self._sifted.xp_a))
        self._payload = payload
        self.phase = SessionPhase.SUBMITTED
        return payload

    @property
    def payload(self) -> bytes | None:
        return self._payload

    def finalize(self, verdict_passed: bool, disposal: Disposal, seal_path=None) -> FinalOutput:
        """Consume the verifier's verdict and close the session.

        Pass: emit the B stream and the QBER; the C stream is written to
        ``seal_path`` (``Disposal.STORE_SEALED``) or zero-wiped in memory
        (``Disposal.DELETE``).  Fail: wipe all three streams and emit a
        failure token.  A session can only be finalized once.
        """
        if self.phase in (SessionPhase.FINALIZED, SessionPhase.ABORTED):
            raise SessionStateError("session already finalized")
        self._expect(SessionPhase.SUBMITTED, "finalize")
        if not isinstance(disposal, Disposal):
            disposal = Disposal(disposal)
        s = self._sifted

        if not verdict_passed:
            self.phase = SessionPhase.FAILED
            for col in (s.xp_a, s.xp_b, s.xp_c):
                _wipe(col)
            self._sifted = None
            self.phase = SessionPhase.ABORTED
            return FinalOutput(passed=False)

        self.phase = SessionPhase.PASSED
        output = FinalOutput(passed=True, bits=BitStream.from_bits(s.xp_b), qber=s.qber)
        if disposal is Disposal.STORE_SEALED:
            if seal_path is None:
                raise ValueError("store_sealed disposal needs a seal_path")
            Path(seal_path).write_bytes(encode_stream(TAG_C, BitStream.from_bits(s.xp_c)))
        _wipe(s.xp_c)
        s.xp_c = None
        self.phase = SessionPhase.FINALIZED
        return output
