"""Public-verifier role: a separate process that tests submitted bits.

Wire protocol (one session per TCP connection)::

    frame := magic "PVQV" | version (1) | frame_type (1) |
             payload_len (4, little-endian) | payload

    client -> HELLO            server -> HELLO (ack) or ERROR
    client -> SUBMIT (PVQR)    server -> REPORT or ERROR, then close

ERROR payload is one code byte plus a UTF-8 message.  Codes: 1 version
mismatch, 2 truncated or malformed frame, 3 undersized stream, 4 bad
submission payload, 5 protocol order violation.

The REPORT payload binds the verdict to a SHA-256 digest of the exact
submitted bits and embeds the full battery report; the offline file mode
produces byte-identical REPORT payloads for the same bits and config.
"""

from __future__ import annotations

import socket
import socketserver
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path

from .bitio import BitStream, FormatError, decode_stream, encode_stream, read_stream_file, stream_digest
from .stats import BatteryConfig, BatteryReport, parse_report_text, render_report, run_battery

__all__ = [
    "FRAME_HELLO",
    "FRAME_SUBMIT",
    "FRAME_REPORT",
    "FRAME_ERROR",
    "ERR_VERSION",
    "ERR_TRUNCATED",
    "ERR_UNDERSIZED",
    "ERR_BAD_PAYLOAD",
    "ERR_ORDER",
    "Frame",
    "Verdict",
    "VerifierError",
    "TransportError",
    "UndersizedStreamError",
    "VerifierConfig",
    "VerifierServer",
    "encode_frame",
    "decode_frame",
    "encode_report_payload",
    "parse_report_payload",
    "serve",
    "submit",
    "verify_file",
    "parse_endpoint",
]

PVQV_MAGIC = b"PVQV"
PVQV_VERSION = 1
_FRAME_HEADER = struct.Struct("<4sBBI")
_MAX_PAYLOAD = 64 * 1024 * 1024  # sanity cap against memory bombs

FRAME_HELLO = 1
FRAME_SUBMIT = 2
FRAME_REPORT = 3
FRAME_ERROR = 4
_FRAME_TYPES = {FRAME_HELLO, FRAME_SUBMIT, FRAME_REPORT, FRAME_ERROR}

ERR_VERSION = 1
ERR_TRUNCATED = 2
ERR_UNDERSIZED = 3
ERR_BAD_PAYLOAD = 4
ERR_ORDER = 5

REPORT_PAYLOAD_FORMAT = "pvqv-report v1"


class VerifierError(RuntimeError):
    """The peer answered with an ERROR frame."""

    def __init__(self, code: int, message: str):
        super().__init__(f"verifier error {code}: {message}")
        self.code = code
        self.message = message


class TransportError(RuntimeError):
    """Connection-level failure (refused, reset, truncated peer)."""


class UndersizedStreamError(ValueError):
    """The submitted stream is shorter than the verifier's minimum."""


@dataclass(frozen=True)
class Frame:
    version: int
    frame_type: int
    payload: bytes

    def __post_init__(self):
        if self.frame_type not in _FRAME_TYPES:
            raise ValueError(f"unknown frame type {self.frame_type}")
        if len(self.payload) > _MAX_PAYLOAD:
            raise ValueError("payload exceeds size cap")


def encode_frame(frame: Frame) -> bytes:
    return _FRAME_HEADER.pack(PVQV_MAGIC, frame.version, frame.frame_type, len(frame.payload)) + frame.payload


def decode_frame(blob: bytes) -> Frame:
    """Parse one complete frame from bytes; raises FormatError on any defect."""
    if len(blob) < _FRAME_HEADER.size:
        raise FormatError(f"frame too short ({len(blob)} bytes)")
    magic, version, ftype, plen = _FRAME_HEADER.unpack_from(blob)
    if magic != PVQV_MAGIC:
        raise FormatError(f"bad frame magic {magic!r}")
    if ftype not in _FRAME_TYPES:
        raise FormatError(f"unknown frame type {ftype}")
    if plen > _MAX_PAYLOAD:
        raise FormatError("declared payload exceeds size cap")
    payload = blob[_FRAME_HEADER.size :]
    if len(payload) != plen:
        raise FormatError(f"payload length {len(payload)} does not match declared {plen}")
    return Frame(version, ftype, payload)


@dataclass(frozen=True)
class Verdict:
    """Verifier decision bound to the digest of the tested bits."""

    decision: str
    report: BatteryReport
    stream_digest: bytes

    def __post_init__(self):
        if self.decision not in ("Pass", "Fail"):
            raise ValueError(f"decision must be 'Pass' or 'Fail', got {self.decision!r}")
        if len(self.stream_digest) != 32:
            raise ValueError("stream_digest must be 32 bytes")
        if self.decision != self.report.decision:
            raise ValueError("decision inconsistent with the battery verdict policy")

    @property
    def passed(self) -> bool:
        return self.decision == "Pass"


def encode_report_payload(verdict: Verdict) -> bytes:
    text = (
        f"# {REPORT_PAYLOAD_FORMAT}\n"
        f"decision={verdict.decision}\n"
        f"stream_digest={verdict.stream_digest.hex()}\n"
    ) + render_report(verdict.report)
    return text.encode("ascii")


def parse_report_payload(payload: bytes) -> Verdict:
    try:
        text = payload.decode("ascii")
    except UnicodeDecodeError as exc:
        raise FormatError("report payload is not ASCII") from exc
    lines = text.split("\n", 3)
    if len(lines) < 4 or lines[0] != f"# {REPORT_PAYLOAD_FORMAT}":
        raise FormatError("not a verdict report payload")
    if not lines[1].startswith("decision=") or not lines[2].startswith("stream_digest="):
        raise FormatError("verdict header lines missing")
    decision = lines[1][len("decision=") :]
    digest = bytes.fromhex(lines[2][len("stream_digest=") :])
    try:
        report = parse_report_text(lines[3])
    except (ValueError, KeyError) as exc:
        raise FormatError(f"bad battery report: {exc}") from exc
    return Verdict(decision=decision, report=report, stream_digest=digest)


def _verdict_for(stream: BitStream, config: BatteryConfig) -> Verdict:
    report = run_battery(stream.bits(), config)
    return Verdict(decision=report.decision, report=report, stream_digest=stream_digest(stream))


@dataclass
class VerifierConfig:
    """Server-side knobs: the battery to run and whether to keep submissions."""

    battery: BatteryConfig = field(default_factory=BatteryConfig)
    retain_dir: Path | None = None


def _recv_exact(sock: socket.socket, n: int, trace: bytearray | None = None) -> bytes:
    chunks = bytearray()
    while len(chunks) < n:
        block = sock.recv(n - len(chunks))
        if not block:
            raise TransportError(f"connection closed after {len(chunks)} of {n} bytes")
        chunks.extend(block)
    data = bytes(chunks)
    if trace is not None:
        trace.extend(data)
    return data


def read_frame(sock: socket.socket, trace: bytearray | None = None) -> Frame:
    """Read one frame off a socket; TransportError on early close."""
    header = _recv_exact(sock, _FRAME_HEADER.size, trace)
    magic, version, ftype, plen = _FRAME_HEADER.unpack(header)
    if magic != PVQV_MAGIC:
        raise FormatError(f"bad frame magic {magic!r}")
    if ftype not in _FRAME_TYPES:
        raise FormatError(f"unknown frame type {ftype}")
    if plen > _MAX_PAYLOAD:
        raise FormatError("declared payload exceeds size cap")
    payload = _recv_exact(sock, plen, trace) if plen else b""
    return Frame(version, ftype, payload)


def send_frame(sock: socket.socket, frame: Frame, trace: bytearray | None = None) -> None:
    data = encode_frame(frame)
    sock.sendall(data)
    if trace is not None:
        trace.extend(data)


class _SessionHandler(socketserver.BaseRequestHandler):
    def _error(self, code: int, message: str) -> None:
        payload = bytes([code]) + message.encode("utf-8")
        try:
            send_frame(self.request, Frame(PVQV_VERSION, FRAME_ERROR, payload))
        except OSError:
            pass

    def handle(self):
        config: VerifierConfig = self.server.config
        try:
            hello = read_frame(self.request)
        except (FormatError, TransportError) as exc:
            self._error(ERR_TRUNCATED, str(exc))
            return
        if hello.frame_type != FRAME_HELLO:
            self._error(ERR_ORDER, f"expected HELLO, got frame type {hello.frame_type}")
            return
        if hello.version != PVQV_VERSION:
            self._error(ERR_VERSION, f"unsupported version {hello.version}")
            return
        try:
            send_frame(self.request, Frame(PVQV_VERSION, FRAME_HELLO, b""))
            submit_frame = read_frame(self.request)
        except (FormatError, TransportError) as exc:
            self._error(ERR_TRUNCATED, str(exc))
            return
        if submit_frame.frame_type != FRAME_SUBMIT:
            self._error(ERR_ORDER, f"expected SUBMIT, got frame type {submit_frame.frame_type}")
            return
        try:
            _tag, stream = decode_stream(submit_frame.payload)
        except FormatError as exc:
            self._error(ERR_BAD_PAYLOAD, str(exc))
            return
        if stream.n_bits < config.battery.min_bits:
            self._error(ERR_UNDERSIZED, f"need >= {config.battery.min_bits} bits, got {stream.n_bits}")
            return
        verdict = _verdict_for(stream, config.battery)
        if config.retain_dir is not None:
            retain = Path(config.retain_dir)
            retain.mkdir(parents=True, exist_ok=True)
            (retain / f"{verdict.stream_digest.hex()}.pvqr").write_bytes(submit_frame.payload)
        try:
            send_frame(self.request, Frame(PVQV_VERSION, FRAME_REPORT, encode_report_payload(verdict)))
        except OSError:
            pass


class VerifierServer(socketserver.ThreadingTCPServer):
    """Threaded one-shot-session server; each connection is independent."""

    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address: tuple[str, int], config: VerifierConfig | None = None):
        self.config = config or VerifierConfig()
        super().__init__(address, _SessionHandler)

    @property
    def endpoint(self) -> tuple[str, int]:
        return self.socket.getsockname()[:2]

    def serve_in_background(self) -> threading.Thread:
        thread = threading.Thread(target=self.serve_forever, daemon=True)
        thread.start()
        return thread


def parse_endpoint(endpoint) -> tuple[str, int]:
    if isinstance(endpoint, tuple):
        return endpoint[0], int(endpoint[1])
    host, _, port = str(endpoint).rpartition(":")
    if not host:
        raise ValueError(f"endpoint must be host:port, got {endpoint!r}")
    return host, int(port)


def serve(listen_endpoint, config: VerifierConfig | None = None) -> None:
    """Run the verifier service until interrupted (blocking)."""
    server = VerifierServer(parse_endpoint(listen_endpoint), config)
    with server:
        server.serve_forever()


def submit(endpoint, payload: bytes, timeout: float = 30.0, trace: bytearray | None = None) -> Verdict:
    """One verification session: HELLO, SUBMIT the PVQR payload, read REPORT.

    ``trace``, when given, accumulates every byte sent and received (used
    to audit that nothing but the public stream crosses the wire).  The
    returned verdict's digest is checked against the submitted bits.
    """
    try:
        _tag, sent_stream = decode_stream(payload)
    except FormatError as exc:
        raise FormatError(f"submission payload is not valid PVQR: {exc}") from exc
    host, port = parse_endpoint(endpoint)
    try:
        with socket.create_connection((host, port), timeout=timeout) as sock:
            send_frame(sock, Frame(PVQV_VERSION, FRAME_HELLO, b""), trace)
            ack = read_frame(sock, trace)
            if ack.frame_type == FRAME_ERROR:
                raise VerifierError(ack.payload[0], ack.payload[1:].decode("utf-8", "replace"))
            if ack.frame_type != FRAME_HELLO:
                raise FormatError(f"expected HELLO ack, got frame type {ack.frame_type}")
            send_frame(sock, Frame(PVQV_VERSION, FRAME_SUBMIT, payload), trace)
            answer = read_frame(sock, trace)
    except OSError as exc:
        raise TransportError(f"connection to {host}:{port} failed: {exc}") from exc
    if answer.frame_type == FRAME_ERROR:
        if not answer.payload:
            raise FormatError("ERROR frame without a code")
        raise VerifierError(answer.payload[0], answer.payload[1:].decode("utf-8", "replace"))
    if answer.frame_type != FRAME_REPORT:
        raise FormatError(f"expected REPORT, got frame type {answer.frame_type}")
    verdict = parse_report_payload(answer.payload)
    if verdict.stream_digest != stream_digest(sent_stream):
        raise FormatError("verdict digest does not match the submitted bits")
    return verdict


def verify_file(path, config: BatteryConfig | None = None) -> Verdict:
    """Offline mode: run the same battery on a PVQR file.

    Produces a verdict whose serialized report is byte-identical to what
    the networked path returns for the same bits and config.
    """
    config = config or BatteryConfig()
    _tag, stream = read_stream_file(path)
    if stream.n_bits < config.min_bits:
        raise UndersizedStreamError(f"need >= {config.min_bits} bits, got {stream.n_bits}")
    return _verdict_for(stream, config)
