import hashlib
from pathlib import Path

import numpy as np
import pytest

from pvqrng import bitio

DATA = Path(__file__).parent / "data"

GOLDEN_PVQR_HEX = "5056515201000c00000000000000a5c0"
GOLDEN_PVQR_SHA256 = "905082f71e9ec673efd98588b9cb8cb125256224e3f93591e270c772a6af8c56"


class TestBitStream:
    def test_pack_msb_first(self):
        s = bitio.BitStream.from_bits([1, 0, 1, 0, 0, 1, 0, 1])
        assert s.data == b"\xa5"
        assert s.n_bits == 8

    def test_partial_byte_zero_padded(self):
        s = bitio.BitStream.from_bits([1, 1, 1])
        assert s.data == b"\xe0"
        assert s.n_bits == 3

    def test_round_trip_random(self):
        rng = np.random.default_rng(5)
        for n in (1, 7, 8, 9, 64, 1000):
            bits = rng.integers(0, 2, n).astype(np.uint8)
            s = bitio.BitStream.from_bits(bits)
            np.testing.assert_array_equal(s.bits(), bits)

    def test_empty_stream_allowed(self):
        s = bitio.BitStream(b"", 0)
        assert len(s) == 0
        assert s.bits().size == 0

    def test_nonzero_padding_rejected(self):
        with pytest.raises(ValueError, match="padding"):
            bitio.BitStream(b"\xe1", 3)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            bitio.BitStream(b"\x00\x00", 3)

    def test_non_bit_values_rejected(self):
        with pytest.raises(ValueError):
            bitio.BitStream.from_bits([0, 1, 2])


class TestDigest:
    def test_depends_on_bits_and_length(self):
        a = bitio.BitStream.from_bits([1, 0, 1])
        b = bitio.BitStream.from_bits([1, 0, 1, 0])
        assert bitio.stream_digest(a) != bitio.stream_digest(b)
        assert bitio.stream_digest(a) == bitio.stream_digest(bitio.BitStream.from_bits([1, 0, 1]))
        assert len(bitio.stream_digest(a)) == 32


class TestPvqrCodec:
    def test_encode_layout(self):
        s = bitio.BitStream.from_bits([1, 0, 1, 0, 0, 1, 0, 1, 1, 1, 0, 0])
        blob = bitio.encode_stream(bitio.TAG_A, s)
        assert blob.hex() == GOLDEN_PVQR_HEX
        assert blob[:4] == b"PVQR"
        assert blob[4] == 1  # version
        assert blob[5] == 0  # tag A
        assert int.from_bytes(blob[6:14], "little") == 12

    def test_decode_round_trip(self):
        rng = np.random.default_rng(2)
        for tag in (bitio.TAG_A, bitio.TAG_B, bitio.TAG_C):
            bits = rng.integers(0, 2, 77).astype(np.uint8)
            blob = bitio.encode_stream(tag, bitio.BitStream.from_bits(bits))
            tag2, s2 = bitio.decode_stream(blob)
            assert tag2 == tag
            np.testing.assert_array_equal(s2.bits(), bits)
            assert bitio.encode_stream(tag2, s2) == blob

    def test_golden_file_round_trips_bit_exact(self):
        blob = (DATA / "golden_a.pvqr").read_bytes()
        assert hashlib.sha256(blob).hexdigest() == GOLDEN_PVQR_SHA256
        tag, stream = bitio.decode_stream(blob)
        assert tag == bitio.TAG_A
        assert stream.n_bits == 12
        np.testing.assert_array_equal(stream.bits(), [1, 0, 1, 0, 0, 1, 0, 1, 1, 1, 0, 0])
        assert bitio.encode_stream(tag, stream) == blob

    def test_empty_bit_count_decodes(self):
        blob = bitio.encode_stream(bitio.TAG_A, bitio.BitStream(b"", 0))
        tag, stream = bitio.decode_stream(blob)
        assert stream.n_bits == 0

    def test_bad_magic(self):
        blob = bytearray((DATA / "golden_a.pvqr").read_bytes())
        blob[0] = ord("X")
        with pytest.raises(bitio.FormatError, match="magic"):
            bitio.decode_stream(bytes(blob))

    def test_bad_version(self):
        blob = bytearray((DATA / "golden_a.pvqr").read_bytes())
        blob[4] = 9
        with pytest.raises(bitio.FormatError, match="version"):
            bitio.decode_stream(bytes(blob))

    def test_bad_tag(self):
        blob = bytearray((DATA / "golden_a.pvqr").read_bytes())
        blob[5] = 7
        with pytest.raises(bitio.FormatError, match="tag"):
            bitio.decode_stream(bytes(blob))

    def test_truncated_payload(self):
        blob = (DATA / "golden_a.pvqr").read_bytes()
        with pytest.raises(bitio.FormatError):
            bitio.decode_stream(blob[:-1])

    def test_trailing_garbage(self):
        blob = (DATA / "golden_a.pvqr").read_bytes() + b"\x00"
        with pytest.raises(bitio.FormatError):
            bitio.decode_stream(blob)

    def test_nonzero_padding_rejected(self):
        blob = bytearray((DATA / "golden_a.pvqr").read_bytes())
        blob[-1] |= 0x01  # set a padding bit beyond the 12 declared bits
        with pytest.raises(bitio.FormatError, match="padding"):
            bitio.decode_stream(bytes(blob))

    def test_file_round_trip(self, tmp_path):
        bits = bitio.BitStream.from_bits([0, 1] * 40)
        path = tmp_path / "s.pvqr"
        bitio.write_stream_file(path, bitio.TAG_B, bits)
        tag, back = bitio.read_stream_file(path)
        assert tag == bitio.TAG_B
        assert back == bits


class TestSidecar:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "run.meta"
        bitio.write_sidecar(path, {"n_raw": 100, "qber": 0.015, "seed": 7, "config_hash": "abc"})
        back = bitio.read_sidecar(path)
        assert back == {"n_raw": "100", "qber": "0.015", "seed": "7", "config_hash": "abc"}

    def test_keys_sorted_for_determinism(self, tmp_path):
        path = tmp_path / "run.meta"
        bitio.write_sidecar(path, {"b": 1, "a": 2})
        assert path.read_text().splitlines() == ["a=2", "b=1"]

    def test_comments_and_blank_lines_skipped(self, tmp_path):
        path = tmp_path / "run.meta"
        path.write_text("# comment\n\nkey=value\n")
        assert bitio.read_sidecar(path) == {"key": "value"}

    def test_malformed_line_rejected(self, tmp_path):
        path = tmp_path / "run.meta"
        path.write_text("not a pair\n")
        with pytest.raises(bitio.FormatError):
            bitio.read_sidecar(path)
