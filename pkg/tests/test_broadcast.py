"""Tests for the broadcast payload codec."""

import numpy as np
import pytest

from evbhmm.control.broadcast import BroadcastDecodeError, decode_broadcast, encode_broadcast, payload_size


def test_payload_size_fits_one_message():
    assert payload_size(3) == 60
    assert len(encode_broadcast(np.zeros(14))) == 60


def test_zero_input_encodes_to_zero_body():
    payload = encode_broadcast(np.zeros(14), 3, sequence=9)
    assert payload[:2] == bytes([3, 9])
    assert payload[2:] == bytes(58)


def test_round_trip_within_float32():
    u = np.random.default_rng(0).uniform(size=14)
    message = decode_broadcast(encode_broadcast(u, 3, sequence=5))
    np.testing.assert_allclose(message.u, u, atol=1e-7)
    assert message.n_bins == 3
    assert message.sequence == 5


def test_sequence_wraps():
    assert decode_broadcast(encode_broadcast(np.zeros(6), 1, sequence=300)).sequence == 44


def test_encode_rejects_invalid_input():
    with pytest.raises(ValueError, match="4N\\+2"):
        encode_broadcast(np.zeros(13))
    with pytest.raises(ValueError, match="length 14"):
        encode_broadcast(np.zeros(10), 3)
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        encode_broadcast(np.full(14, 1.2), 3)


def test_decode_rejects_truncated_payload():
    payload = encode_broadcast(np.zeros(14), 3)
    with pytest.raises(BroadcastDecodeError, match="payload has 59"):
        decode_broadcast(payload[:-1])
    with pytest.raises(BroadcastDecodeError, match="no header"):
        decode_broadcast(b"\x03")


def test_decode_rejects_header_mismatch():
    payload = bytearray(encode_broadcast(np.zeros(14), 3))
    payload[0] = 2
    with pytest.raises(BroadcastDecodeError, match="N=2"):
        decode_broadcast(bytes(payload))
