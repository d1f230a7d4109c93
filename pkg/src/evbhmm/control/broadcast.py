"""Broadcast payload codec.

Layout (little endian): uint8 N, uint8 sequence number, 4N+2 float32 entries, 2 zero pad bytes.
"""

import struct
from typing import NamedTuple, Optional

import numpy as np

HEADER = struct.Struct("<BB")
PAD = b"\x00\x00"


class BroadcastDecodeError(Exception):
    """Raised when a payload does not match its header."""
    pass


class Broadcast(NamedTuple):
    u: np.ndarray
    n_bins: int
    sequence: int


def payload_size(n_bins: int) -> int:
    return HEADER.size + 4 * (4 * n_bins + 2) + len(PAD)


def encode_broadcast(u: np.ndarray, n_bins: Optional[int] = None, sequence: int = 0) -> bytes:
    """Serialize a control input; ``sequence`` wraps modulo 256."""
    u = np.asarray(u, dtype=float)
    if n_bins is None:
        n_bins, rem = divmod(len(u) - 2, 4)
        if rem:
            raise ValueError(f"length {len(u)} is not of the form 4N+2")
    if u.shape != (4 * n_bins + 2,):
        raise ValueError(f"control input must have length {4 * n_bins + 2}, got shape {u.shape}")
    if not 1 <= n_bins <= 255:
        raise ValueError(f"n_bins={n_bins} does not fit the header")
    if np.any(u < 0) or np.any(u > 1):
        raise ValueError("control input entries must lie in [0, 1]")
    return HEADER.pack(n_bins, sequence % 256) + u.astype("<f4").tobytes() + PAD


def decode_broadcast(payload: bytes) -> Broadcast:
    """Parse a payload produced by ``encode_broadcast``.

    Raises:
        BroadcastDecodeError: On a truncated payload or a size/header mismatch
    """
    if len(payload) < HEADER.size:
        raise BroadcastDecodeError(f"payload of {len(payload)} bytes has no header")
    n_bins, sequence = HEADER.unpack_from(payload)
    expected = payload_size(n_bins)
    if n_bins < 1 or len(payload) != expected:
        raise BroadcastDecodeError(f"header declares N={n_bins} ({expected} bytes), payload has {len(payload)}")
    body = payload[HEADER.size:len(payload) - len(PAD)]
    u = np.frombuffer(body, dtype="<f4").astype(float)
    return Broadcast(u=u, n_bins=n_bins, sequence=sequence)
