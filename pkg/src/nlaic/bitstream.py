"""Versioned ``.nlc`` container: fixed header, hyper segment, main segment.

Version 1 layout, all integers big-endian::

    offset size field
    0      4    magic b"NLC1"
    4      1    version (1)
    5      2    width  (original, before padding)
    7      2    height (original, before padding)
    9      2    latent channels C
    11     1    quality index q
    12     1    context variant code
    13     1    latent alphabet bound L
    14     1    hyper alphabet bound
    15     1    bottom padding rows
    16     1    right padding columns
    17     4    model fingerprint (CRC32 of architecture and weights)
    21     4    hyper segment length in bytes
    25     ..   hyper payload, then main payload up to end of file
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass

from .entropy import CONTEXT_VARIANTS

MAGIC = b"NLC1"
VERSION = 1
_HEADER = struct.Struct(">4sBHHHBBBBBBII")
HEADER_SIZE = _HEADER.size


class BitstreamError(ValueError):
    """Malformed or incompatible container."""


@dataclass(frozen=True)
class BitstreamHeader:
    width: int
    height: int
    channels: int
    quality: int
    variant: str
    bound: int
    hyper_bound: int
    pad_h: int = 0
    pad_w: int = 0
    fingerprint: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def serialize_bitstream(header: BitstreamHeader, hyper: bytes, main: bytes) -> bytes:
    if header.variant not in CONTEXT_VARIANTS:
        raise BitstreamError(f"unknown context variant {header.variant!r}")
    limits = {
        "width": 0xFFFF, "height": 0xFFFF, "channels": 0xFFFF, "quality": 0xFF,
        "bound": 0xFF, "hyper_bound": 0xFF, "pad_h": 0xFF, "pad_w": 0xFF, "fingerprint": 0xFFFFFFFF,
    }
    for name, hi in limits.items():
        value = getattr(header, name)
        if not 0 <= value <= hi:
            raise BitstreamError(f"header field {name}={value} outside [0, {hi}]")
    packed = _HEADER.pack(
        MAGIC, VERSION, header.width, header.height, header.channels, header.quality,
        CONTEXT_VARIANTS.index(header.variant), header.bound, header.hyper_bound,
        header.pad_h, header.pad_w, header.fingerprint, len(hyper),
    )
    return packed + bytes(hyper) + bytes(main)


def parse_bitstream(data: bytes) -> tuple[BitstreamHeader, bytes, bytes]:
    """Split a container into ``(header, hyper payload, main payload)``."""
    data = bytes(data)
    if len(data) < HEADER_SIZE:
        raise BitstreamError(f"container of {len(data)} bytes is shorter than the {HEADER_SIZE}-byte header")
    (magic, version, width, height, channels, quality, variant, bound, hyper_bound,
     pad_h, pad_w, fingerprint, hyper_len) = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BitstreamError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise BitstreamError(f"unsupported container version {version}")
    if variant >= len(CONTEXT_VARIANTS):
        raise BitstreamError(f"unknown context variant code {variant}")
    if HEADER_SIZE + hyper_len > len(data):
        raise BitstreamError(f"hyper segment of {hyper_len} bytes overruns the {len(data)}-byte container")
    header = BitstreamHeader(width, height, channels, quality, CONTEXT_VARIANTS[variant], bound,
                             hyper_bound, pad_h, pad_w, fingerprint)
    hyper = data[HEADER_SIZE : HEADER_SIZE + hyper_len]
    main = data[HEADER_SIZE + hyper_len :]
    return header, hyper, main
