"""Shared binary container layout used by all on-disk formats:

    magic (8 bytes) | u32 LE header length | UTF-8 JSON header |
    raw payload | u32 LE CRC32 of everything before it

Headers are serialized with sorted keys and compact separators so identical
inputs produce byte-identical files.
"""

import json
import struct
import zlib

from .errors import FormatError

MIN_LEN = 8 + 4 + 4


def encode(magic: bytes, header: dict, payload: bytes) -> bytes:
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = magic + struct.pack("<I", len(hdr)) + hdr + payload
    return body + struct.pack("<I", zlib.crc32(body))


def check_magic(data: bytes, magic: bytes):
    """Reject wrong families outright and same-family version mismatches
    with a version error. The family is the magic minus trailing digits."""
    if len(data) < MIN_LEN:
        raise FormatError("file too short to be a valid container")
    got = data[:8]
    if got == magic:
        return
    family = magic.rstrip(b"0123456789")
    if got[:len(family)] == family:
        raise FormatError(
            f"unknown version {got[len(family):].decode(errors='replace')!r} "
            f"for format {family.decode()}")
    raise FormatError(f"bad magic {got!r}, expected {magic.decode()}")


def check_crc(data: bytes):
    (stored,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) != stored:
        raise FormatError("checksum mismatch (file corrupt or truncated)")


def parse(data: bytes, magic: bytes, crc_first=True):
    """Split a container into (header dict, payload bytes)."""
    check_magic(data, magic)
    if crc_first:
        check_crc(data)
    (hlen,) = struct.unpack("<I", data[8:12])
    if 12 + hlen + 4 > len(data):
        raise FormatError("header length exceeds file size")
    try:
        header = json.loads(data[12:12 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"malformed JSON header: {exc}") from exc
    return header, data[12 + hlen:-4]
