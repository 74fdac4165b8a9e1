"""Shared binary container layout for on-disk artifacts.

Every binary file written by this package uses the same skeleton:

    magic (8 bytes) | record count (u64 LE) | header length (u32 LE) |
    header JSON (UTF-8, canonical) | fixed-size records

The JSON header is canonical (sorted keys, no whitespace) so that reruns with
identical inputs produce byte-identical files. The record count sits at a
fixed offset so writers can stream records and patch the count afterwards.
"""

import json
import struct

from .errors import CorruptInputError, FormatError

_COUNT_OFF = 8
_COUNT_FMT = "<Q"
_LEN_FMT = "<I"


def encode_header(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_preamble(f, magic: bytes, header: dict, count: int = 0) -> None:
    """Write magic, record count, and JSON header at the current position."""
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    blob = encode_header(header)
    f.write(magic)
    f.write(struct.pack(_COUNT_FMT, count))
    f.write(struct.pack(_LEN_FMT, len(blob)))
    f.write(blob)


def patch_count(f, count: int) -> None:
    """Overwrite the record count of a file opened for binary update."""
    f.seek(_COUNT_OFF)
    f.write(struct.pack(_COUNT_FMT, count))


def read_preamble(f, magic: bytes, kind: str):
    """Read and validate magic, count, and header.

    Returns (header dict, record count, payload byte offset). Raises
    FormatError on a wrong magic and CorruptInputError on a truncated or
    unparsable header.
    """
    got = f.read(8)
    if got != magic:
        raise FormatError(f"not a {kind} file (bad magic {got!r})")
    raw = f.read(8 + 4)
    if len(raw) < 12:
        raise CorruptInputError(f"truncated {kind} header")
    (count,) = struct.unpack(_COUNT_FMT, raw[:8])
    (hlen,) = struct.unpack(_LEN_FMT, raw[8:])
    blob = f.read(hlen)
    if len(blob) != hlen:
        raise CorruptInputError(f"truncated {kind} header")
    try:
        header = json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptInputError(f"unreadable {kind} header: {exc}") from exc
    if not isinstance(header, dict):
        raise CorruptInputError(f"{kind} header is not an object")
    return header, count, 8 + 12 + hlen


def check_payload_size(path_size, payload_off, count, record_size, kind):
    """Verify the file body holds exactly `count` fixed-size records."""
    body = path_size - payload_off
    if body != count * record_size:
        raise CorruptInputError(
            f"{kind} payload is {body} bytes, expected {count} records "
            f"of {record_size} bytes"
        )
