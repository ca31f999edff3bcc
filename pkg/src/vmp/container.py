"""Named-tensor binary container.

Layout: magic ``VMP1``; entry count (u32 LE); per entry a u16 name length,
the UTF-8 name, a dtype code (u8), rank (u8), dims (u32 each), then the raw
little-endian payload. dtype 0 is float64; dtype 1 is raw bytes, used for
JSON metadata entries.
"""

import json
import struct

import numpy as np

from vmp.errors import ContractError

MAGIC = b"VMP1"
F64, BYTES = 0, 1


def encode(entries):
    """Serialize a name -> array (or bytes) mapping, preserving insertion order."""
    out = [MAGIC, struct.pack("<I", len(entries))]
    for name, value in entries.items():
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise ContractError(f"entry name too long: {name[:40]}...")
        out.append(struct.pack("<H", len(raw_name)) + raw_name)
        if isinstance(value, (bytes, bytearray)):
            out.append(struct.pack("<BBI", BYTES, 1, len(value)))
            out.append(bytes(value))
            continue
        arr = np.asarray(value, dtype="<f8")
        if arr.ndim > 255:
            raise ContractError("rank too large")
        out.append(struct.pack("<BB", F64, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(out)


def decode(blob):
    if blob[:4] != MAGIC:
        raise ContractError("not a VMP1 container")
    (count,) = struct.unpack_from("<I", blob, 4)
    pos, entries = 8, {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + nlen].decode("utf-8")
            pos += nlen
            dtype, rank = struct.unpack_from("<BB", blob, pos)
            pos += 2
            dims = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            if dtype == F64:
                n = int(np.prod(dims, dtype=np.int64))
                if pos + 8 * n > len(blob):
                    raise ContractError(f"truncated payload for {name!r}")
                entries[name] = np.frombuffer(blob, "<f8", n, pos).reshape(dims).astype(np.float64)
                pos += 8 * n
            elif dtype == BYTES:
                if pos + dims[0] > len(blob):
                    raise ContractError(f"truncated payload for {name!r}")
                entries[name] = blob[pos:pos + dims[0]]
                pos += dims[0]
            else:
                raise ContractError(f"unknown dtype code {dtype} for {name!r}")
    except struct.error as exc:
        raise ContractError(f"truncated container: {exc}") from exc
    if pos != len(blob):
        raise ContractError("trailing bytes after last entry")
    return entries


def save(path, entries):
    with open(path, "wb") as fh:
        fh.write(encode(entries))


def load(path):
    with open(path, "rb") as fh:
        return decode(fh.read())


def meta_entry(obj):
    return json.dumps(obj, sort_keys=True).encode("utf-8")


def read_meta(entries, name="meta"):
    if name not in entries:
        raise ContractError(f"container has no {name!r} entry")
    return json.loads(entries[name].decode("utf-8"))
