"""Named-array byte container used by checkpoints and dataset records.

Layout of one container:

    [uint64 little-endian: header length in bytes]
    [UTF-8 JSON header]
    [raw array payload]

The header is {"format": <str>, "version": 1, "meta": <json>, "arrays":
[{"name", "shape", "dtype", "offset", "nbytes"}, ...]}. Offsets are relative
to the start of the payload; arrays are C-order little-endian.
"""

import json
import struct

import numpy as np

FORMAT_VERSION = 1
_LEN = struct.Struct("<Q")


def pack_arrays(arrays: dict, meta=None, fmt="swarmcoord-arrays") -> bytes:
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape),
                        "dtype": arr.dtype.str, "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"format": fmt, "version": FORMAT_VERSION,
                         "meta": meta or {}, "arrays": entries}).encode()
    return _LEN.pack(len(header)) + header + b"".join(chunks)


def unpack_arrays(blob: bytes, expect_format=None):
    """Inverse of pack_arrays; returns (arrays dict, meta dict)."""
    (header_len,) = _LEN.unpack_from(blob, 0)
    header = json.loads(blob[_LEN.size:_LEN.size + header_len].decode())
    if header.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported container version {header.get('version')}")
    if expect_format is not None and header.get("format") != expect_format:
        raise ValueError(f"expected {expect_format}, found {header.get('format')}")
    payload = blob[_LEN.size + header_len:]
    arrays = {}
    for entry in header["arrays"]:
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"]))
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return arrays, header["meta"]


def write_container(path, arrays, meta=None, fmt="swarmcoord-arrays"):
    with open(path, "wb") as fh:
        fh.write(pack_arrays(arrays, meta=meta, fmt=fmt))


def read_container(path, expect_format=None):
    with open(path, "rb") as fh:
        return unpack_arrays(fh.read(), expect_format=expect_format)
