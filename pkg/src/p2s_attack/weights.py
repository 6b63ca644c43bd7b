"""Binary weight file: magic, JSON header, little-endian float64 blob.

Layout::

    offset 0   4 bytes   magic b"P2SW"
    offset 4   4 bytes   uint32 LE, length H of the header in bytes
    offset 8   H bytes   UTF-8 JSON header
    offset 8+H           float64 LE values of every array, C order, in header order

Header keys: ``format`` ("p2s-weights"), ``version`` (1), ``role``
("victim" or "field"), ``arrays`` (list of ``{"name", "shape"}``) and
``meta`` (free-form JSON object describing the model).
"""

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"P2SW"
FORMAT_NAME = "p2s-weights"
FORMAT_VERSION = 1


def dumps(arrays, role, meta=None):
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "role": role,
        "arrays": [{"name": name, "shape": list(np.shape(a))} for name, a in arrays],
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays)
    return MAGIC + struct.pack("<I", len(hbytes)) + hbytes + blob


def loads(data, role=None):
    """Parse bytes into (header, {name: array}); validates everything it can."""
    if len(data) < 8 or data[:4] != MAGIC:
        raise FormatError("not a p2s weight file (bad magic)")
    (hlen,) = struct.unpack("<I", data[4:8])
    if len(data) < 8 + hlen:
        raise FormatError("truncated header")
    try:
        header = json.loads(data[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt header: {exc}") from None
    if header.get("format") != FORMAT_NAME or header.get("version") != FORMAT_VERSION:
        raise FormatError(f"unsupported format/version {header.get('format')!r}/{header.get('version')!r}")
    if role is not None and header.get("role") != role:
        raise FormatError(f"expected role {role!r}, file has {header.get('role')!r}")
    blob = data[8 + hlen :]
    sizes = [int(np.prod(spec["shape"], dtype=np.int64)) for spec in header["arrays"]]
    if len(blob) != 8 * sum(sizes):
        raise FormatError(f"blob has {len(blob)} bytes, header implies {8 * sum(sizes)}")
    flat = np.frombuffer(blob, dtype="<f8").astype(np.float64)
    arrays, pos = {}, 0
    for spec, size in zip(header["arrays"], sizes):
        arrays[spec["name"]] = flat[pos : pos + size].reshape(spec["shape"])
        pos += size
    return header, arrays


def atomic_write_bytes(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(path, arrays, role, meta=None):
    atomic_write_bytes(path, dumps(arrays, role, meta))


def load(path, role=None):
    return loads(Path(path).read_bytes(), role)
