"""Binary container used for datasets, checkpoints and generation files.

Layout::

    8 bytes   magic  b"IDFLOW\\x00\\x00"
    8 bytes   little-endian uint64 header length L
    L bytes   UTF-8 JSON header
    ...       little-endian float64 tensor blocks, back to back

The header carries ``format_version`` ("major.minor"), a ``kind`` string,
free-form metadata and a ``tensors`` list of ``{name, shape, offset}``
entries (offsets in bytes from the start of the data section).
"""

import json
import os
import struct
import tempfile

import numpy as np

from .errors import FormatError

MAGIC = b"IDFLOW\x00\x00"
FORMAT_VERSION = "1.0"
_LE_F64 = np.dtype("<f8")


def _major(version):
    try:
        return int(str(version).split(".")[0])
    except ValueError as exc:
        raise FormatError(f"unparseable format_version {version!r}") from exc


def encode(kind, meta, tensors):
    entries = []
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=_LE_F64)
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blob = arr.tobytes()
        blobs.append(blob)
        offset += len(blob)
    header = {"format_version": FORMAT_VERSION, "kind": kind, "meta": meta, "tensors": entries}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + b"".join(blobs)


def decode(data, kind=None):
    if data[:8] != MAGIC:
        raise FormatError("not an idflow container (bad magic)")
    if len(data) < 16:
        raise FormatError("truncated header")
    (hlen,) = struct.unpack("<Q", data[8:16])
    if 16 + hlen > len(data):
        raise FormatError("truncated header")
    try:
        header = json.loads(data[16:16 + hlen].decode("utf-8"))
    except ValueError as exc:
        raise FormatError(f"corrupt header: {exc}") from exc
    if _major(header.get("format_version", "")) != _major(FORMAT_VERSION):
        raise FormatError(f"unsupported format_version {header.get('format_version')!r}")
    if kind is not None and header.get("kind") != kind:
        raise FormatError(f"expected a {kind!r} file, found {header.get('kind')!r}")
    body = memoryview(data)[16 + hlen:]
    tensors = {}
    for e in header["tensors"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        start = e["offset"]
        stop = start + 8 * count
        if stop > len(body):
            raise FormatError(f"tensor {e['name']!r} runs past end of file")
        arr = np.frombuffer(body[start:stop], dtype=_LE_F64).astype(np.float64)
        tensors[e["name"]] = arr.reshape(e["shape"])
    return header, tensors


def write_atomic(path, payload):
    """Write bytes via a temp file in the same directory and rename over ``path``."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(path, kind, meta, tensors):
    write_atomic(path, encode(kind, meta, tensors))


def load(path, kind=None):
    with open(path, "rb") as fh:
        return decode(fh.read(), kind)
