"""GBT1 binary tensor files and directory/zip member bundles.

A GBT1 file is the 4-byte magic ``GBT1``, a little-endian u32 order N, N
little-endian u64 extents, then the float64 values (little-endian,
row-major). There is no padding and no checksum.
"""

from __future__ import annotations

import io
import json
import os
import struct
import zipfile
from pathlib import Path

import numpy as np

from .errors import ArchiveError

MAGIC = b"GBT1"
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


def encode_gbt(t) -> bytes:
    t = np.ascontiguousarray(t, dtype="<f8")
    if t.ndim < 1:
        raise ValueError("GBT1 cannot store a zero-order tensor")
    head = MAGIC + struct.pack("<I", t.ndim) + struct.pack(f"<{t.ndim}Q", *t.shape)
    return head + t.tobytes(order="C")


def decode_gbt(buf: bytes, *, name="<bytes>") -> np.ndarray:
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise ArchiveError(f"{name}: not a GBT1 file")
    (order,) = struct.unpack_from("<I", buf, 4)
    if order < 1:
        raise ArchiveError(f"{name}: order must be at least 1")
    head = 8 + 8 * order
    if len(buf) < head:
        raise ArchiveError(f"{name}: truncated header")
    shape = struct.unpack_from(f"<{order}Q", buf, 8)
    if any(d < 1 for d in shape):
        raise ArchiveError(f"{name}: empty extent in shape {shape}")
    count = int(np.prod(shape, dtype=object))
    if len(buf) != head + 8 * count:
        raise ArchiveError(
            f"{name}: expected {count} values for shape {shape}, found {(len(buf) - head) / 8:g}"
        )
    data = np.frombuffer(buf, dtype="<f8", offset=head).astype(np.float64).reshape(shape)
    if not np.all(np.isfinite(data)):
        raise ArchiveError(f"{name}: non-finite values")
    return data


def write_gbt(path, t) -> None:
    Path(path).write_bytes(encode_gbt(t))


def read_gbt(path) -> np.ndarray:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise ArchiveError(f"cannot read {path}: {exc}") from exc
    return decode_gbt(buf, name=str(path))


def canonical_json(obj) -> bytes:
    return (json.dumps(obj, sort_keys=True, indent=2) + "\n").encode()


def write_members(path, members: dict[str, bytes]) -> None:
    """Write named members to a directory, or to a zip if ``path`` ends in ``.zip``.

    Zip members get a fixed timestamp so repeated writes are byte-identical.
    """
    path = Path(path)
    if path.suffix == ".zip":
        path.parent.mkdir(parents=True, exist_ok=True)
        with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
            for name in sorted(members):
                info = zipfile.ZipInfo(name, date_time=_ZIP_EPOCH)
                info.compress_type = zipfile.ZIP_DEFLATED
                info.external_attr = 0o644 << 16
                zf.writestr(info, members[name])
        return
    path.mkdir(parents=True, exist_ok=True)
    for name, data in members.items():
        (path / name).write_bytes(data)


def read_members(path) -> dict[str, bytes]:
    path = Path(path)
    if path.is_dir():
        return {p.name: p.read_bytes() for p in sorted(path.iterdir()) if p.is_file()}
    if zipfile.is_zipfile(path):
        with zipfile.ZipFile(path) as zf:
            return {name: zf.read(name) for name in zf.namelist()}
    if not path.exists():
        raise ArchiveError(f"{path}: no such archive")
    raise ArchiveError(f"{path}: neither a directory nor a zip archive")


def load_json_member(members, name, where) -> dict:
    if name not in members:
        raise ArchiveError(f"{where}: missing {name}")
    try:
        return json.load(io.BytesIO(members[name]))
    except ValueError as exc:
        raise ArchiveError(f"{where}: {name} is not valid JSON: {exc}") from exc


def load_gbt_member(members, name, where) -> np.ndarray:
    if name not in members:
        raise ArchiveError(f"{where}: missing {name}")
    return decode_gbt(members[name], name=os.path.join(str(where), name))
