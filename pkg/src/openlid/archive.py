"""Binary feature archive with a text index for random access.

Layout (little-endian): magic ``LIDF``, version u32, then per record rows u32,
cols u32, row-major f32 payload. The sidecar index (``<archive>.idx``) holds
one ``id TAB offset TAB rows TAB cols`` line per record sorted by id, where
offset is the byte position of the record's rows field.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import CorruptFileError, FormatError
from .features import FeatureMatrix

MAGIC = b"LIDF"
VERSION = 1


def index_path(path) -> Path:
    return Path(str(path) + ".idx")


def write_archive(features: Mapping[str, FeatureMatrix], path) -> Path:
    """Write all matrices (ids sorted) and the index; returns the index path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    index_lines = []
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        for uid in sorted(features):
            mat = features[uid]
            data = np.ascontiguousarray(mat.data, dtype="<f4")
            rows, cols = data.shape
            offset = fh.tell()
            fh.write(struct.pack("<II", rows, cols))
            fh.write(data.tobytes())
            index_lines.append(f"{uid}\t{offset}\t{rows}\t{cols}")
    idx = index_path(path)
    idx.write_text("".join(line + "\n" for line in index_lines), encoding="utf-8", newline="\n")
    return idx


def read_index(path) -> dict[str, tuple[int, int, int]]:
    idx = index_path(path)
    if not idx.is_file():
        raise FormatError(f"missing archive index: {idx}")
    entries = {}
    for line in idx.read_text(encoding="utf-8").splitlines():
        uid, offset, rows, cols = line.split("\t")
        entries[uid] = (int(offset), int(rows), int(cols))
    return entries


def read_archive(path, ids: Sequence[str] | None = None) -> dict[str, FeatureMatrix]:
    """Load the requested matrices (all when ids is None) via index offsets."""
    path = Path(path)
    entries = read_index(path)
    if ids is None:
        wanted = sorted(entries)
    else:
        unknown = [uid for uid in ids if uid not in entries]
        if unknown:
            raise KeyError(f"archive {path} has no record for id {unknown[0]!r}")
        wanted = sorted(set(ids))
    out = {}
    with open(path, "rb") as fh:
        head = fh.read(8)
        if len(head) < 8 or head[:4] != MAGIC:
            raise FormatError(f"{path}: bad archive magic")
        (version,) = struct.unpack("<I", head[4:])
        if version != VERSION:
            raise FormatError(f"{path}: unsupported archive version {version}")
        for uid in wanted:
            offset, rows, cols = entries[uid]
            fh.seek(offset)
            header = fh.read(8)
            if len(header) < 8:
                raise CorruptFileError(f"{path}: record {uid} header truncated")
            file_rows, file_cols = struct.unpack("<II", header)
            if (file_rows, file_cols) != (rows, cols):
                raise CorruptFileError(f"{path}: record {uid} disagrees with index on shape")
            payload = fh.read(4 * rows * cols)
            if len(payload) < 4 * rows * cols:
                raise CorruptFileError(f"{path}: record {uid} payload truncated")
            data = np.frombuffer(payload, dtype="<f4").reshape(rows, cols)
            out[uid] = FeatureMatrix(data.copy())
    return out
