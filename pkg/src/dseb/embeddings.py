"""Binary embeddings file.

Layout (little-endian): magic ``DSEMB1``; u32 count; u32 dim; u8 tag length
and the branch tag; then per row a u16 id length, the UTF-8 id and ``dim``
float32 values.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import DataError

MAGIC = b"DSEMB1"
BRANCHES = ("full", "demo", "residual")


@dataclass
class Embeddings:
    ids: list[str]
    matrix: np.ndarray  # float32, (count, dim)
    branch: str = "full"

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float32)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != len(self.ids):
            raise ValueError(f"{len(self.ids)} ids but matrix shape {self.matrix.shape}")
        if self.branch not in BRANCHES:
            raise ValueError(f"unknown branch '{self.branch}'")

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def as_dict(self) -> dict[str, np.ndarray]:
        return {u: row.astype(np.float64) for u, row in zip(self.ids, self.matrix)}


def dump_embeddings(emb: Embeddings) -> bytes:
    tag = emb.branch.encode("ascii")
    parts = [MAGIC, struct.pack("<IIB", len(emb.ids), emb.dim, len(tag)), tag]
    rows = emb.matrix.astype("<f4")
    for uid, row in zip(emb.ids, rows):
        raw = uid.encode("utf-8")
        parts += [struct.pack("<H", len(raw)), raw, row.tobytes()]
    return b"".join(parts)


def parse_embeddings(blob: bytes, source: str = "<embeddings>") -> Embeddings:
    if not blob.startswith(MAGIC):
        raise DataError(f"{source}: not an embeddings file (bad magic)")
    try:
        pos = len(MAGIC)
        count, dim, tag_len = struct.unpack_from("<IIB", blob, pos)
        pos += 9
        branch = blob[pos:pos + tag_len].decode("ascii")
        pos += tag_len
        ids, rows = [], np.empty((count, dim), dtype=np.float32)
        for i in range(count):
            (n,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            ids.append(blob[pos:pos + n].decode("utf-8"))
            pos += n
            rows[i] = np.frombuffer(blob, dtype="<f4", count=dim, offset=pos)
            pos += 4 * dim
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise DataError(f"{source}: truncated or corrupt embeddings file ({exc})") from None
    if pos != len(blob):
        raise DataError(f"{source}: {len(blob) - pos} trailing bytes after {count} rows")
    return Embeddings(ids, rows, branch)


def write_embeddings(path, emb: Embeddings) -> None:
    Path(path).write_bytes(dump_embeddings(emb))


def read_embeddings(path) -> Embeddings:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read embeddings {path}: {exc.strerror}") from None
    return parse_embeddings(blob, str(path))
