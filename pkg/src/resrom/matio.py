"""Binary matrix files and plain-text metadata sidecars.

A matrix file is a fixed 24-byte header followed by the payload:

==========  =======  ==========================================
offset      type     meaning
==========  =======  ==========================================
0           4 bytes  magic ``b"ROMX"``
4           u32 LE   format version, currently 1
8           u64 LE   number of rows
16          u64 LE   number of columns
24          f64 LE   payload, column-major
==========  =======  ==========================================

Column-major payload means a file can be produced one column at a time
(`MatrixWriter`) and single columns can be read back without touching
the rest (`read_column`), which keeps ensemble post-processing memory
flat no matter how many time steps a realization holds.
"""

from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"ROMX"
VERSION = 1
HEADER_SIZE = 24

_HEADER = struct.Struct("<4sIQQ")


class MatrixFormatError(ValueError):
    """File is not a well-formed matrix file."""


def _read_header(f, path):
    raw = f.read(HEADER_SIZE)
    if len(raw) != HEADER_SIZE:
        raise MatrixFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, rows, cols = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise MatrixFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise MatrixFormatError(f"{path}: unsupported version {version}")
    return rows, cols


def write_matrix(path, matrix):
    """Write a 2-D float array to ``path``, overwriting any existing file."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2:
        raise ValueError(f"expected a 2-D array, got shape {matrix.shape}")
    rows, cols = matrix.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, rows, cols))
        f.write(np.asfortranarray(matrix).tobytes(order="F"))


def read_matrix(path):
    """Read a whole matrix file into an (rows, cols) float64 array."""
    with open(path, "rb") as f:
        rows, cols = _read_header(f, path)
        payload = f.read()
    expected = rows * cols * 8
    if len(payload) != expected:
        raise MatrixFormatError(
            f"{path}: payload holds {len(payload)} bytes, header promises {expected}"
        )
    data = np.frombuffer(payload, dtype="<f8")
    return data.reshape((rows, cols), order="F").copy()


def read_shape(path):
    """Return (rows, cols) from the header without reading the payload."""
    with open(path, "rb") as f:
        return _read_header(f, path)


def read_column(path, col):
    """Read a single column as a 1-D array via a memory map."""
    rows, cols = read_shape(path)
    if not 0 <= col < cols:
        raise IndexError(f"column {col} out of range for {cols} columns")
    if os.path.getsize(path) != HEADER_SIZE + rows * cols * 8:
        raise MatrixFormatError(f"{path}: file size does not match header")
    mm = np.memmap(path, dtype="<f8", mode="r", offset=HEADER_SIZE,
                   shape=(rows, cols), order="F")
    out = np.array(mm[:, col])
    del mm
    return out


class MatrixWriter:
    """Stream a matrix to disk column by column.

    Shape is declared up front; `close` verifies every promised column
    arrived, so a crashed producer cannot leave a silently short file
    behind with a valid header.

    >>> with MatrixWriter(path, rows=3, cols=2) as w:
    ...     w.append_column(col0)
    ...     w.append_column(col1)
    """

    def __init__(self, path, rows, cols):
        if rows <= 0 or cols <= 0:
            raise ValueError("rows and cols must be positive")
        self.path = path
        self.rows = int(rows)
        self.cols = int(cols)
        self._written = 0
        self._f = open(path, "wb")
        self._f.write(_HEADER.pack(MAGIC, VERSION, self.rows, self.cols))

    def append_column(self, column):
        column = np.asarray(column, dtype=np.float64).reshape(-1)
        if column.size != self.rows:
            raise ValueError(f"column has {column.size} entries, expected {self.rows}")
        if self._written >= self.cols:
            raise ValueError(f"already wrote all {self.cols} columns")
        self._f.write(column.astype("<f8", copy=False).tobytes())
        self._written += 1

    def append_block(self, block):
        block = np.asarray(block, dtype=np.float64)
        if block.ndim != 2:
            raise ValueError("block must be 2-D")
        for j in range(block.shape[1]):
            self.append_column(block[:, j])

    def close(self):
        if self._f is None:
            return
        f, self._f = self._f, None
        f.close()
        if self._written != self.cols:
            raise MatrixFormatError(
                f"{self.path}: wrote {self._written} of {self.cols} columns"
            )

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.close()
        elif self._f is not None:
            f, self._f = self._f, None
            f.close()
        return False


def write_meta(path, mapping):
    """Write a ``key = value`` text sidecar, one entry per line, keys sorted."""
    lines = []
    for key in sorted(mapping):
        value = mapping[key]
        key = str(key).strip()
        if not key or "=" in key or "\n" in key:
            raise ValueError(f"bad metadata key {key!r}")
        text = str(value)
        if "\n" in text:
            raise ValueError(f"metadata value for {key!r} spans lines")
        lines.append(f"{key} = {text}\n")
    with open(path, "w") as f:
        f.writelines(lines)


def read_meta(path):
    """Read a sidecar written by `write_meta` back into a dict of strings."""
    out = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise MatrixFormatError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out
