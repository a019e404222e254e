"""Uniform periodic grids, field snapshots and the PDSEQ1 sequence file.

Layout convention used by every module: field data is a ``(rows, cols,
channels)`` float64 array. Column index ``j`` runs along ``x`` and row index
``i`` runs along ``y``, so ``data[i, j, c]`` is channel ``c`` at
``(x_min + j*dx, x_min + i*dx)``. Channel 0 is ``u`` and channel 1 is ``v``.
The grid excludes the duplicated periodic endpoint: ``n`` points cover
``[x_min, x_max)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import ConfigError, FormatError, NumericError, ShapeError

SEQ_MAGIC = b"PDSEQ1"
# magic(6) + reserved(2) + T, H, W, C as u16 + t0, dt as f64
_SEQ_HEADER = struct.Struct("<6s2x4H2d")


@dataclass(frozen=True)
class Grid:
    n: int
    x_min: float
    x_max: float

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 4:
            raise ConfigError(f"grid needs n >= 4 points per side, got {self.n}")
        if not (np.isfinite(self.x_min) and np.isfinite(self.x_max)) or self.x_max <= self.x_min:
            raise ConfigError(f"degenerate grid bounds [{self.x_min}, {self.x_max}]")

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / self.n

    @property
    def length(self) -> float:
        return self.x_max - self.x_min

    @property
    def coords(self) -> np.ndarray:
        return self.x_min + np.arange(self.n) * self.dx

    def wrap(self, i):
        return ((i % self.n) + self.n) % self.n

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(X, Y)`` arrays of shape ``(n, n)`` in row/col layout."""
        c = self.coords
        return np.meshgrid(c, c, indexing="xy")


def make_grid(n: int, x_min: float, x_max: float) -> Grid:
    return Grid(int(n), float(x_min), float(x_max))


@dataclass(frozen=True)
class Field:
    grid: Grid
    data: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or data.shape[:2] != (self.grid.n, self.grid.n):
            raise ShapeError(
                f"field data shape {data.shape} does not match grid {self.grid.n}x{self.grid.n}"
            )
        if not np.all(np.isfinite(data)):
            raise NumericError("field contains non-finite values")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "t", float(self.t))

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def with_data(self, data: np.ndarray, t: float | None = None) -> "Field":
        return Field(self.grid, data, self.t if t is None else t)


@dataclass(frozen=True)
class FieldSequence:
    fields: tuple[Field, ...]
    dt: float
    t0: float = field(init=False)

    def __post_init__(self):
        fields = tuple(self.fields)
        if not fields:
            raise ShapeError("a field sequence needs at least one field")
        if not self.dt > 0:
            raise ConfigError(f"sequence step must be positive, got {self.dt}")
        g, c, t0 = fields[0].grid, fields[0].channels, fields[0].t
        for k, f in enumerate(fields):
            if f.grid != g or f.channels != c:
                raise ShapeError(f"field {k} does not share grid/channels with field 0")
            if abs(f.t - (t0 + k * self.dt)) > 1e-9 * (1.0 + abs(f.t)):
                raise ShapeError(f"field {k} timestamp {f.t} is off the uniform step {self.dt}")
        object.__setattr__(self, "fields", fields)
        object.__setattr__(self, "t0", fields[0].t)

    @classmethod
    def from_array(cls, grid: Grid, arr: np.ndarray, dt: float, t0: float = 0.0) -> "FieldSequence":
        """Build from a ``(T, H, W, C)`` array; timestamps are ``t0 + k*dt``."""
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim != 4:
            raise ShapeError(f"expected a (T, H, W, C) array, got shape {arr.shape}")
        return cls(tuple(Field(grid, arr[k], t0 + k * dt) for k in range(arr.shape[0])), dt)

    def __len__(self) -> int:
        return len(self.fields)

    def __getitem__(self, k) -> Field:
        return self.fields[k]

    @property
    def grid(self) -> Grid:
        return self.fields[0].grid

    @property
    def times(self) -> np.ndarray:
        return np.array([f.t for f in self.fields])

    def stack(self) -> np.ndarray:
        return np.stack([f.data for f in self.fields])


def sample_field(grid: Grid, f: Callable, channels: int | None = None, t: float = 0.0) -> Field:
    """Evaluate ``f(x, y)`` on the grid.

    ``f`` is called once with the ``(n, n)`` coordinate arrays from
    :meth:`Grid.mesh`, so it must be numpy-vectorized. It may return one array
    (replicated over ``channels``, default 1) or a sequence of arrays, one per
    channel.
    """
    X, Y = grid.mesh()
    out = f(X, Y)
    if isinstance(out, (list, tuple)):
        chans = [np.broadcast_to(np.asarray(o, dtype=np.float64), X.shape) for o in out]
    else:
        chans = [np.broadcast_to(np.asarray(out, dtype=np.float64), X.shape)] * (channels or 1)
    data = np.stack(chans, axis=-1)
    bad = np.argwhere(~np.isfinite(data))
    if bad.size:
        i, j, c = bad[0]
        raise NumericError(
            f"non-finite sample at grid point (row {i}, col {j}, channel {c}), "
            f"x={float(X[i, j])!r}, y={float(Y[i, j])!r}"
        )
    return Field(grid, data, t)


def write_sequence(seq: FieldSequence, path) -> None:
    Path(path).write_bytes(sequence_bytes(seq))


def read_sequence(path, x_min: float = 0.0, x_max: float = 1.0) -> FieldSequence:
    """Read a PDSEQ1 file.

    The format stores no physical bounds, so the grid is rebuilt from
    ``x_min``/``x_max``.
    """
    raw = Path(path).read_bytes()
    return decode_sequence(raw, x_min, x_max)


def decode_sequence(raw: bytes, x_min: float = 0.0, x_max: float = 1.0) -> FieldSequence:
    if len(raw) < _SEQ_HEADER.size:
        raise FormatError(f"truncated header: {len(raw)} of {_SEQ_HEADER.size} bytes", len(raw))
    magic, T, H, W, C, t0, dt = _SEQ_HEADER.unpack_from(raw, 0)
    if magic != SEQ_MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if raw[6:8] != b"\x00\x00":
        raise FormatError("reserved header bytes are not zero", 6)
    if H != W:
        raise FormatError(f"dimension mismatch: non-square field {H}x{W}", 10)
    if T == 0 or C == 0:
        raise FormatError(f"dimension mismatch: empty sequence T={T}, C={C}", 8)
    expected = T * H * W * C * 8
    payload = raw[_SEQ_HEADER.size :]
    if len(payload) < expected:
        raise FormatError(
            f"truncated payload: {len(payload)} of {expected} bytes",
            _SEQ_HEADER.size + len(payload),
        )
    if len(payload) > expected:
        raise FormatError("trailing bytes after payload", _SEQ_HEADER.size + expected)
    arr = np.frombuffer(payload, dtype="<f8").reshape(T, H, W, C).astype(np.float64)
    grid = make_grid(H, x_min, x_max)
    fields = tuple(Field(grid, arr[k], t0 + k * dt) for k in range(T))
    return FieldSequence(fields, dt)


def sequence_bytes(seq: FieldSequence) -> bytes:
    arr = seq.stack()
    T, H, W, C = arr.shape
    if max(arr.shape) > 0xFFFF:
        raise ShapeError(f"sequence dimensions {arr.shape} exceed the u16 header fields")
    header = _SEQ_HEADER.pack(SEQ_MAGIC, T, H, W, C, seq.t0, seq.dt)
    return header + arr.astype("<f8", copy=False).tobytes(order="C")
