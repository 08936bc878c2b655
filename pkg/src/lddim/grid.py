"""Cell-centred scalar fields on a uniform Cartesian grid, and the LDF2 file format.

Values are stored as an (ny, nx) array, so the flat row-major index of cell
(i, j) is ``p = j * nx + i`` with ``i`` running along x. The domain is
centred on the origin: cell ``i`` has centre ``x = (i + 0.5) * dx - nx * dx / 2``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

LDF2_MAGIC = b"LDF2"
LDF2_VERSION = 1
_HEADER = struct.Struct("<4sIIIdd")


class GridError(ValueError):
    pass


@dataclass(eq=False)
class ScalarField2D:
    nx: int
    ny: int
    dx: float
    dy: float
    values: np.ndarray

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise GridError(f"grid extents must be positive, got nx={self.nx}, ny={self.ny}")
        if not (self.dx > 0 and self.dy > 0):
            raise GridError(f"cell spacing must be positive, got dx={self.dx}, dy={self.dy}")
        values = np.asarray(self.values, dtype=np.float64)
        if values.size != self.nx * self.ny:
            raise GridError(f"expected {self.nx * self.ny} values for a {self.nx}x{self.ny} grid, got {values.size}")
        self.values = values.reshape(self.ny, self.nx)
        if not np.all(np.isfinite(self.values)):
            raise GridError("field contains non-finite values")

    @classmethod
    def like(cls, other: "ScalarField2D", values) -> "ScalarField2D":
        return cls(other.nx, other.ny, other.dx, other.dy, values)

    @classmethod
    def constant(cls, nx: int, ny: int, value: float, dx: float = 1.0, dy: float = 1.0) -> "ScalarField2D":
        return cls(nx, ny, dx, dy, np.full((ny, nx), float(value)))

    @property
    def n(self) -> int:
        return self.nx * self.ny

    def flat(self) -> np.ndarray:
        return self.values.reshape(-1)

    def same_grid(self, other: "ScalarField2D") -> bool:
        return (self.nx, self.ny, self.dx, self.dy) == (other.nx, other.ny, other.dx, other.dy)

    def require_same_grid(self, other: "ScalarField2D", what: str = "fields") -> None:
        if not self.same_grid(other):
            raise GridError(
                f"{what}: grid mismatch ({self.nx}x{self.ny}, d={self.dx},{self.dy}) vs "
                f"({other.nx}x{other.ny}, d={other.dx},{other.dy})"
            )

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        x = (np.arange(self.nx) + 0.5) * self.dx - 0.5 * self.nx * self.dx
        y = (np.arange(self.ny) + 0.5) * self.dy - 0.5 * self.ny * self.dy
        return x, y

    def map(self, fn) -> "ScalarField2D":
        return ScalarField2D.like(self, fn(self.values))


def to_bytes(field: ScalarField2D) -> bytes:
    head = _HEADER.pack(LDF2_MAGIC, LDF2_VERSION, field.nx, field.ny, field.dx, field.dy)
    return head + np.ascontiguousarray(field.values, dtype="<f8").tobytes()


def from_bytes(buf: bytes) -> ScalarField2D:
    if len(buf) < _HEADER.size:
        raise GridError("truncated LDF2 header")
    magic, version, nx, ny, dx, dy = _HEADER.unpack_from(buf)
    if magic != LDF2_MAGIC:
        raise GridError("not an LDF2 file (bad magic)")
    if version != LDF2_VERSION:
        raise GridError(f"unsupported LDF2 version {version}")
    expected = _HEADER.size + 8 * nx * ny
    if len(buf) != expected:
        raise GridError(f"LDF2 size mismatch: expected {expected} bytes, got {len(buf)}")
    values = np.frombuffer(buf, dtype="<f8", offset=_HEADER.size).astype(np.float64)
    return ScalarField2D(nx, ny, dx, dy, values.reshape(ny, nx))


def write_field(path, field: ScalarField2D) -> None:
    Path(path).write_bytes(to_bytes(field))


def read_field(path) -> ScalarField2D:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise GridError(f"cannot read field file {path}: {exc.strerror}") from exc
    return from_bytes(buf)
