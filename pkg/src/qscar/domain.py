"""Grids, wavefunctions and the QWF binary series format."""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

QWF_MAGIC = b"QWF1"
QWF_VERSION = 1
# magic, version, nx, ny, x_min, x_max, y_min, y_max, t0, dt, n_frames
_QWF_HEADER = struct.Struct("<4sIII6dQ")
QWF_HEADER_SIZE = _QWF_HEADER.size
_MAX_DIM = 1 << 16


class GridMismatchError(ValueError):
    pass


class QWFError(ValueError):
    """Base class for malformed QWF files."""


class BadMagicError(QWFError):
    pass


class TruncatedFileError(QWFError):
    pass


class DimensionError(QWFError):
    pass


def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class Grid:
    """Periodic rectangular grid; the upper bound of each axis is excluded."""

    nx: int
    ny: int
    x_min: float
    x_max: float
    y_min: float
    y_max: float

    def __post_init__(self):
        for n in (self.nx, self.ny):
            if n < 8 or not _is_pow2(n):
                raise ValueError(f"grid sizes must be powers of two >= 8, got {n}")
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ValueError("grid bounds must satisfy max > min")

    @classmethod
    def square(cls, n: int = 128, half_width: float = 6.0) -> "Grid":
        return cls(n, n, -half_width, half_width, -half_width, half_width)

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / self.nx

    @property
    def dy(self) -> float:
        return (self.y_max - self.y_min) / self.ny

    @property
    def cell_area(self) -> float:
        return self.dx * self.dy

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nx, self.ny)

    @property
    def size(self) -> int:
        return self.nx * self.ny

    @cached_property
    def x(self) -> np.ndarray:
        return self.x_min + self.dx * np.arange(self.nx)

    @cached_property
    def y(self) -> np.ndarray:
        return self.y_min + self.dy * np.arange(self.ny)

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        return np.meshgrid(self.x, self.y, indexing="ij")

    @cached_property
    def kx(self) -> np.ndarray:
        return 2 * np.pi * np.fft.fftfreq(self.nx, d=self.dx)

    @cached_property
    def ky(self) -> np.ndarray:
        return 2 * np.pi * np.fft.fftfreq(self.ny, d=self.dy)

    def k_squared(self) -> np.ndarray:
        return self.kx[:, None] ** 2 + self.ky[None, :] ** 2

    def is_square_symmetric(self) -> bool:
        """True when the grid maps onto itself under the C4v operations."""
        return (self.nx == self.ny and np.isclose(self.x_min, -self.x_max)
                and np.isclose(self.y_min, -self.y_max)
                and np.isclose(self.x_min, self.y_min))

    def to_dict(self) -> dict:
        return {"nx": self.nx, "ny": self.ny, "x_min": self.x_min, "x_max": self.x_max,
                "y_min": self.y_min, "y_max": self.y_max}

    @classmethod
    def from_dict(cls, d: dict) -> "Grid":
        if "half_width" in d:
            n = int(d.get("n", d.get("nx", 128)))
            return cls.square(n, float(d["half_width"]))
        return cls(int(d["nx"]), int(d["ny"]), float(d["x_min"]), float(d["x_max"]),
                   float(d["y_min"]), float(d["y_max"]))


@dataclass(frozen=True, eq=False)
class Wavefunction:
    grid: Grid
    amplitudes: np.ndarray
    label: str = ""

    def __post_init__(self):
        a = np.array(self.amplitudes, dtype=np.complex128)
        if a.shape != self.grid.shape:
            raise ValueError(f"amplitude shape {a.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(a)):
            raise ValueError("wavefunction amplitudes must be finite")
        a.setflags(write=False)
        object.__setattr__(self, "amplitudes", a)

    def norm(self) -> float:
        return float(np.sqrt(np.sum(np.abs(self.amplitudes) ** 2) * self.grid.cell_area))

    def density(self) -> np.ndarray:
        return np.abs(self.amplitudes) ** 2

    def with_amplitudes(self, amplitudes: np.ndarray, label: str | None = None) -> "Wavefunction":
        return Wavefunction(self.grid, amplitudes, self.label if label is None else label)

    def __mul__(self, alpha):
        return self.with_amplitudes(alpha * self.amplitudes)

    __rmul__ = __mul__

    def __add__(self, other: "Wavefunction") -> "Wavefunction":
        _check_grid(self.grid, other.grid)
        return self.with_amplitudes(self.amplitudes + other.amplitudes)

    def __sub__(self, other: "Wavefunction") -> "Wavefunction":
        _check_grid(self.grid, other.grid)
        return self.with_amplitudes(self.amplitudes - other.amplitudes)


@dataclass(eq=False)
class WaveSeries:
    """Frames sampled every ``dt`` starting at ``t0``.

    ``frames`` is an array of shape (n_frames, nx, ny); it may be a read-only
    memory map when loaded from disk.
    """

    grid: Grid
    dt: float
    frames: np.ndarray
    t0: float = 0.0
    label: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("series dt must be positive")
        if not isinstance(self.frames, np.ndarray):
            self.frames = np.asarray(self.frames, dtype=np.complex128)
        if self.frames.ndim == 2 and self.frames.shape == self.grid.shape:
            self.frames = self.frames[None]
        if self.frames.ndim != 3 or self.frames.shape[1:] != self.grid.shape:
            if not (self.frames.ndim == 3 and self.frames.shape[0] == 0):
                raise ValueError(f"frames shape {self.frames.shape} does not match grid {self.grid.shape}")
            self.frames = np.zeros((0,) + self.grid.shape, dtype=np.complex128)

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(len(self))

    def frame(self, k: int) -> Wavefunction:
        return Wavefunction(self.grid, self.frames[k], f"{self.label}[{k}]")

    def flat(self) -> np.ndarray:
        """Frames as an (n_frames, nx*ny) matrix, row-major per frame."""
        return self.frames.reshape(len(self), -1)


def _check_grid(a: Grid, b: Grid):
    if a != b:
        raise GridMismatchError(f"grid mismatch: {a} vs {b}")


def inner_product(a: Wavefunction, b: Wavefunction) -> complex:
    """<a|b> by the rectangle rule, conjugating the first argument."""
    _check_grid(a.grid, b.grid)
    return complex(np.vdot(a.amplitudes, b.amplitudes) * a.grid.cell_area)


def normalize(psi: Wavefunction) -> Wavefunction:
    n = psi.norm()
    if not n > 0:
        raise ValueError("cannot normalize a zero-norm wavefunction")
    return psi.with_amplitudes(psi.amplitudes / n)


def edge_density(psi: Wavefunction) -> float:
    """Largest |psi|^2 on the outermost ring of grid points."""
    d = psi.density()
    return float(max(d[0].max(), d[-1].max(), d[:, 0].max(), d[:, -1].max()))


def c4v_images(a: np.ndarray) -> list[np.ndarray]:
    """The eight images of a field under the symmetry group of the square.

    Reflections act on periodic indices as i -> -i mod n, which is exact on a
    grid symmetric about the origin with the upper bound excluded.
    """
    def flip(b, axis):
        return np.roll(np.flip(b, axis=axis), 1, axis=axis)

    fx = flip(a, 0)
    imgs = [a, fx, flip(a, 1), flip(fx, 1)]
    return imgs + [b.T for b in imgs]


def project_a1(a: np.ndarray) -> np.ndarray:
    """Average over the group images: the totally symmetric component."""
    return sum(c4v_images(a)) / 8.0


def _pack_header(grid: Grid, t0: float, dt: float, n_frames: int) -> bytes:
    return _QWF_HEADER.pack(QWF_MAGIC, QWF_VERSION, grid.nx, grid.ny, grid.x_min, grid.x_max,
                            grid.y_min, grid.y_max, t0, dt, n_frames)


class QWFWriter:
    """Streams frames to a QWF file; the frame count is patched on close."""

    def __init__(self, path, grid: Grid, dt: float, t0: float = 0.0):
        self.path = os.fspath(path)
        self.grid, self.dt, self.t0 = grid, dt, t0
        self.n_frames = 0
        self._fh = open(self.path, "wb")
        self._fh.write(_pack_header(grid, t0, dt, 0))

    def write(self, frame: np.ndarray):
        a = np.ascontiguousarray(frame, dtype="<c16")
        if a.shape != self.grid.shape:
            raise ValueError(f"frame shape {a.shape} does not match grid {self.grid.shape}")
        self._fh.write(a.tobytes())
        self.n_frames += 1

    def close(self):
        if self._fh.closed:
            return
        self._fh.seek(0)
        self._fh.write(_pack_header(self.grid, self.t0, self.dt, self.n_frames))
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_series(path, series: WaveSeries) -> None:
    with QWFWriter(path, series.grid, series.dt, series.t0) as w:
        for frame in series.frames:
            w.write(frame)


def write_wavefunction(path, psi: Wavefunction) -> None:
    write_series(path, WaveSeries(psi.grid, 1.0, psi.amplitudes[None], label=psi.label))


def read_series(path, mmap: bool = False) -> WaveSeries:
    size = os.path.getsize(path)
    with open(path, "rb") as fh:
        raw = fh.read(QWF_HEADER_SIZE)
    if len(raw) < 4 or raw[:4] != QWF_MAGIC:
        raise BadMagicError(f"{path}: not a QWF file (bad magic)")
    if len(raw) < QWF_HEADER_SIZE:
        raise TruncatedFileError(f"{path}: header truncated")
    _, version, nx, ny, x0, x1, y0, y1, t0, dt, n_frames = _QWF_HEADER.unpack(raw)
    if version != QWF_VERSION:
        raise QWFError(f"{path}: unsupported QWF version {version}")
    if nx > _MAX_DIM or ny > _MAX_DIM or n_frames > (1 << 40):
        raise DimensionError(f"{path}: dimensions {nx}x{ny}x{n_frames} out of range")
    try:
        grid = Grid(nx, ny, x0, x1, y0, y1)
    except ValueError as exc:
        raise DimensionError(f"{path}: invalid grid in header: {exc}") from exc
    expected = QWF_HEADER_SIZE + n_frames * nx * ny * 16
    if size < expected:
        raise TruncatedFileError(f"{path}: expected {expected} bytes, found {size}")
    shape = (n_frames, nx, ny)
    if mmap and n_frames > 0:
        frames = np.memmap(path, dtype="<c16", mode="r", offset=QWF_HEADER_SIZE, shape=shape)
    else:
        frames = np.fromfile(path, dtype="<c16", count=n_frames * nx * ny,
                             offset=QWF_HEADER_SIZE).reshape(shape).astype(np.complex128)
    return WaveSeries(grid, dt, frames, t0, label=os.path.basename(os.fspath(path)))


def read_wavefunction(path, index: int = 0) -> Wavefunction:
    s = read_series(path, mmap=True)
    return Wavefunction(s.grid, np.array(s.frames[index]), s.label)
