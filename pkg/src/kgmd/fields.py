"""Periodic grids, spectrally sampled fields, and their file formats.

A :class:`Grid` is a uniform tensor-product grid on a periodic box; it owns
the wavenumbers used for exact differentiation of resolved modes.  A
:class:`Field` is a block of values on grid x snapshot-times carrying enough
metadata for norms and metrics.  :class:`TrigInterpolant` evaluates a
grid-sampled periodic function (and its first two derivatives) at arbitrary
points through its truncated Fourier series.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import StructuralError

Array = np.ndarray


@dataclass(frozen=True)
class Grid:
    """Uniform periodic grid; one (points, interval) pair per dimension."""

    shape: tuple
    intervals: tuple

    def __post_init__(self):
        if len(self.shape) != len(self.intervals):
            raise StructuralError("one interval per grid dimension required")
        for n in self.shape:
            if n < 8 or (n & (n - 1)) != 0:
                raise StructuralError("grid sizes must be powers of two >= 8")
        for a, b in self.intervals:
            if not b > a:
                raise StructuralError("grid intervals must be nonempty")

    @property
    def dim(self) -> int:
        return len(self.shape)

    @property
    def lengths(self) -> tuple:
        return tuple(b - a for a, b in self.intervals)

    @property
    def spacings(self) -> tuple:
        return tuple(length / n for length, n in zip(self.lengths, self.shape))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacings))

    def axis(self, d: int) -> Array:
        a, _ = self.intervals[d]
        n = self.shape[d]
        return a + self.spacings[d] * np.arange(n)

    def meshgrid(self) -> list:
        return np.meshgrid(*[self.axis(d) for d in range(self.dim)], indexing="ij")

    def points(self) -> Array:
        """All grid points, row-major, as (n_points, dim)."""
        mesh = self.meshgrid()
        return np.stack([m.ravel() for m in mesh], axis=1)

    def wavenumbers(self, d: int) -> Array:
        """k_j = 2 pi j / L in FFT ordering."""
        n = self.shape[d]
        return 2.0 * np.pi * np.fft.fftfreq(n, d=1.0 / n) / self.lengths[d]

    def wavenumber_mesh(self) -> list:
        return np.meshgrid(*[self.wavenumbers(d) for d in range(self.dim)],
                           indexing="ij")

    def laplacian_symbol(self) -> Array:
        """-|k|^2 over the grid, FFT ordering."""
        ks = self.wavenumber_mesh()
        return -sum(k * k for k in ks)

    def derivative(self, values: Array, d: int, order: int = 1) -> Array:
        """Spectral derivative along dimension d (exact on resolved modes).

        The Nyquist mode is zeroed for odd orders, as usual for real data.
        """
        k = self.wavenumbers(d)
        n = self.shape[d]
        sym = (1j * k) ** order
        if order % 2 == 1:
            sym = sym.copy()
            sym[n // 2] = 0.0
        shape = [1] * self.dim
        shape[d] = n
        hat = np.fft.fft(values, axis=d) * sym.reshape(shape)
        out = np.fft.ifft(hat, axis=d)
        return out.real if np.isrealobj(values) else out

    def laplacian(self, values: Array) -> Array:
        hat = np.fft.fftn(values) * self.laplacian_symbol()
        out = np.fft.ifftn(hat)
        return out.real if np.isrealobj(values) else out

    def l2_norm(self, values: Array) -> float:
        return float(np.sqrt(np.sum(np.abs(values) ** 2) * self.cell_volume))

    def h1_norm(self, values: Array) -> float:
        """(||f||^2 + sum_d ||df/dx_d||^2)^(1/2), derivatives spectral."""
        total = np.sum(np.abs(values) ** 2)
        for d in range(self.dim):
            total += np.sum(np.abs(self.derivative(values, d)) ** 2)
        return float(np.sqrt(total * self.cell_volume))


@dataclass
class Field:
    """Values on snapshot-times x grid, with the grid riding along."""

    values: Array
    times: Array
    grid: Grid

    def __post_init__(self):
        self.values = np.asarray(self.values)
        self.times = np.asarray(self.times, dtype=np.float64)
        expected = (self.times.shape[0],) + self.grid.shape
        if self.values.shape != expected:
            raise StructuralError(
                f"field shape {self.values.shape} does not match "
                f"times x grid {expected}")

    def same_layout(self, other: "Field") -> bool:
        return (self.values.shape == other.values.shape
                and np.array_equal(self.times, other.times)
                and self.grid == other.grid)


def require_same_layout(a: Field, b: Field):
    if not a.same_layout(b):
        raise StructuralError("fields live on different grids or snapshot times")


class TrigInterpolant:
    """Truncated Fourier series of a grid-sampled periodic function.

    Evaluates values and first/second derivatives at arbitrary points; exact
    for band-limited data, spectrally accurate otherwise.  Real input data
    yield real outputs.
    """

    def __init__(self, grid: Grid, values: Array):
        values = np.asarray(values)
        if values.shape != grid.shape:
            raise StructuralError("sample shape does not match grid")
        self.grid = grid
        self.real = np.isrealobj(values)
        self.coeffs = np.fft.fftn(values) / values.size
        self._k = [grid.wavenumbers(d) for d in range(grid.dim)]
        # zero the Nyquist mode in odd-derivative symbols (real-data convention)
        self._k_odd = []
        for d, k in enumerate(self._k):
            k_odd = k.copy()
            k_odd[grid.shape[d] // 2] = 0.0
            self._k_odd.append(k_odd)

    def _contract(self, coeffs: Array, x: Array) -> Array:
        # the series is anchored at the interval start: f(x) = sum c exp(ik(x-a))
        e = np.exp(1j * np.outer(x[:, 0] - self.grid.intervals[0][0], self._k[0]))
        out = np.tensordot(e, coeffs, axes=(1, 0))
        for d in range(1, self.grid.dim):
            e = np.exp(1j * np.outer(x[:, d] - self.grid.intervals[d][0], self._k[d]))
            out = np.einsum("bk...,bk->b...", out, e)
        return out

    def _eval(self, coeffs: Array, x: Array) -> Array:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        out = self._contract(coeffs, x)
        return out.real if self.real else out

    def value(self, x: Array) -> Array:
        return self._eval(self.coeffs, x)

    def derivative(self, x: Array, d: int, order: int = 1) -> Array:
        k = self._k_odd[d] if order % 2 == 1 else self._k[d]
        shape = [1] * self.grid.dim
        shape[d] = -1
        sym = (1j * k) ** order
        return self._eval(self.coeffs * sym.reshape(shape), x)

    def laplacian(self, x: Array) -> Array:
        out = self.derivative(x, 0, order=2)
        for d in range(1, self.grid.dim):
            out = out + self.derivative(x, d, order=2)
        return out


# ---------------------------------------------------------------------------
# file formats: delimited snapshots and a binary block format
# ---------------------------------------------------------------------------

_MAGIC = b"KGMDFLD\x00"
_VERSION = 1
_DTYPE_TAGS = {0: np.float64, 1: np.complex128}


def write_field_csv(path, f: Field, column: str = "value"):
    """Rows (t, x[, y[, z]], value); complex fields emit re/im columns."""
    headers = ["t"] + [f"x{d}" for d in range(f.grid.dim)]
    complex_data = np.iscomplexobj(f.values)
    if complex_data:
        headers += [f"{column}_re", f"{column}_im"]
    else:
        headers += [column]
    pts = f.grid.points()
    with open(path, "w") as fh:
        fh.write(",".join(headers) + "\n")
        for it, t in enumerate(f.times):
            ts = repr(float(t))
            block = f.values[it].ravel()
            for p, v in zip(pts, block):
                coords = ",".join(repr(float(c)) for c in p)
                if complex_data:
                    fh.write(f"{ts},{coords},{float(v.real)!r},{float(v.imag)!r}\n")
                else:
                    fh.write(f"{ts},{coords},{float(v)!r}\n")


def write_field_bin(path, f: Field):
    """magic, version, dims, dtype tag, times, intervals, row-major payload."""
    tag = 1 if np.iscomplexobj(f.values) else 0
    values = np.ascontiguousarray(
        f.values, dtype=_DTYPE_TAGS[tag])
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IIB", _VERSION, f.grid.dim, tag))
        fh.write(struct.pack("<I", len(f.times)))
        for n in f.grid.shape:
            fh.write(struct.pack("<I", n))
        for a, b in f.grid.intervals:
            fh.write(struct.pack("<dd", a, b))
        fh.write(np.asarray(f.times, dtype=np.float64).tobytes())
        fh.write(values.tobytes())


def read_field_bin(path) -> Field:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != _MAGIC:
            raise StructuralError(f"bad field file magic {magic!r}")
        version, dim, tag = struct.unpack("<IIB", fh.read(9))
        if version != _VERSION:
            raise StructuralError(f"unsupported field file version {version}")
        if tag not in _DTYPE_TAGS:
            raise StructuralError(f"unknown dtype tag {tag}")
        (nt,) = struct.unpack("<I", fh.read(4))
        shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(dim))
        intervals = tuple(struct.unpack("<dd", fh.read(16)) for _ in range(dim))
        times = np.frombuffer(fh.read(8 * nt), dtype=np.float64).copy()
        dtype = _DTYPE_TAGS[tag]
        count = nt * int(np.prod(shape))
        payload = np.frombuffer(fh.read(count * dtype().itemsize), dtype=dtype)
        values = payload.reshape((nt,) + shape).copy()
    return Field(values, times, Grid(shape, intervals))
