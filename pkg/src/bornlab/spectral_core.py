"""Cartesian grids, the discrete continuous-Fourier transform, dyadic shell
energies and Sobolev regularity estimation.

Fourier convention
------------------
    f^(xi) = int f(x) exp(-i x.xi) dx,
    f(x)   = (2 pi)^(-n) int f^(xi) exp(i x.xi) dxi.

On a box ``[-L/2, L/2)^n`` with ``N`` nodes per axis the integral is replaced
by a sum with weight ``h^n`` (``h = L/N``) and the frequency nodes are
``2 pi m / L`` for ``m in [-N/2, N/2)``.  Frequency-space arrays are stored in
centred order (``m = -N/2`` first), physical-space arrays with node
``x_i = -L/2 + i h``.  Array axis 0 is the ``x_1`` direction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
import scipy.fft as sfft

PHYSICAL = "physical"
FREQUENCY = "frequency"


class FieldError(ValueError):
    """Raised for malformed or non-finite fields."""


def compensated_sum(values) -> float:
    """Exactly rounded sum of a real array (order independent)."""
    arr = np.asarray(values, dtype=float).ravel()
    return math.fsum(arr.tolist())


@dataclass(frozen=True)
class Grid:
    """Uniform box grid ``[-L/2, L/2)^n`` with ``N`` points per axis."""

    n_dim: int
    points_per_dim: int
    box_extent: float

    def __post_init__(self):
        if self.n_dim not in (2, 3):
            raise ValueError(f"n_dim must be 2 or 3, got {self.n_dim}")
        n = int(self.points_per_dim)
        if n < 8 or n & (n - 1):
            raise ValueError(f"points_per_dim must be a power of two >= 8, got {n}")
        if not self.box_extent > 0:
            raise ValueError("box_extent must be positive")

    @property
    def spacing(self) -> float:
        return self.box_extent / self.points_per_dim

    @property
    def shape(self) -> Tuple[int, ...]:
        return (self.points_per_dim,) * self.n_dim

    @property
    def cell_volume(self) -> float:
        return self.spacing**self.n_dim

    @property
    def frequency_cell(self) -> float:
        """Measure of one frequency cell, ``(2 pi / L)^n``."""
        return (2.0 * np.pi / self.box_extent) ** self.n_dim

    @property
    def nyquist(self) -> float:
        """Largest resolvable per-axis frequency ``pi N / L``."""
        return np.pi * self.points_per_dim / self.box_extent

    @cached_property
    def axis(self) -> np.ndarray:
        return -0.5 * self.box_extent + self.spacing * np.arange(self.points_per_dim)

    @cached_property
    def frequency_axis(self) -> np.ndarray:
        m = np.arange(self.points_per_dim) - self.points_per_dim // 2
        return 2.0 * np.pi * m / self.box_extent

    def coordinates(self) -> List[np.ndarray]:
        """Physical node coordinates, one broadcastable array per axis."""
        return _open_mesh(self.axis, self.n_dim)

    def frequencies(self) -> List[np.ndarray]:
        """Centred frequency node coordinates, one broadcastable array per axis."""
        return _open_mesh(self.frequency_axis, self.n_dim)

    @cached_property
    def radius(self) -> np.ndarray:
        return np.sqrt(sum(c * c for c in self.coordinates()))

    @cached_property
    def frequency_radius(self) -> np.ndarray:
        return np.sqrt(sum(c * c for c in self.frequencies()))

    def to_record(self) -> dict:
        return {"n_dim": self.n_dim, "points_per_dim": self.points_per_dim,
                "box_extent": float(self.box_extent)}


def _open_mesh(axis: np.ndarray, n_dim: int) -> List[np.ndarray]:
    out = []
    for d in range(n_dim):
        shape = [1] * n_dim
        shape[d] = axis.size
        out.append(axis.reshape(shape))
    return out


@dataclass
class SampledField:
    """Complex samples on a grid, tagged physical or frequency space."""

    grid: Grid
    values: np.ndarray
    space: str = PHYSICAL

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.space not in (PHYSICAL, FREQUENCY):
            raise FieldError(f"unknown space tag {self.space!r}")
        if self.values.shape != self.grid.shape:
            raise FieldError(f"values shape {self.values.shape} != grid shape {self.grid.shape}")

    def l2_norm(self) -> float:
        """Continuous L2 norm of the field in its own space."""
        w = self.grid.cell_volume if self.space == PHYSICAL else self.grid.frequency_cell
        return math.sqrt(w * compensated_sum(np.abs(self.values) ** 2))

    def check_finite(self) -> None:
        if not np.all(np.isfinite(self.values)):
            raise FieldError("field contains non-finite values")


def _phase(grid: Grid) -> np.ndarray:
    """(-1)^(m_1 + ... + m_n) on the unshifted FFT index layout."""
    m = np.fft.fftfreq(grid.points_per_dim, 1.0 / grid.points_per_dim).astype(int)
    sign = np.where(m % 2 == 0, 1.0, -1.0)
    out = np.ones(grid.shape)
    for s in _open_mesh(sign, grid.n_dim):
        out = out * s
    return out


def forward_transform(field: SampledField, workers: Optional[int] = None) -> SampledField:
    """Approximate the continuous Fourier transform at the grid frequency nodes."""
    if field.space != PHYSICAL:
        raise FieldError("forward_transform expects a physical-space field")
    field.check_finite()
    g = field.grid
    spec = sfft.fftn(field.values, workers=workers) * _phase(g) * g.cell_volume
    return SampledField(g, sfft.fftshift(spec), FREQUENCY)


def inverse_transform(field: SampledField, workers: Optional[int] = None) -> SampledField:
    """Inverse of :func:`forward_transform`."""
    if field.space != FREQUENCY:
        raise FieldError("inverse_transform expects a frequency-space field")
    field.check_finite()
    g = field.grid
    spec = sfft.ifftshift(field.values) * _phase(g)
    vals = sfft.ifftn(spec, workers=workers) / g.cell_volume
    return SampledField(g, vals, PHYSICAL)


def shell_index(radius: np.ndarray, base_scale: float = 1.0) -> np.ndarray:
    """Dyadic shell index ``j`` with ``b 2^(j-1) < |xi| <= b 2^j``; 0 marks the central ball."""
    r = np.asarray(radius, dtype=float) / base_scale
    j = np.zeros(r.shape, dtype=int)
    pos = r > 1.0
    # float log2 can land on the wrong side of exact powers of two
    jj = np.ceil(np.log2(r[pos])).astype(int)
    jj[2.0 ** (jj - 1) >= r[pos]] -= 1
    jj[2.0 ** jj < r[pos]] += 1
    j[pos] = jj
    return j


def nyquist_shell(grid: Grid, base_scale: float = 1.0) -> int:
    """Index of the shell containing the per-axis Nyquist radius."""
    return int(shell_index(np.array([grid.nyquist]), base_scale)[0])


def shell_energies(field: SampledField, base_scale: float = 1.0,
                   mask: Optional[np.ndarray] = None) -> List[Tuple[int, float]]:
    """Dyadic shell energies ``E_j = sum_{shell j} |f^|^2 (2 pi / L)^n``.

    Every shell from 1 up to the one containing the largest grid frequency is
    reported, empty ones with energy 0.  The central ball ``|xi| <= base_scale``
    is returned by :func:`central_energy`.
    """
    if field.space != FREQUENCY:
        raise FieldError("shell_energies expects a frequency-space field")
    if np.isnan(field.values).any():
        raise FieldError("field contains NaN")
    g = field.grid
    idx = shell_index(g.frequency_radius, base_scale)
    power = np.abs(field.values) ** 2 * g.frequency_cell
    if mask is not None:
        power = np.where(mask, power, 0.0)
    top = int(idx.max())
    out = []
    for j in range(1, top + 1):
        out.append((j, compensated_sum(power[idx == j])))
    return out


def central_energy(field: SampledField, base_scale: float = 1.0,
                   mask: Optional[np.ndarray] = None) -> float:
    g = field.grid
    power = np.abs(field.values) ** 2 * g.frequency_cell
    if mask is not None:
        power = np.where(mask, power, 0.0)
    return compensated_sum(power[shell_index(g.frequency_radius, base_scale) == 0])


def sobolev_norm(field: SampledField, s: float, homogeneous: bool = False) -> float:
    """Discrete (homogeneous) Sobolev norm ``(int w^(2s) |f^|^2 dxi)^(1/2)``.

    ``w = |xi|`` for the homogeneous norm, ``(1 + |xi|^2)^(1/2)`` otherwise.
    For the homogeneous norm with ``s < 0`` the ``xi = 0`` node gets weight 0.
    """
    if field.space != FREQUENCY:
        raise FieldError("sobolev_norm expects a frequency-space field")
    if np.isnan(field.values).any():
        raise FieldError("field contains NaN")
    g = field.grid
    rho = g.frequency_radius
    if homogeneous:
        with np.errstate(divide="ignore"):
            weight = np.where(rho > 0, rho ** (2.0 * s), 0.0 if s < 0 else (1.0 if s == 0 else 0.0))
    else:
        weight = (1.0 + rho * rho) ** s
    return math.sqrt(g.frequency_cell * compensated_sum(weight * np.abs(field.values) ** 2))


@dataclass
class RegularityEstimate:
    """Dyadic shell energies with a fitted critical Sobolev exponent."""

    shell_energies: List[Tuple[int, float]]
    fitted_exponent: float
    fit_window: Tuple[int, int]
    fit_residual: float
    ceiling_flag: bool
    slope: float = field(default=float("nan"))

    def energy(self, j: int) -> float:
        return dict(self.shell_energies)[j]


class EstimationError(ValueError):
    """Raised when a regularity fit is not possible."""


def default_window(grid: Grid, base_scale: float = 1.0) -> Tuple[int, int]:
    """Shells ``[4, top - 1]``, widened downwards to keep at least four shells.

    The lowest shells are pre-asymptotic for smooth cusps and the top shell
    is only partly inside the Nyquist box.
    """
    top = nyquist_shell(grid, base_scale)
    return (max(1, min(4, top - 4)), top - 1)


def estimate_regularity(shells: Sequence[Tuple[int, float]],
                        window: Optional[Tuple[int, int]] = None,
                        points_per_dim: Optional[int] = None) -> RegularityEstimate:
    """Fit ``log2 E_j = c - 2 s j`` over ``window`` and return ``s``.

    ``points_per_dim`` sets the ceiling: exponents at or above
    ``log2(N)/2 - 1`` are flagged as faster-than-measurable decay.
    """
    table = [(int(j), float(e)) for j, e in shells]
    if window is None:
        js = [j for j, _ in table]
        window = (3, max(js) - 1)
    lo, hi = window
    used = [(j, e) for j, e in table if lo <= j <= hi and e > 0.0]
    if len(used) < 4:
        raise EstimationError(
            f"need at least 4 shells with positive energy in window {window}, got {len(used)}")
    j = np.array([u[0] for u in used], dtype=float)
    y = np.log2(np.array([u[1] for u in used]))
    slope, intercept = np.polyfit(j, y, 1)
    resid = float(np.max(np.abs(y - (slope * j + intercept))))
    exponent = -0.5 * float(slope)
    ceiling = False
    if points_per_dim is not None:
        ceiling = exponent >= math.log2(points_per_dim) / 2.0 - 1.0
    return RegularityEstimate(table, exponent, (int(lo), int(hi)), resid, ceiling, float(slope))


# ---------------------------------------------------------------------------
# Serialization: raw little-endian complex128 + text manifest
# ---------------------------------------------------------------------------

def write_manifest(path: Path, entries: Iterable[Tuple[str, object]]) -> None:
    lines = [f"{k} = {v}" for k, v in entries]
    atomic_write_text(Path(path), "\n".join(lines) + "\n")


def read_manifest(path: Path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, val = line.partition("=")
        out[key.strip()] = val.strip()
    return out


def atomic_write_bytes(path: Path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def atomic_write_text(path: Path, text: str) -> None:
    atomic_write_bytes(Path(path), text.encode())


def save_field(field: SampledField, stem: Path) -> Tuple[Path, Path]:
    """Write ``<stem>.c128`` (x_1 fastest) and ``<stem>.manifest.txt``."""
    stem = Path(stem)
    data = np.asarray(field.values, dtype="<c16").ravel(order="F").tobytes()
    raw = stem.with_suffix(".c128")
    man = stem.with_suffix(".manifest.txt")
    atomic_write_bytes(raw, data)
    g = field.grid
    write_manifest(man, [("n_dim", g.n_dim), ("points_per_dim", g.points_per_dim),
                         ("box_extent", repr(float(g.box_extent))),
                         ("space_tag", field.space), ("dtype", "complex128-le"),
                         ("layout", "row-major, x1 fastest"), ("values_file", raw.name)])
    return raw, man


def load_field(stem: Path) -> SampledField:
    stem = Path(stem)
    meta = read_manifest(stem.with_suffix(".manifest.txt"))
    g = Grid(int(meta["n_dim"]), int(meta["points_per_dim"]), float(meta["box_extent"]))
    raw = np.frombuffer(stem.with_suffix(".c128").read_bytes(), dtype="<c16")
    vals = raw.reshape(g.shape, order="F").astype(np.complex128)
    return SampledField(g, vals, meta["space_tag"])
