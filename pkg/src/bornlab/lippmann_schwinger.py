"""Neumann-Born solution of the Lippmann-Schwinger equation and far-field data.

The scattering solution ``u = exp(i k theta.x) + R_k(q u)`` is summed as the
series ``sum_m (R_k q)^m exp(i k theta.x)``.  Because ``q`` lives in the unit
ball, the iteration runs on the smallest FFT-friendly box around the
support that the truncated outgoing kernel needs; the full-grid field is
recovered afterwards from one extra resolvent application.
"""

from __future__ import annotations

import hashlib
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import scipy.fft as sfft

from .potentials import PotentialSpec, sample
from .resolvent import ResolventError, ResolventOperator, ResolventParams, check_admissible
from .spectral_core import (PHYSICAL, Grid, SampledField, atomic_write_bytes, compensated_sum,
                            read_manifest, write_manifest)

logger = logging.getLogger(__name__)

SUPPORT_RADIUS = 1.0
FLAG_OK, FLAG_DIVERGED, FLAG_UNCONVERGED = 0, 1, 2
STORED_TERMS = 8


class DivergenceError(RuntimeError):
    """The Neumann series stopped contracting."""

    def __init__(self, message, ratio):
        super().__init__(message)
        self.ratio = ratio


class SweepError(RuntimeError):
    def __init__(self, message, dataset=None):
        super().__init__(message)
        self.dataset = dataset


@dataclass(frozen=True)
class SolverParams:
    max_terms: int = 200
    tol: float = 1e-10
    method: str = "outgoing"
    epsilon: Optional[float] = None
    extrapolation_levels: int = 3

    def to_record(self) -> dict:
        return {"max_terms": self.max_terms, "tol": self.tol, "method": self.method,
                "epsilon": self.epsilon, "extrapolation_levels": self.extrapolation_levels}


@dataclass(frozen=True)
class CompactBox:
    """Centred sub-box of a grid with the same spacing (any even size)."""

    n_dim: int
    points_per_dim: int
    box_extent: float
    offset: int

    @property
    def spacing(self) -> float:
        return self.box_extent / self.points_per_dim

    @property
    def shape(self):
        return (self.points_per_dim,) * self.n_dim

    @property
    def slices(self):
        return (slice(self.offset, self.offset + self.points_per_dim),) * self.n_dim


def compact_box(grid: Grid, support_radius: float = SUPPORT_RADIUS) -> CompactBox:
    """Smallest even FFT-friendly crop that holds support, kernel and its images."""
    h = grid.spacing
    need = 4.0 * support_radius / h + 5.0  # L_c > D + 2 r_s with D = 2 r_s + 2h
    n = int(math.ceil(need))
    while True:
        n = sfft.next_fast_len(n)
        if n % 2 == 0:
            break
        n += 1
    if n >= grid.points_per_dim:
        return CompactBox(grid.n_dim, grid.points_per_dim, grid.box_extent, 0)
    return CompactBox(grid.n_dim, n, n * h, grid.points_per_dim // 2 - n // 2)


def _box_coordinates(box, grid: Grid):
    axis = grid.axis[box.offset:box.offset + box.points_per_dim]
    out = []
    for d in range(grid.n_dim):
        shape = [1] * grid.n_dim
        shape[d] = axis.size
        out.append(axis.reshape(shape))
    return out


def plane_wave(coords, k: float, theta) -> np.ndarray:
    return np.exp(1j * k * sum(c * t for c, t in zip(coords, theta)))


@dataclass
class ScatteringSolution:
    u: Optional[SampledField]
    k: float
    theta: np.ndarray
    term_norms: List[float]
    converged: bool
    contraction_ratio: float
    backscatter_terms: np.ndarray
    u_support: np.ndarray = field(repr=False, default=None)
    box: CompactBox = field(repr=False, default=None)

    @property
    def n_terms(self) -> int:
        return len(self.term_norms)


def support_radius(q: SampledField) -> float:
    """Radius of the node support of ``q``; boundary cells of a cell-averaged
    indicator may poke out of the unit ball by half a cell diagonal."""
    g = q.grid
    nz = np.asarray(q.values) != 0
    r = float(g.radius[nz].max()) if nz.any() else 0.0
    slack = 0.5 * math.sqrt(g.n_dim) * g.spacing
    if r > SUPPORT_RADIUS + slack + 1e-12:
        raise ResolventError("potential is not supported in the unit ball")
    return max(r, SUPPORT_RADIUS) + 1e-9


class LSSolver:
    """Reusable Neumann-series solver for one potential, grid and wavenumber."""

    def __init__(self, q: SampledField, k: float, params: SolverParams = SolverParams(),
                 workers: Optional[int] = None):
        grid = q.grid
        check_admissible(grid, k)
        self.support_radius = support_radius(q)
        self.grid = grid
        self.k = float(k)
        self.params = params
        self.workers = workers
        self.box = compact_box(grid, self.support_radius)
        rs = self.support_radius
        rp = ResolventParams(k, params.epsilon, params.extrapolation_levels, params.method,
                             source_radius=rs, target_radius=rs)
        self.op = ResolventOperator(self.box, rp, workers)
        self.q = np.asarray(q.values)[self.box.slices].astype(complex)
        self.support = self.q != 0
        self.coords = _box_coordinates(self.box, grid)
        self.cell = grid.cell_volume
        self._q_full = q

    def _norm(self, v: np.ndarray) -> float:
        sel = v[self.support] if self.support.any() else v.ravel()
        return math.sqrt(self.cell * compensated_sum(np.abs(sel) ** 2))

    def solve(self, theta, full_field: bool = True) -> ScatteringSolution:
        theta = np.asarray(theta, dtype=float)
        theta = theta / np.linalg.norm(theta)
        p = self.params
        pw = plane_wave(self.coords, self.k, theta)
        weight = self.cell * self.q * pw  # exp(ik theta.y) q(y) dy, backscatter receiver
        term = pw
        u = pw.copy()
        norms = [self._norm(pw)]
        bs = [np.sum(weight * term)]
        ratios: List[float] = []
        converged = False
        if not self.support.any():
            converged = True
        else:
            run = 0
            for _ in range(1, p.max_terms):
                term = self.op(self.q * term)
                nrm = self._norm(term)
                bs.append(np.sum(weight * term))
                norms.append(nrm)
                u += term
                ratio = nrm / norms[-2] if norms[-2] > 0 else 0.0
                ratios.append(ratio)
                run = run + 1 if ratio >= 1.0 else 0
                if run >= 3:
                    raise DivergenceError(
                        f"Neumann series diverges at k={self.k:g}: term ratio {ratio:.3g}",
                        max(ratios))
                if nrm <= p.tol * norms[0]:
                    converged = True
                    break
        contraction = max(ratios) if ratios else 0.0
        full = None
        if full_field:
            full = self._full_field(u, theta)
        return ScatteringSolution(full, self.k, theta, norms, converged, contraction,
                                  np.array(bs), u, self.box)

    def _full_field(self, u_box: np.ndarray, theta) -> SampledField:
        g = self.grid
        if self.box.points_per_dim == g.points_per_dim:
            return SampledField(g, u_box, PHYSICAL)
        src = np.zeros(g.shape, dtype=complex)
        src[self.box.slices] = self.q * u_box
        rp = ResolventParams(self.k, self.params.epsilon, self.params.extrapolation_levels,
                             self.params.method, source_radius=self.support_radius)
        op = ResolventOperator(g, rp, self.workers)
        u = plane_wave(g.coordinates(), self.k, theta) + op(src)
        return SampledField(g, u, PHYSICAL)


def solve(q: SampledField, k: float, theta, max_terms: int = 200, tol: float = 1e-10,
          params: Optional[SolverParams] = None, full_field: bool = True) -> ScatteringSolution:
    """Solve for the total field through the Neumann-Born series."""
    if params is None:
        params = SolverParams(max_terms=max_terms, tol=tol)
    return LSSolver(q, k, params).solve(theta, full_field=full_field)


def far_field(q: SampledField, sol: ScatteringSolution, theta_out) -> complex:
    """``A(theta', theta, k) = sum h^n exp(-i k theta'.y) q(y) u(y)``."""
    if not sol.converged:
        raise ValueError("far_field needs a converged scattering solution")
    theta_out = np.asarray(theta_out, dtype=float)
    theta_out = theta_out / np.linalg.norm(theta_out)
    g = q.grid
    box = sol.box
    qv = np.asarray(q.values)[box.slices]
    coords = _box_coordinates(box, g)
    phase = plane_wave(coords, -sol.k, theta_out)
    return complex(np.sum(phase * qv * sol.u_support) * g.cell_volume)


# ---------------------------------------------------------------------------
# sweeps and datasets
# ---------------------------------------------------------------------------

def uniform_angles_2d(count: int) -> np.ndarray:
    phi = 2.0 * np.pi * np.arange(count) / count
    return np.stack([np.cos(phi), np.sin(phi)], -1)


def spherical_design_26(refine: int = 0) -> np.ndarray:
    """Face, edge and vertex directions of the cube, optionally refined by edge midpoints."""
    pts = []
    for v in np.array(np.meshgrid([-1, 0, 1], [-1, 0, 1], [-1, 0, 1], indexing="ij")).reshape(3, -1).T:
        if np.any(v):
            pts.append(v / np.linalg.norm(v))
    pts = np.array(pts)
    for _ in range(refine):
        from scipy.spatial import ConvexHull
        hull = ConvexHull(pts)
        mids = set()
        for simplex in hull.simplices:
            for a in range(3):
                i, j = sorted((simplex[a], simplex[(a + 1) % 3]))
                mids.add((i, j))
        new = [(pts[i] + pts[j]) / np.linalg.norm(pts[i] + pts[j]) for i, j in sorted(mids)]
        pts = np.vstack([pts, new])
    return pts


def default_angles(n_dim: int, count: int = 64, refine: int = 0) -> np.ndarray:
    return uniform_angles_2d(count) if n_dim == 2 else spherical_design_26(refine)


def max_wavenumber(grid: Grid) -> float:
    """Largest sampled wavenumber, 0.8 * pi N / (2 L) (20% Nyquist margin)."""
    return 0.8 * np.pi * grid.points_per_dim / (2.0 * grid.box_extent)


def default_k_samples(grid: Grid, c0: float, count: int = 48, k_max: Optional[float] = None) -> np.ndarray:
    k_max = max_wavenumber(grid) if k_max is None else k_max
    return np.linspace(c0, k_max, count)


@dataclass
class FarFieldDataset:
    k_samples: np.ndarray
    theta_samples: np.ndarray
    values: np.ndarray
    flags: np.ndarray
    meta: Dict[str, str]
    term_values: Optional[np.ndarray] = None
    reasons: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.k_samples = np.asarray(self.k_samples, dtype=float)
        self.theta_samples = np.asarray(self.theta_samples, dtype=float)
        K, M = self.k_samples.size, self.theta_samples.shape[0]
        if self.values.shape != (K, M):
            raise ValueError("values shape must be (|k_samples|, |theta_samples|)")
        if np.any(np.diff(self.k_samples) <= 0):
            raise ValueError("k_samples must be increasing")
        if np.max(np.abs(np.linalg.norm(self.theta_samples, axis=1) - 1.0)) > 1e-14:
            raise ValueError("theta_samples must be unit vectors")

    @property
    def n_dim(self) -> int:
        return self.theta_samples.shape[1]

    @property
    def content_hash(self) -> str:
        return self.meta["content_hash"]

    @property
    def valid(self) -> np.ndarray:
        return self.flags == FLAG_OK

    def save(self, directory: Path) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        atomic_write_bytes(d / "values.c128", self.values.astype("<c16").tobytes(order="C"))
        atomic_write_bytes(d / "flags.u8", self.flags.astype(np.uint8).tobytes(order="C"))
        entries = list(self.meta.items())
        entries += [("k_count", self.k_samples.size), ("theta_count", self.theta_samples.shape[0]),
                    ("n_dim", self.n_dim),
                    ("k_samples", ",".join(repr(float(x)) for x in self.k_samples)),
                    ("theta_samples", ";".join(",".join(repr(float(c)) for c in t)
                                               for t in self.theta_samples)),
                    ("values_layout", "complex128-le, row-major (k, theta)"),
                    ("flags_layout", "uint8 row-major (k, theta); 0 ok, 1 diverged, 2 unconverged")]
        if self.term_values is not None:
            atomic_write_bytes(d / "terms.c128", self.term_values.astype("<c16").tobytes(order="C"))
            entries.append(("term_count", self.term_values.shape[2]))
        for key, why in sorted(self.reasons.items()):
            entries.append((f"reason.{key}", why))
        write_manifest(d / "manifest.txt", entries)
        return d

    @classmethod
    def load(cls, directory: Path) -> "FarFieldDataset":
        d = Path(directory)
        man = read_manifest(d / "manifest.txt")
        K, M, n = int(man["k_count"]), int(man["theta_count"]), int(man["n_dim"])
        ks = np.array([float(x) for x in man["k_samples"].split(",")])
        th = np.array([[float(c) for c in t.split(",")] for t in man["theta_samples"].split(";")])
        vals = np.frombuffer((d / "values.c128").read_bytes(), dtype="<c16").reshape(K, M).astype(complex)
        flags = np.frombuffer((d / "flags.u8").read_bytes(), dtype=np.uint8).reshape(K, M).copy()
        terms = None
        if "term_count" in man and (d / "terms.c128").exists():
            terms = np.frombuffer((d / "terms.c128").read_bytes(), dtype="<c16").reshape(
                K, M, int(man["term_count"])).astype(complex)
        reasons = {k[len("reason."):]: v for k, v in man.items() if k.startswith("reason.")}
        skip = {"k_count", "theta_count", "n_dim", "k_samples", "theta_samples", "values_layout",
                "flags_layout", "term_count"}
        meta = {k: v for k, v in man.items() if k not in skip and not k.startswith("reason.")}
        assert th.shape == (M, n)
        return cls(ks, th, vals, flags, meta, terms, reasons)


def dataset_hash(q_spec: PotentialSpec, grid: Grid, k_samples, theta_samples,
                 params: SolverParams) -> str:
    h = hashlib.sha256()
    h.update(q_spec.to_record().encode())
    h.update(repr(sorted(grid.to_record().items())).encode())
    h.update(repr(sorted(params.to_record().items())).encode())
    h.update(np.asarray(k_samples, dtype="<f8").tobytes())
    h.update(np.asarray(theta_samples, dtype="<f8").tobytes())
    return h.hexdigest()


def sweep(q_spec: PotentialSpec, grid: Grid, k_samples: Sequence[float],
          theta_samples: np.ndarray, params: SolverParams = SolverParams(),
          cache_dir: Optional[Path] = None, max_diverged_fraction: float = 0.1,
          workers: Optional[int] = None, progress: bool = False) -> FarFieldDataset:
    """Backscattering amplitudes ``A(-theta, theta, k)`` on a (k, theta) grid."""
    k_samples = np.asarray(k_samples, dtype=float)
    theta_samples = np.asarray(theta_samples, dtype=float)
    theta_samples = theta_samples / np.linalg.norm(theta_samples, axis=1, keepdims=True)
    for k in k_samples:
        check_admissible(grid, k)
    key = dataset_hash(q_spec, grid, k_samples, theta_samples, params)
    if cache_dir is not None:
        hit = Path(cache_dir) / key
        if (hit / "manifest.txt").exists():
            logger.info("cache hit %s", key[:12])
            return FarFieldDataset.load(hit)
    q = sample(q_spec, grid)
    K, M = k_samples.size, theta_samples.shape[0]
    values = np.zeros((K, M), dtype=complex)
    terms = np.zeros((K, M, STORED_TERMS), dtype=complex)
    flags = np.zeros((K, M), dtype=np.uint8)
    reasons: Dict[str, str] = {}
    worst = 0.0
    t0 = time.time()
    for a, k in enumerate(k_samples):
        solver = LSSolver(q, k, params, workers)
        for b, theta in enumerate(theta_samples):
            try:
                sol = solver.solve(theta, full_field=False)
            except DivergenceError as exc:
                flags[a, b] = FLAG_DIVERGED
                reasons[f"{a}.{b}"] = f"diverged ratio={exc.ratio:.6g}"
                continue
            if not sol.converged:
                flags[a, b] = FLAG_UNCONVERGED
                reasons[f"{a}.{b}"] = f"unconverged after {sol.n_terms} terms"
                continue
            values[a, b] = sol.backscatter_terms.sum()
            worst = max(worst, sol.contraction_ratio)
            n = min(STORED_TERMS, sol.backscatter_terms.size)
            terms[a, b, :n] = sol.backscatter_terms[:n]
        if progress:
            logger.info("k %d/%d done (%.1fs)", a + 1, K, time.time() - t0)
    meta = {"content_hash": key, "potential": q_spec.to_record(),
            "grid.n_dim": str(grid.n_dim), "grid.points_per_dim": str(grid.points_per_dim),
            "grid.box_extent": repr(float(grid.box_extent)),
            "solver": repr(sorted(params.to_record().items())),
            "max_contraction": repr(float(worst)),
            "created": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())}
    ds = FarFieldDataset(k_samples, theta_samples, values, flags, meta, terms, reasons)
    bad = np.count_nonzero(flags) / flags.size
    if bad > max_diverged_fraction:
        raise SweepError(f"{np.count_nonzero(flags)} of {flags.size} cells diverged or failed", ds)
    if cache_dir is not None:
        ds.save(Path(cache_dir) / key)
    return ds
