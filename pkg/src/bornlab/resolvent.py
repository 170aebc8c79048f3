"""The outgoing Helmholtz resolvent ``R_k``, ``(R_k f)^ = f^ / (k^2 - |xi|^2 + i0)``.

Two discretizations are provided.

``method="outgoing"`` (default)
    Convolution with the free-space outgoing kernel truncated at a radius
    ``D`` that covers every source/target pair of interest.  The truncated
    kernel has a closed-form, smooth Fourier transform, so the periodic FFT
    convolution reproduces the free-space result exactly on the validity
    region as long as ``L > D + r_source + r_target``.

``method="absorbing"``
    Division by ``k^2 - |xi|^2 + i eps`` on the periodic box, extrapolated in
    ``eps -> 0+`` over the levels ``eps, eps/2, eps/4, ...``.  The
    extrapolation weights are combined into a single multiplier.

The kernel of the Fourier multiplier is ``-exp(ikr)/(4 pi r)`` in 3D and
``-(i/4) H0(kr)`` in 2D, i.e. one half of the fundamental solution with
constant ``C_n = 1/(2i (2pi)^((n-2)/2))``; see :func:`fundamental_solution`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.fft as sfft
from scipy import special

from .bessel import bessel_h1
from .spectral_core import PHYSICAL, Grid, SampledField

METHODS = ("outgoing", "absorbing")


class ResolventError(ValueError):
    pass


@dataclass(frozen=True)
class ResolventParams:
    k: float
    epsilon: Optional[float] = None
    extrapolation_levels: int = 3
    method: str = "outgoing"
    source_radius: float = 1.0
    target_radius: Optional[float] = None

    def __post_init__(self):
        if not self.k > 0:
            raise ResolventError("wavenumber must be positive")
        if self.method not in METHODS:
            raise ResolventError(f"unknown resolvent method {self.method!r}")
        if self.extrapolation_levels < 1:
            raise ResolventError("extrapolation_levels must be >= 1")
        if self.epsilon is not None:
            if self.epsilon == 0:
                raise ResolventError("epsilon = 0 is not allowed; the limit is taken by extrapolation")
            if not 0 < self.epsilon <= self.k**2:
                raise ResolventError("epsilon must satisfy 0 < epsilon <= k^2")

    def resolved_epsilon(self, grid: Grid) -> float:
        """Default absorption: one frequency cell, ``k 2 pi / L``."""
        if self.epsilon is not None:
            return self.epsilon
        return min(self.k * 2.0 * np.pi / grid.box_extent, self.k**2)

    def resolved_target_radius(self, grid: Grid) -> float:
        return grid.box_extent / 4.0 if self.target_radius is None else self.target_radius

    def truncation_radius(self, grid: Grid) -> float:
        return self.source_radius + self.resolved_target_radius(grid) + 2.0 * grid.spacing


def check_admissible(grid: Grid, k: float) -> None:
    """Reject wavenumbers whose backscattering frequency 2k is beyond the grid."""
    if k * grid.box_extent / np.pi > grid.points_per_dim:
        raise ResolventError(
            f"k = {k:g} violates the Nyquist constraint k L / pi <= N "
            f"({grid.points_per_dim}) needed to resolve |xi| = 2k")


# ---------------------------------------------------------------------------
# truncated free-space kernel transforms
# ---------------------------------------------------------------------------

def _expm1_over(a: np.ndarray, D: float) -> np.ndarray:
    """(exp(i a D) - 1) / a, stable at a = 0."""
    return 1j * D * np.exp(0.5j * a * D) * np.sinc(a * D / (2.0 * np.pi))


def truncated_kernel_hat(n_dim: int, k: float, D: float, rho) -> np.ndarray:
    """Fourier transform of the multiplier kernel restricted to ``|x| <= D``."""
    rho = np.asarray(rho, dtype=float)
    if n_dim == 3:
        out = np.empty(rho.shape, dtype=complex)
        zero = rho < 1e-12
        r = rho[~zero]
        out[~zero] = (_expm1_over(k + r, D) - _expm1_over(k - r, D)) / (2.0 * r)
        # -int_0^D r exp(ikr) dr
        ekd = np.exp(1j * k * D)
        out[zero] = -(ekd * (D / (1j * k) + 1.0 / k**2) - 1.0 / k**2)
        return out
    if n_dim != 2:
        raise ResolventError("n_dim must be 2 or 3")
    h0 = special.hankel1(0, k * D)
    h1 = special.hankel1(1, k * D)
    out = np.empty(rho.shape, dtype=complex)
    near = np.abs(rho - k) * D < 1e-4
    far = ~near
    r = rho[far]
    num = D * (r * special.j1(r * D) * h0 - k * special.j0(r * D) * h1) - 2j / np.pi
    out[far] = num / (r * r - k * k)
    # divided difference of the numerator through its derivative at the midpoint
    m = 0.5 * (rho[near] + k)
    dnum = D * D * (m * special.j0(m * D) * h0 + k * special.j1(m * D) * h1)
    out[near] = dnum / (rho[near] + k)
    return -0.5j * np.pi * out


def _richardson_weights(levels: int) -> np.ndarray:
    """Weights of the extrapolation to 0 through nodes 1, 1/2, 1/4, ..."""
    nodes = 0.5 ** np.arange(levels)
    w = np.ones(levels)
    for i in range(levels):
        for j in range(levels):
            if i != j:
                w[i] *= nodes[j] / (nodes[j] - nodes[i])
    return w


def absorbing_multiplier(k: float, eps: float, levels: int, rho) -> np.ndarray:
    rho2 = np.asarray(rho, dtype=float) ** 2
    out = np.zeros(rho2.shape, dtype=complex)
    for w, t in zip(_richardson_weights(levels), 0.5 ** np.arange(levels)):
        out += w / (k * k - rho2 + 1j * eps * t)
    return out


class ResolventOperator:
    """Cached FFT multiplier for one grid and one parameter set.

    Acts on raw arrays with the layout of ``grid`` (physical space).
    """

    def __init__(self, grid: Grid, params: ResolventParams, workers: Optional[int] = None,
                 check: bool = True):
        self.grid = grid
        self.params = params
        self.workers = workers
        if check:
            check_admissible(grid, params.k)
        m = np.fft.fftfreq(grid.points_per_dim, 1.0 / grid.points_per_dim)
        xi = 2.0 * np.pi * m / grid.box_extent
        axes = np.meshgrid(*([xi] * grid.n_dim), indexing="ij", sparse=True)
        rho = np.sqrt(sum(a * a for a in axes))
        if params.method == "outgoing":
            D = params.truncation_radius(grid)
            need = D + params.source_radius + params.resolved_target_radius(grid)
            if check and grid.box_extent <= need:
                raise ResolventError(
                    f"box extent {grid.box_extent:g} too small for truncated kernel (need > {need:g})")
            self.truncation = D
            self.multiplier = _radial_eval(lambda r: truncated_kernel_hat(grid.n_dim, params.k, D, r), rho)
        else:
            eps = params.resolved_epsilon(grid)
            self.truncation = None
            self.multiplier = absorbing_multiplier(params.k, eps, params.extrapolation_levels, rho)

    def __call__(self, values: np.ndarray) -> np.ndarray:
        spec = sfft.fftn(values, workers=self.workers)
        spec *= self.multiplier
        return sfft.ifftn(spec, workers=self.workers)


def _radial_eval(func, rho: np.ndarray) -> np.ndarray:
    """Evaluate a radial function once per distinct |xi| value."""
    rho = np.broadcast_to(rho, rho.shape)
    uniq, inv = np.unique(np.round(rho, 12), return_inverse=True)
    return func(uniq)[inv].reshape(rho.shape)


def apply_resolvent(f: SampledField, params: ResolventParams,
                    workers: Optional[int] = None) -> SampledField:
    """Apply the outgoing resolvent to a physical-space field.

    The input must be supported in ``|x| <= params.source_radius``
    (at most ``L/4``); the output is trusted on ``|x| <= target radius``
    (by default ``L/4``, the ball inscribed in the inner half-box).
    """
    if f.space != PHYSICAL:
        raise ResolventError("apply_resolvent expects a physical-space field")
    f.check_finite()
    g = f.grid
    if params.source_radius > g.box_extent / 4.0 + 1e-12:
        raise ResolventError("source radius must not exceed a quarter of the box")
    outside = g.radius > params.source_radius + 1e-12
    if np.any(np.asarray(f.values)[outside] != 0):
        raise ResolventError("input is not supported inside the declared source radius")
    op = ResolventOperator(g, params, workers)
    return SampledField(g, op(np.asarray(f.values, dtype=complex)), PHYSICAL)


# ---------------------------------------------------------------------------
# fundamental solution and kernels in physical space
# ---------------------------------------------------------------------------

def fundamental_solution(n_dim: int, k: float, r) -> np.ndarray:
    """``C_n k^((n-2)/2) H^(1)_((n-2)/2)(k r) / r^((n-2)/2)``, ``C_n = 1/(2i (2pi)^((n-2)/2))``."""
    r = np.asarray(r, dtype=float)
    if np.any(~(r > 0)):
        raise ResolventError("fundamental_solution needs r > 0")
    if not k > 0:
        raise ResolventError("fundamental_solution needs k > 0")
    nu = (n_dim - 2) / 2.0
    c_n = 1.0 / (2j * (2.0 * np.pi) ** nu)
    return c_n * k**nu * bessel_h1(nu, k * r) / r**nu


def multiplier_kernel(n_dim: int, k: float, r) -> np.ndarray:
    """Physical-space kernel of ``(k^2 - |xi|^2 + i0)^(-1)``."""
    r = np.asarray(r, dtype=float)
    if n_dim == 3:
        return -np.exp(1j * k * r) / (4.0 * np.pi * r)
    return -0.25j * bessel_h1(0, k * r)


def discrete_helmholtz_residual(f: SampledField, u: SampledField, k: float, radius: float) -> float:
    """Max |(Delta_h + k^2) u - f| / max|f| over nodes with |x| <= radius.

    ``Delta_h`` is the second-order central-difference Laplacian.
    """
    g = f.grid
    h2 = g.spacing**2
    lap = -2.0 * g.n_dim * u.values
    for ax in range(g.n_dim):
        lap = lap + np.roll(u.values, 1, axis=ax) + np.roll(u.values, -1, axis=ax)
    res = lap / h2 + k * k * u.values - f.values
    sel = g.radius <= radius
    return float(np.max(np.abs(res[sel])) / np.max(np.abs(f.values)))
