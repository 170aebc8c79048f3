"""High-frequency backscattering Born approximation ``q_{B,H}`` and its error.

``q^_{B,H}(xi) = chi*(|xi|/2) A(-theta, theta, k)`` at ``xi = -2 k theta``.  The
polar data are interpolated onto the Cartesian frequency nodes, bilinearly in
``(k, angle)`` by default.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.spatial import ConvexHull, cKDTree

from .lippmann_schwinger import FarFieldDataset
from .potentials import PotentialSpec, grid_transform_at, sample
from .spectral_core import (FREQUENCY, EstimationError, Grid, RegularityEstimate, SampledField, estimate_regularity,
                            forward_transform, inverse_transform, shell_energies, shell_index,
                            sobolev_norm)

logger = logging.getLogger(__name__)

DEFAULT_MAX_SPACING = 2.0 * np.pi / 32.0


class BelowFloorError(EstimationError):
    """The Born difference vanishes to rounding; there is nothing to fit."""


class CoverageError(ValueError):
    pass


@dataclass(frozen=True)
class CutoffSpec:
    """Smooth high-frequency cutoff: 0 below ``C0``, 1 from ``2 C0`` on."""

    C0: float
    theoretical_C0: Optional[float] = None

    def __post_init__(self):
        if not self.C0 > 1.0:
            raise ValueError("C0 must exceed 1")


def _smoothstep3(s):
    # C^3 transition: 35 s^4 - 84 s^5 + 70 s^6 - 20 s^7
    return s**4 * (35.0 + s * (-84.0 + s * (70.0 - 20.0 * s)))


def chi_star(t, spec: CutoffSpec):
    t = np.asarray(t, dtype=float)
    s = np.clip((t - spec.C0) / spec.C0, 0.0, 1.0)
    out = _smoothstep3(s)
    out = np.where(t < spec.C0, 0.0, np.where(t >= 2.0 * spec.C0, 1.0, out))
    return out if out.ndim else float(out)


def min_c0(q: SampledField, alpha: float) -> float:
    """Sufficient cutoff ``max((2 ||q||_{W^{alpha,2}})^4, 1)``."""
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    norm = sobolev_norm(forward_transform(q), alpha, homogeneous=False)
    return max((2.0 * norm) ** 4, 1.0)


# ---------------------------------------------------------------------------
# polar -> Cartesian interpolation
# ---------------------------------------------------------------------------

def _angles_2d(theta):
    return np.mod(np.arctan2(theta[:, 1], theta[:, 0]), 2.0 * np.pi)


def angular_spacing(theta: np.ndarray) -> float:
    """Largest angular gap (2D) or longest hull edge angle (3D) of the directions."""
    if theta.shape[1] == 2:
        a = np.sort(_angles_2d(theta))
        gaps = np.diff(np.concatenate([a, [a[0] + 2.0 * np.pi]]))
        return float(gaps.max())
    hull = ConvexHull(theta)
    best = 0.0
    for s in hull.simplices:
        for i in range(3):
            c = np.clip(theta[s[i]] @ theta[s[(i + 1) % 3]], -1.0, 1.0)
            best = max(best, math.acos(c))
    return best


def _angle_weights_2d(theta, directions, interp):
    """Indices/weights of the periodic angular interpolation for each direction."""
    a = _angles_2d(theta)
    order = np.argsort(a)
    a_sorted = a[order]
    M = a_sorted.size
    t = np.mod(np.arctan2(directions[:, 1], directions[:, 0]), 2.0 * np.pi)
    pos = np.searchsorted(a_sorted, t, side="right")
    i0 = (pos - 1) % M
    i1 = pos % M
    gap = np.mod(a_sorted[i1] - a_sorted[i0], 2.0 * np.pi)
    gap = np.where(gap == 0, 2.0 * np.pi, gap)
    w1 = np.mod(t - a_sorted[i0], 2.0 * np.pi) / gap
    if interp == "nearest":
        w1 = np.round(w1)
    idx = np.stack([order[i0], order[i1]], -1)
    return idx, np.stack([1.0 - w1, w1], -1)


def _angle_weights_3d(theta, directions, interp):
    if interp == "nearest":
        _, nn = cKDTree(theta).query(directions)
        return nn[:, None], np.ones((directions.shape[0], 1))
    hull = ConvexHull(theta)
    tri = hull.simplices
    # a ray hits the face whose outward plane sees it first: max of d.n / offset
    normals = hull.equations[:, :3]
    offsets = -hull.equations[:, 3]
    face = np.argmax((directions @ normals.T) / offsets, axis=1)
    idx = tri[face]
    verts = theta[idx]  # (P, 3, 3)
    w = np.linalg.solve(np.transpose(verts, (0, 2, 1)), directions[..., None])[..., 0]
    w = np.clip(w, 0.0, None)
    w /= w.sum(axis=1, keepdims=True)
    return idx, w


def polar_interpolate(dataset_k: np.ndarray, theta: np.ndarray, values: np.ndarray,
                      xi: np.ndarray, interp: str = "linear") -> Tuple[np.ndarray, np.ndarray]:
    """Interpolate polar samples ``values[k, theta]`` at frequencies ``xi = -2 k theta``.

    Returns values and an inside-coverage mask; outside points get 0.
    """
    if interp not in ("nearest", "linear"):
        raise ValueError("interp must be 'nearest' or 'linear'")
    rho = np.linalg.norm(xi, axis=1)
    kk = 0.5 * rho
    inside = (kk >= dataset_k[0]) & (kk <= dataset_k[-1]) & (rho > 0)
    out = np.zeros(xi.shape[0], dtype=complex)
    if not inside.any():
        return out, inside
    x = xi[inside]
    k = kk[inside]
    direction = -x / np.linalg.norm(x, axis=1, keepdims=True)
    if theta.shape[1] == 2:
        aidx, aw = _angle_weights_2d(theta, direction, interp)
    else:
        aidx, aw = _angle_weights_3d(theta, direction, interp)
    K = dataset_k.size
    j = np.clip(np.searchsorted(dataset_k, k, side="right") - 1, 0, max(K - 2, 0))
    if K == 1:
        kw = np.zeros_like(k)
        j1 = j
    else:
        kw = (k - dataset_k[j]) / (dataset_k[j + 1] - dataset_k[j])
        j1 = j + 1
    if interp == "nearest":
        kw = np.round(kw)
    acc = np.zeros(x.shape[0], dtype=complex)
    for c in range(aidx.shape[1]):
        acc += aw[:, c] * ((1.0 - kw) * values[j, aidx[:, c]] + kw * values[j1, aidx[:, c]])
    out[inside] = acc
    return out, inside


def assemble(dataset: FarFieldDataset, grid: Grid, spec: CutoffSpec, interp: str = "linear",
             values: Optional[np.ndarray] = None,
             max_angular_spacing: float = DEFAULT_MAX_SPACING) -> Tuple[SampledField, np.ndarray]:
    """Cartesian ``q^_{B,H}`` and the coverage mask.

    ``values`` overrides ``dataset.values`` (same layout); flagged cells are
    treated as missing by zeroing them, which the caller should avoid by
    checking ``dataset.valid``.
    """
    if grid.n_dim != dataset.n_dim:
        raise CoverageError("dataset and grid dimensions differ")
    spacing = angular_spacing(dataset.theta_samples)
    if spacing > max_angular_spacing + 1e-12:
        raise CoverageError(f"angular spacing {spacing:.4g} exceeds the required "
                            f"{max_angular_spacing:.4g} rad")
    vals = dataset.values if values is None else np.asarray(values)
    vals = np.where(dataset.valid, vals, 0.0)
    xi = np.stack([np.broadcast_to(c, grid.shape).ravel() for c in grid.frequencies()], -1)
    interp_vals, inside = polar_interpolate(dataset.k_samples, dataset.theta_samples, vals, xi, interp)
    rho = grid.frequency_radius.ravel()
    weight = chi_star(0.5 * rho, spec)
    field = (weight * interp_vals).reshape(grid.shape)
    mask = (inside & (0.5 * rho >= spec.C0)).reshape(grid.shape)
    return SampledField(grid, field, FREQUENCY), mask


def annulus_window(grid: Grid, mask: np.ndarray, base_scale: float = 1.0) -> Tuple[int, int]:
    """Shells lying completely inside the radial extent of ``mask``."""
    rho = grid.frequency_radius[mask]
    lo, hi = rho.min(), rho.max()
    j_lo = int(math.ceil(math.log2(lo / base_scale))) + 1
    j_hi = int(math.floor(math.log2(hi / base_scale)))
    return j_lo, j_hi


@dataclass
class BornErrorReport:
    q_estimate: RegularityEstimate
    difference_estimate: RegularityEstimate
    difference: SampledField
    mask: np.ndarray
    cutoff: CutoffSpec
    max_contraction: Optional[float] = None

    @property
    def gain(self) -> float:
        return self.difference_estimate.fitted_exponent - self.q_estimate.fitted_exponent

    def to_csv(self) -> str:
        eq = dict(self.q_estimate.shell_energies)
        ed = dict(self.difference_estimate.shell_energies)
        lines = ["shell,energy_q,energy_difference"]
        for j in sorted(eq):
            lines.append(f"{j},{eq[j]:.17g},{ed.get(j, 0.0):.17g}")
        return "\n".join(lines) + "\n"

    def summary(self) -> str:
        wq, wd = self.q_estimate, self.difference_estimate
        return (f"exponent_q = {wq.fitted_exponent:.6f} (window {wq.fit_window})\n"
                f"exponent_difference = {wd.fitted_exponent:.6f}\n"
                f"gain = {self.gain:.6f}\n"
                f"C0_used = {self.cutoff.C0:g}\n"
                f"C0_theoretical = {self.cutoff.theoretical_C0}\n"
                f"max_contraction = {self.max_contraction}\n")


def born_error_report(q_spec: PotentialSpec, dataset: FarFieldDataset, grid: Grid,
                      spec: CutoffSpec, interp: str = "linear", window: Optional[Tuple[int, int]] = None,
                      max_angular_spacing: float = DEFAULT_MAX_SPACING,
                      floor: float = 1e-13) -> BornErrorReport:
    """Regularity of ``q`` and of ``q^ chi* - q^_{B,H}`` on the coverage annulus.

    The reference ``q^`` enters through the same polar samples and the same
    interpolation as the data, so interpolation error cancels in the
    difference and the measured gain reflects the multiple-scattering terms.
    """
    q = sample(q_spec, grid)
    ks = dataset.k_samples
    eta = -2.0 * ks[:, None, None] * dataset.theta_samples[None, :, :]
    qhat_polar = grid_transform_at(q, eta.reshape(-1, grid.n_dim)).reshape(ks.size, -1)
    diff_polar = np.where(dataset.valid, qhat_polar - dataset.values, 0.0)
    if np.max(np.abs(diff_polar)) <= floor * max(np.max(np.abs(qhat_polar)), 1e-300):
        raise BelowFloorError("difference below interpolation floor")
    diff, mask = assemble(dataset, grid, spec, interp, values=diff_polar,
                          max_angular_spacing=max_angular_spacing)
    qhat = forward_transform(q)
    q_mask_field = SampledField(grid, np.where(mask, qhat.values, 0.0), FREQUENCY)
    d_mask_field = SampledField(grid, np.where(mask, diff.values, 0.0), FREQUENCY)
    if window is None:
        window = annulus_window(grid, mask)
    est_q = estimate_regularity(shell_energies(q_mask_field, mask=mask), window, grid.points_per_dim)
    est_d = estimate_regularity(shell_energies(d_mask_field, mask=mask), window, grid.points_per_dim)
    worst = dataset.meta.get("max_contraction")
    return BornErrorReport(est_q, est_d, inverse_transform(d_mask_field), mask, spec,
                           None if worst is None else float(worst))


def polar_shell_energies(k_samples: np.ndarray, n_dim: int, values: np.ndarray,
                         base_scale: float = 1.0):
    """Shell energies from samples on ``|eta| = 2k`` with uniform angular weights.

    The frequency measure is ``(2k)^(n-1) 2 dk dOmega``; ``values`` has shape
    (K, M) with M directions uniform on the sphere.
    """
    k = np.asarray(k_samples, dtype=float)
    dk = np.gradient(k) if k.size > 1 else np.ones(1)
    M = values.shape[1]
    omega = 2.0 * np.pi if n_dim == 2 else 4.0 * np.pi
    w = (2.0 * k) ** (n_dim - 1) * 2.0 * dk * omega / M
    e_k = w * np.sum(np.abs(values) ** 2, axis=1)
    idx = shell_index(2.0 * k, base_scale)
    top = int(idx.max())
    return [(j, float(np.sum(e_k[idx == j]))) for j in range(1, top + 1)]
