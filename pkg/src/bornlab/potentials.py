"""Compactly supported test potentials with known Fourier transforms.

Every potential lives in the open unit ball.  The closed-form kinds
(``ball_indicator``, ``radial_cusp``, ``smooth_bump`` and translate sums of
them) come with an analytic transform used as a reference oracle, and every
kind carries its critical Sobolev exponent.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy import special

from .spectral_core import FREQUENCY, Grid, SampledField, forward_transform, inverse_transform

KINDS = ("ball_indicator", "radial_cusp", "smooth_bump", "translate_sum", "rough_random")
SAMPLING_MODES = ("auto", "point", "cell")

# boundary cells of discontinuous kinds are averaged on a sub x sub lattice
_CELL_SUBSAMPLES = 16


class PotentialError(ValueError):
    pass


@dataclass(frozen=True)
class PotentialSpec:
    kind: str
    n_dim: int = 2
    amplitude: float = 1.0
    radius: float = 1.0
    gamma: float = 1.0
    seed: int = 0
    target_exponent: float = 0.75
    components: Tuple[Tuple["PotentialSpec", Tuple[float, ...], float], ...] = field(default=())
    sampling: str = "auto"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise PotentialError(f"unknown potential kind {self.kind!r}")
        if self.sampling not in SAMPLING_MODES:
            raise PotentialError(f"unknown sampling mode {self.sampling!r}")
        if self.n_dim not in (2, 3):
            raise PotentialError("n_dim must be 2 or 3")
        if not np.isfinite(self.amplitude):
            raise PotentialError("amplitude must be finite")
        if self.kind == "translate_sum":
            if not self.components:
                raise PotentialError("translate_sum needs components")
            for spec, center, weight in self.components:
                if spec.kind in ("translate_sum", "rough_random"):
                    raise PotentialError(f"translate_sum cannot nest {spec.kind}")
                if spec.n_dim != self.n_dim or len(center) != self.n_dim:
                    raise PotentialError("component dimension mismatch")
                if not np.isfinite(weight):
                    raise PotentialError("component weights must be finite")
                if np.linalg.norm(center) + spec.radius >= 1.0 + 1e-12:
                    raise PotentialError("translated component leaves the unit ball")
        elif self.kind != "rough_random":
            if not 0.0 < self.radius <= 1.0:
                raise PotentialError("radius must lie in (0, 1]")
        if self.kind == "radial_cusp" and self.gamma < 0:
            raise PotentialError("cusp order gamma must be nonnegative")

    # --- text record ---------------------------------------------------
    def to_dict(self) -> dict:
        d = {"kind": self.kind, "n_dim": self.n_dim, "amplitude": float(self.amplitude)}
        if self.sampling != "auto":
            d["sampling"] = self.sampling
        if self.kind in ("ball_indicator", "radial_cusp", "smooth_bump"):
            d["radius"] = float(self.radius)
        if self.kind == "radial_cusp":
            d["gamma"] = float(self.gamma)
        if self.kind == "rough_random":
            d["seed"] = int(self.seed)
            d["target_exponent"] = float(self.target_exponent)
        if self.kind == "translate_sum":
            d["components"] = [{"spec": s.to_dict(), "center": [float(c) for c in ctr],
                                "weight": float(w)} for s, ctr, w in self.components]
        return d

    def to_record(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "PotentialSpec":
        d = dict(d)
        comps = d.pop("components", ())
        parsed = tuple((cls.from_dict(c["spec"]), tuple(float(x) for x in c["center"]),
                        float(c["weight"])) for c in comps)
        return cls(components=parsed, **d)

    @classmethod
    def from_record(cls, text: str) -> "PotentialSpec":
        return cls.from_dict(json.loads(text))


def ball_indicator(n_dim=2, amplitude=1.0, radius=1.0, sampling="auto") -> PotentialSpec:
    return PotentialSpec("ball_indicator", n_dim, amplitude, radius, sampling=sampling)


def radial_cusp(gamma, n_dim=2, amplitude=1.0, radius=1.0) -> PotentialSpec:
    return PotentialSpec("radial_cusp", n_dim, amplitude, radius, gamma=gamma)


def smooth_bump(n_dim=2, amplitude=1.0, radius=1.0) -> PotentialSpec:
    return PotentialSpec("smooth_bump", n_dim, amplitude, radius)


def translate_sum(parts, n_dim=2, amplitude=1.0) -> PotentialSpec:
    comps = tuple((s, tuple(float(c) for c in ctr), float(w)) for s, ctr, w in parts)
    return PotentialSpec("translate_sum", n_dim, amplitude, components=comps)


def rough_random(seed, target_exponent, n_dim=2, amplitude=1.0) -> PotentialSpec:
    return PotentialSpec("rough_random", n_dim, amplitude, seed=seed,
                         target_exponent=target_exponent)


# ---------------------------------------------------------------------------
# profiles
# ---------------------------------------------------------------------------

def _bump_profile(t):
    """exp(1 - 1/(1 - t^2)) on |t| < 1, zero outside; value 1 at t = 0."""
    t = np.asarray(t, dtype=float)
    out = np.zeros(t.shape)
    inside = np.abs(t) < 1.0
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - t[inside] ** 2))
    return out


def _radial_profile(spec: PotentialSpec, r):
    t = np.asarray(r, dtype=float) / spec.radius
    if spec.kind == "ball_indicator":
        return (t < 1.0).astype(float)
    if spec.kind == "radial_cusp":
        return np.where(t < 1.0, np.clip(1.0 - t * t, 0.0, None) ** spec.gamma, 0.0)
    if spec.kind == "smooth_bump":
        return _bump_profile(t)
    raise PotentialError(f"{spec.kind} has no radial profile")


def _sample_radial(spec: PotentialSpec, grid: Grid, center, sampling: str) -> np.ndarray:
    coords = [c - float(x0) for c, x0 in zip(grid.coordinates(), center)]
    r = np.sqrt(sum(c * c for c in coords))
    values = _radial_profile(spec, r)
    if sampling == "auto":
        sampling = "cell" if spec.kind == "ball_indicator" else "point"
    if sampling == "cell":
        h = grid.spacing
        edge = np.abs(r - spec.radius) <= 0.5 * h * np.sqrt(grid.n_dim) + 1e-12
        if np.any(edge):
            values = values.copy()
            sub = (np.arange(_CELL_SUBSAMPLES) + 0.5) / _CELL_SUBSAMPLES - 0.5
            pts = [np.broadcast_to(c, grid.shape)[edge] for c in coords]
            acc = np.zeros(pts[0].shape)
            for offs in np.stack(np.meshgrid(*([sub] * grid.n_dim), indexing="ij"), -1).reshape(-1, grid.n_dim):
                rr = np.sqrt(sum((p + o * h) ** 2 for p, o in zip(pts, offs)))
                acc += _radial_profile(spec, rr)
            values[edge] = acc / _CELL_SUBSAMPLES**grid.n_dim
    elif sampling != "point":
        raise PotentialError(f"unknown sampling mode {sampling!r}")
    return values


def _rough_random_values(spec: PotentialSpec, grid: Grid) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(key=int(spec.seed)))
    rho = grid.frequency_radius
    mag = (1.0 + rho) ** (-(spec.target_exponent + grid.n_dim / 2.0))
    phase = np.exp(2j * np.pi * rng.random(grid.shape))
    field = inverse_transform(SampledField(grid, mag * phase, FREQUENCY))
    raw = field.values.real
    # fixed smooth cutoff: 1 on |x| <= 0.5, 0 for |x| >= 0.9
    r = grid.radius
    t = np.clip((r - 0.5) / 0.4, 0.0, 1.0)
    cut = np.where(t < 1.0, _bump_profile(t), 0.0)
    vals = raw * cut
    peak = np.max(np.abs(vals))
    return vals / peak if peak > 0 else vals


def sample(spec: PotentialSpec, grid: Grid, sampling: Optional[str] = None) -> SampledField:
    """Sample a potential on ``grid``.

    ``sampling="auto"`` evaluates pointwise, except that cells cut by the
    boundary of an indicator carry their exact area/volume fraction (averaged
    on a fine sub-lattice); ``"point"`` and ``"cell"`` force one mode.  The
    default is the mode recorded in ``spec``.
    """
    if sampling is None:
        sampling = spec.sampling
    if spec.n_dim != grid.n_dim:
        raise PotentialError("potential and grid dimensions differ")
    if grid.box_extent / 2.0 <= 1.0:
        raise PotentialError("unit-ball support exceeds the box")
    if 2.0 / grid.spacing < 16:
        raise PotentialError("grid does not resolve the support (need >= 16 cells across)")
    if spec.kind == "translate_sum":
        vals = np.zeros(grid.shape)
        for comp, center, weight in spec.components:
            vals += weight * comp.amplitude * _sample_radial(comp, grid, center, sampling)
    elif spec.kind == "rough_random":
        vals = _rough_random_values(spec, grid)
    else:
        vals = _sample_radial(spec, grid, (0.0,) * grid.n_dim, sampling)
    return SampledField(grid, spec.amplitude * vals)


# ---------------------------------------------------------------------------
# analytic transforms
# ---------------------------------------------------------------------------

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(512)


def _hankel_radial(profile, n_dim: int, rho: np.ndarray) -> np.ndarray:
    """Radial Fourier transform of a profile supported in [0, 1] by Gauss-Legendre."""
    r = 0.5 * (_GL_NODES + 1.0)
    w = 0.5 * _GL_WEIGHTS
    f = profile(r)
    out = np.empty(rho.shape)
    flat = rho.ravel()
    res = np.empty(flat.shape)
    for start in range(0, flat.size, 4096):
        chunk = flat[start:start + 4096, None]
        if n_dim == 2:
            ker = special.j0(chunk * r) * r
            res[start:start + 4096] = 2.0 * np.pi * (ker * (w * f)).sum(axis=1)
        else:
            ker = np.sinc(chunk * r / np.pi) * r * r
            res[start:start + 4096] = 4.0 * np.pi * (ker * (w * f)).sum(axis=1)
    out[...] = res.reshape(rho.shape)
    return out


def radial_cusp_transform(gamma: float, n_dim: int, rho) -> np.ndarray:
    """Transform of ``(1 - |x|^2)_+^gamma``: (2pi)^(n/2) 2^g Gamma(g+1) J_(n/2+g)(rho)/rho^(n/2+g)."""
    rho = np.asarray(rho, dtype=float)
    nu = n_dim / 2.0 + gamma
    pref = (2.0 * np.pi) ** (n_dim / 2.0) * 2.0**gamma * special.gamma(gamma + 1.0)
    out = np.empty(rho.shape)
    small = rho < 1e-6
    out[small] = pref / (2.0**nu * special.gamma(nu + 1.0))
    big = ~small
    out[big] = pref * _bessel_j(nu, rho[big]) / rho[big] ** nu
    return out


def _bessel_j(nu: float, x: np.ndarray) -> np.ndarray:
    # integer and half-integer orders of the indicator have fast dedicated routines
    if nu == 1.0:
        return special.j1(x)
    if nu == 1.5:
        return np.sqrt(2.0 * x / np.pi) * special.spherical_jn(1, x)
    return special.jv(nu, x)


def _radial_transform(spec: PotentialSpec, rho: np.ndarray) -> np.ndarray:
    R = spec.radius
    n = spec.n_dim
    scaled = rho * R
    if spec.kind == "ball_indicator":
        base = radial_cusp_transform(0.0, n, scaled)
    elif spec.kind == "radial_cusp":
        base = radial_cusp_transform(spec.gamma, n, scaled)
    elif spec.kind == "smooth_bump":
        base = _hankel_radial(_bump_profile, n, scaled)
    else:
        raise PotentialError(f"no radial transform for {spec.kind}")
    return R**n * base


def analytic_transform(spec: PotentialSpec, xi) -> np.ndarray:
    """Reference value of q^(xi) for closed-form kinds; ``xi`` has shape (..., n)."""
    xi = np.asarray(xi, dtype=float)
    if xi.shape[-1] != spec.n_dim:
        raise PotentialError("frequency vector dimension mismatch")
    if spec.kind == "rough_random":
        raise PotentialError("rough_random has no closed-form transform")
    if spec.kind == "translate_sum":
        total = np.zeros(xi.shape[:-1], dtype=complex)
        for comp, center, weight in spec.components:
            shift = np.exp(-1j * (xi @ np.asarray(center)))
            total += weight * shift * analytic_transform(comp, xi)
        return spec.amplitude * total
    rho = np.linalg.norm(xi, axis=-1)
    return spec.amplitude * _radial_transform(spec, rho).astype(complex)


def radial_transform_oracle(spec: PotentialSpec):
    """Callable ``qhat(xi)`` for radial closed-form kinds, evaluated through |xi| only."""
    if spec.kind not in ("ball_indicator", "radial_cusp", "smooth_bump"):
        raise PotentialError("radial oracle needs a radial closed-form kind")

    def qhat(xi):
        xi = np.asarray(xi, dtype=float)
        return spec.amplitude * _radial_transform(spec, np.linalg.norm(xi, axis=-1))

    return qhat


def known_exponent(spec: PotentialSpec) -> Optional[float]:
    """Critical Sobolev exponent, or ``None`` when the potential is smooth."""
    if spec.kind == "ball_indicator":
        return 0.5
    if spec.kind == "radial_cusp":
        return spec.gamma + 0.5
    if spec.kind == "smooth_bump":
        return None
    if spec.kind == "rough_random":
        return float(spec.target_exponent)
    exps = [known_exponent(c) for c, _, w in spec.components if w != 0]
    exps = [e for e in exps if e is not None]
    return min(exps) if exps else None


def grid_transform_at(q: SampledField, xi: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Exact discrete-time transform ``sum h^n q(y) exp(-i xi.y)`` at arbitrary ``xi`` (..., n)."""
    g = q.grid
    vals = np.asarray(q.values).ravel()
    keep = vals != 0
    pts = np.stack([np.broadcast_to(c, g.shape).ravel()[keep] for c in g.coordinates()], -1)
    w = vals[keep] * g.cell_volume
    xi = np.asarray(xi, dtype=float)
    flat = xi.reshape(-1, g.n_dim)
    out = np.empty(flat.shape[0], dtype=complex)
    for s in range(0, flat.shape[0], chunk):
        ph = flat[s:s + chunk] @ pts.T
        out[s:s + chunk] = np.exp(-1j * ph) @ w
    return out.reshape(xi.shape[:-1])


def transform_error(spec: PotentialSpec, grid: Grid, fraction: float = 0.5) -> float:
    """Max |DFT(sample) - analytic| / max|analytic| over |xi| <= fraction * Nyquist."""
    spec_field = forward_transform(sample(spec, grid))
    xi = np.stack([np.broadcast_to(c, grid.shape) for c in grid.frequencies()], -1)
    sel = grid.frequency_radius <= fraction * grid.nyquist
    exact = analytic_transform(spec, xi[sel])
    err = np.abs(spec_field.values[sel] - exact)
    return float(err.max() / np.abs(exact).max())
