"""Fourier-side quadrature oracles for the multiple-scattering terms.

Everything is organised around the sphere ``Gamma(eta) = {|x - eta/2| = |eta|/2}``.
With ``c = eta/2``, ``R = |eta|/2`` and ``zeta = c + r omega`` one has
``zeta . (eta - zeta) = R^2 - r^2``, so the resolvent singularity
``1/(zeta.(eta - zeta) + i0)`` is split as a principal value, paired across
``Gamma`` by the reflection ``r = R(1 - t) <-> R(1 + t)``, plus
``-i pi delta`` contributing ``dsigma / |eta|``.

Integration variables are discretised as sets of concentric *rings* (2D) or
shells (3D) around ``c``, all carrying the same direction rule.  For radial
``q^`` the pair kernel ``q^(zeta_i - zeta_j)`` between two rings depends on the
angle difference only, so in 2D it is applied by FFT convolution.

Normalisation: with ``f^(xi) = int f e^{-i x.xi}``,

    Q^_2(eta) = (2 pi)^{-n} [ p.v. int q^(eta - zeta) q^(zeta) / (zeta.(eta - zeta)) dzeta
                              - (i pi / |eta|) int_Gamma q^(eta - zeta) q^(zeta) dsigma ],

and ``Q^_4`` expands into six terms with prefactor ``(2 pi)^{-3n}`` and
coefficients ``1, -2i pi/|eta|, -i pi/|eta|, -2 pi^2/|eta|^2, -pi^2/|eta|^2,
i pi^3/|eta|^3``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.fft as sfft
from scipy.stats import qmc

from .potentials import PotentialSpec, analytic_transform, radial_transform_oracle

logger = logging.getLogger(__name__)


class QuadratureError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# transform oracles
# ---------------------------------------------------------------------------

@dataclass
class TransformOracle:
    """``q^`` as a callable on (..., n) arrays, with an optional radial profile."""

    n_dim: int
    func: Callable[[np.ndarray], np.ndarray]
    radial: Optional[Callable[[np.ndarray], np.ndarray]] = None
    scale: complex = 1.0

    def __call__(self, xi) -> np.ndarray:
        return self.scale * np.asarray(self.func(np.asarray(xi, dtype=float)), dtype=complex)

    def of_radius(self, rho) -> np.ndarray:
        if self.radial is None:
            raise QuadratureError("oracle is not radial")
        return self.scale * np.asarray(self.radial(np.asarray(rho, dtype=float)), dtype=complex)

    def scaled(self, lam: complex) -> "TransformOracle":
        return TransformOracle(self.n_dim, self.func, self.radial, self.scale * lam)


def as_oracle(q) -> TransformOracle:
    if isinstance(q, TransformOracle):
        return q
    if isinstance(q, PotentialSpec):
        if q.kind == "rough_random":
            raise QuadratureError("rough_random has no analytic transform")
        radial = None
        if q.kind in ("ball_indicator", "radial_cusp", "smooth_bump"):
            prof = radial_transform_oracle(q)
            radial = lambda r, _p=prof, _n=q.n_dim: _p(np.stack([r] + [np.zeros_like(r)] * (_n - 1), -1))
        return TransformOracle(q.n_dim, lambda xi, _s=q: analytic_transform(_s, xi), radial)
    raise QuadratureError("need a PotentialSpec or TransformOracle with an analytic transform")


# ---------------------------------------------------------------------------
# sphere rules
# ---------------------------------------------------------------------------

def unit_sphere_rule(n_dim: int, order: int) -> Tuple[np.ndarray, np.ndarray]:
    """Directions and weights exact for spherical harmonics up to degree ``order``.

    2D: ``order + 1`` uniform angles.  3D: Gauss-Legendre in ``cos`` of the
    polar angle (``order // 2 + 1`` nodes) times ``order + 1`` uniform azimuths.
    """
    if order < 0:
        raise ValueError("order must be nonnegative")
    m = order + 1
    phi = 2.0 * np.pi * np.arange(m) / m
    if n_dim == 2:
        return np.stack([np.cos(phi), np.sin(phi)], -1), np.full(m, 2.0 * np.pi / m)
    if n_dim != 3:
        raise ValueError("n_dim must be 2 or 3")
    x, w = np.polynomial.legendre.leggauss(order // 2 + 1)
    s = np.sqrt(1.0 - x * x)
    dirs = np.stack([np.outer(s, np.cos(phi)), np.outer(s, np.sin(phi)),
                     np.outer(x, np.ones(m))], -1).reshape(-1, 3)
    weights = np.outer(w, np.full(m, 2.0 * np.pi / m)).ravel()
    return dirs, weights


@dataclass
class SphereRule:
    eta: np.ndarray
    nodes: np.ndarray
    weights: np.ndarray
    order: int

    @property
    def measure(self) -> float:
        return float(np.sum(self.weights))

    def integrate(self, f) -> complex:
        return complex(np.sum(self.weights * f(self.nodes)))


def sphere_rule(eta, order: int, n_dim: Optional[int] = None) -> SphereRule:
    """Quadrature on ``Gamma(eta)``."""
    eta = np.asarray(eta, dtype=float)
    n_dim = eta.size if n_dim is None else n_dim
    if eta.size != n_dim:
        raise ValueError("eta dimension mismatch")
    rho = float(np.linalg.norm(eta))
    if rho == 0:
        raise QuadratureError("Gamma(0) is degenerate; eta must be nonzero")
    dirs, w = unit_sphere_rule(n_dim, order)
    R = 0.5 * rho
    return SphereRule(eta, 0.5 * eta + R * dirs, w * R ** (n_dim - 1), order)


# ---------------------------------------------------------------------------
# ring measures
# ---------------------------------------------------------------------------

@dataclass
class RingMeasure:
    """Concentric rings ``c + r_i U`` carrying radial weights ``W_i``."""

    radii: np.ndarray
    weights: np.ndarray

    def __len__(self):
        return self.radii.size


def sphere_measure(R: float, n_dim: int) -> RingMeasure:
    """``dsigma`` on Gamma (no 1/|eta| factor)."""
    return RingMeasure(np.array([R]), np.array([R ** (n_dim - 1)]))


def _dyadic_gl(lo: float, hi: float, order: int):
    """Gauss-Legendre nodes on octaves of ``[lo, hi]``, refined towards ``lo``."""
    x, w = np.polynomial.legendre.leggauss(order)
    nodes, weights = [], []
    b = hi
    while b > lo * (1 + 1e-12):
        a = max(0.5 * b, lo)
        nodes.append(0.5 * (a + b) + 0.5 * (b - a) * x)
        weights.append(0.5 * (b - a) * w)
        b = a
    return np.concatenate(nodes), np.concatenate(weights)


def pv_measure(R: float, n_dim: int, delta: float, order: int = 16, tail_octaves: int = 6) -> RingMeasure:
    """Principal-value measure ``r^{n-1} dr / (R^2 - r^2)`` on ``(0, inf)``.

    Mirror pairs ``R(1 -+ t)`` cover ``(0, 2R)`` with ``t`` in ``(delta, 1)``;
    the exterior ``r > 2R`` uses ``r = 2R/u`` on ``tail_octaves`` octaves of ``u``.
    The excluded band ``|r - R| < delta R`` is what Richardson extrapolation removes.
    """
    t, wt = _dyadic_gl(delta, 1.0, order)
    radii, weights = [], []
    for sign in (-1.0, 1.0):
        r = R * (1.0 + sign * t)
        radii.append(r)
        weights.append(wt * R * r ** (n_dim - 1) / (R * R - r * r))
    u, wu = _dyadic_gl(2.0 ** -tail_octaves, 1.0, order)
    r = 2.0 * R / u
    radii.append(r)
    weights.append(wu * (2.0 * R / (u * u)) * r ** (n_dim - 1) / (R * R - r * r))
    return RingMeasure(np.concatenate(radii), np.concatenate(weights))


def tube_measure(R: float, n_dim: int, half_width: float, order: int = 16) -> RingMeasure:
    """Lebesgue measure on the shell ``|r - R| <= half_width``."""
    x, w = np.polynomial.legendre.leggauss(order)
    r = R + half_width * x
    if np.any(r <= 0):
        raise QuadratureError("tube reaches the centre of Gamma")
    return RingMeasure(r, half_width * w * r ** (n_dim - 1))


class _Engine:
    """Evaluates ring sums of chains ``q^(eta - z1) q^(z1 - z2) ... q^(z_m)``."""

    def __init__(self, oracle: TransformOracle, eta, order: int):
        self.q = oracle
        self.eta = np.asarray(eta, dtype=float)
        self.n = self.eta.size
        self.c = 0.5 * self.eta
        self.R = 0.5 * float(np.linalg.norm(self.eta))
        self.dirs, self.dw = unit_sphere_rule(self.n, order)
        self.S = self.dirs.shape[0]
        self.fft = self.n == 2 and oracle.radial is not None
        if self.n == 2:
            self.phi = 2.0 * np.pi * np.arange(self.S) / self.S

    def nodes(self, r: float) -> np.ndarray:
        return self.c + r * self.dirs

    def end_left(self, r: float) -> np.ndarray:
        """``q^(eta - zeta)`` on ring ``r``."""
        return self.q(self.eta - self.nodes(r))

    def end_right(self, r: float) -> np.ndarray:
        """``q^(zeta)`` on ring ``r``."""
        return self.q(self.nodes(r))

    def transfer(self, f: np.ndarray, r_from: float, r_to: float, forward: bool) -> np.ndarray:
        """``g(b) = sum_a dw_a f(a) K(a, b)`` with ``K = q^(z_to - z_from)`` (forward)
        or ``q^(z_from - z_to)``."""
        if self.fft:
            d = np.sqrt(np.maximum(r_from**2 + r_to**2 - 2.0 * r_from * r_to * np.cos(self.phi), 0.0))
            ker = self.q.of_radius(d)
            return sfft.ifft(sfft.fft(f * self.dw) * sfft.fft(ker))
        a = self.nodes(r_from)
        b = self.nodes(r_to)
        diff = (b[None, :, :] - a[:, None, :]) if forward else (a[:, None, :] - b[None, :, :])
        ker = self.q(diff)
        return (f * self.dw) @ ker

    def ring_sum(self, f: np.ndarray) -> complex:
        return complex(np.sum(self.dw * f))

    def _kernel_spectra(self, radii: np.ndarray, r_to: float) -> np.ndarray:
        d = np.sqrt(np.maximum(radii[:, None] ** 2 + r_to**2
                               - 2.0 * radii[:, None] * r_to * np.cos(self.phi)[None, :], 0.0))
        return sfft.fft(self.q.of_radius(d), axis=1)

    def chain3(self, m1: RingMeasure, m2: RingMeasure, m3: RingMeasure) -> complex:
        """``int q^(eta - z1) q^(z1 - z2) q^(z2 - z3) q^(z3) dm1 dm2 dm3``."""
        left = np.array([w * self.end_left(r) for r, w in zip(m1.radii, m1.weights)])
        right = np.array([w * self.end_right(r) for r, w in zip(m3.radii, m3.weights)])
        total = 0j
        if self.fft:
            lhat = sfft.fft(left * self.dw, axis=1)
            rhat = sfft.fft(right * self.dw, axis=1)
            same = m1.radii.shape == m3.radii.shape and np.array_equal(m1.radii, m3.radii)
            for r2, w2 in zip(m2.radii, m2.weights):
                k3 = self._kernel_spectra(m3.radii, r2)
                k1 = k3 if same else self._kernel_spectra(m1.radii, r2)
                rv = sfft.ifft(np.sum(rhat * k3, axis=0))
                lv = sfft.ifft(np.sum(lhat * k1, axis=0))
                total += w2 * self.ring_sum(lv * rv)
            return total
        for r2, w2 in zip(m2.radii, m2.weights):
            rv = np.zeros(self.S, dtype=complex)
            for r3, f3 in zip(m3.radii, right):
                rv += self.transfer(f3, r3, r2, forward=True)   # q^(z2 - z3)
            lv = np.zeros(self.S, dtype=complex)
            for r1, f1 in zip(m1.radii, left):
                lv += self.transfer(f1, r1, r2, forward=False)  # q^(z1 - z2)
            total += w2 * self.ring_sum(lv * rv)
        return total

    def chain1(self, m: RingMeasure) -> complex:
        """``int q^(eta - z) q^(z) dm``."""
        return sum(w * self.ring_sum(self.end_left(r) * self.end_right(r))
                   for r, w in zip(m.radii, m.weights))


def _richardson(values: Sequence[complex]) -> complex:
    """Extrapolate estimates at ``delta, delta/2, delta/4, ...`` (error ~ delta) to 0."""
    v = [complex(x) for x in values]
    p = 1
    while len(v) > 1:
        v = [(2**p * v[i + 1] - v[i]) / (2**p - 1) for i in range(len(v) - 1)]
        p += 1
    return v[0]


def _cauchy(values: Sequence[complex], tol: float, what: str):
    a, b = complex(values[-2]), complex(values[-1])
    scale = max(abs(a), abs(b), 1e-300)
    if abs(a - b) > tol * scale:
        raise QuadratureError(
            f"{what}: successive estimates {a:.6g} and {b:.6g} differ by more than {tol:.0%}")


# ---------------------------------------------------------------------------
# public oracles
# ---------------------------------------------------------------------------

def _eta_vec(eta, n_dim: int) -> np.ndarray:
    eta = np.asarray(eta, dtype=float)
    if eta.size != n_dim:
        raise ValueError("eta dimension mismatch")
    if not np.linalg.norm(eta) > 0:
        raise QuadratureError("eta must be nonzero")
    return eta


def _default_order(rho: float) -> int:
    return max(256, 1 << int(math.ceil(math.log2(4 * rho)))) - 1


def pure_spherical_q4(q, eta, order: Optional[int] = None) -> complex:
    """``|eta|^{-3} int_Gamma int_Gamma int_Gamma q^(xi) q^(eta-tau) q^(tau-phi) q^(phi-xi)``."""
    oracle = as_oracle(q)
    eta = _eta_vec(eta, oracle.n_dim)
    if order is None:
        order = _default_order(float(np.linalg.norm(eta))) if oracle.n_dim == 2 else 32
    eng = _Engine(oracle, eta, order)
    s = sphere_measure(eng.R, eng.n)
    return eng.chain3(s, s, s) / (2.0 * eng.R) ** 3


def tube_term(q, eta, delta: float, order: Optional[int] = None,
              radial_order: Optional[int] = None) -> Tuple[complex, bool]:
    """``|eta|^{-4} int_{Gamma_delta} int_Gamma int_Gamma`` (phi in the tube).

    Returns ``(value, flagged)``; for ``|eta| <= 1/delta`` the indicator
    vanishes and ``(0, True)`` is returned.  By default the angular order
    grows like ``4 |eta|`` and the radial order like ``8 delta |eta|`` so the
    oscillation of ``q^`` across the tube stays resolved.
    """
    if not 0 < delta <= 0.25:
        raise ValueError("delta must lie in (0, 1/4]")
    oracle = as_oracle(q)
    eta = _eta_vec(eta, oracle.n_dim)
    rho = float(np.linalg.norm(eta))
    if rho <= 1.0 / delta:
        return 0j, True
    if order is None:
        order = _default_order(rho) if oracle.n_dim == 2 else 32
    if radial_order is None:
        radial_order = max(16, int(math.ceil(8 * delta * rho)))
    eng = _Engine(oracle, eta, order)
    s = sphere_measure(eng.R, eng.n)
    tube = tube_measure(eng.R, eng.n, delta * rho, radial_order)
    # chain order: z1 = tau, z2 = phi (tube), z3 = xi
    return eng.chain3(s, tube, s) / rho**4, False


@dataclass
class SokhotskiResult:
    value: complex
    pv: complex
    surface: complex
    estimates: List[complex]


def sokhotski_q2(q, eta, delta_levels: Sequence[float] = (2.0**-8, 2.0**-9, 2.0**-10),
                 order: Optional[int] = None, radial_order: int = 16, tail_octaves: int = 8,
                 cauchy_tol: float = 0.01) -> SokhotskiResult:
    """``Q^_2(eta)`` as principal value plus surface term.

    In 3D the direction rule is the product Gauss-Legendre x uniform rule,
    which for radial ``q^`` resolves the axially symmetric integrand.
    """
    oracle = as_oracle(q)
    eta = _eta_vec(eta, oracle.n_dim)
    n = oracle.n_dim
    rho = float(np.linalg.norm(eta))
    if order is None:
        order = max(256, int(8 * rho)) if n == 2 else max(64, int(4 * rho))
    eng = _Engine(oracle, eta, order)
    ests = []
    for d in delta_levels:
        ests.append(eng.chain1(pv_measure(eng.R, n, d, radial_order, tail_octaves)))
    if len(ests) >= 2:
        _cauchy(ests, cauchy_tol, "sokhotski_q2 p.v. extrapolation")
    pv = _richardson(ests)
    surface = eng.chain1(sphere_measure(eng.R, n))
    scale = (2.0 * np.pi) ** (-n)
    value = scale * (pv - 1j * np.pi / rho * surface)
    return SokhotskiResult(value, scale * pv, scale * surface, [scale * e for e in ests])


TERM_IDS = ("pv3", "surface_end", "surface_middle", "pv_end", "pv_middle", "spherical")


def term_coefficients(rho: float) -> Dict[str, complex]:
    return {"pv3": 1.0, "surface_end": -2j * np.pi / rho, "surface_middle": -1j * np.pi / rho,
            "pv_end": -2.0 * np.pi**2 / rho**2, "pv_middle": -np.pi**2 / rho**2,
            "spherical": 1j * np.pi**3 / rho**3}


@dataclass
class TermEstimate:
    term: str
    raw: complex
    coefficient: complex
    std_error: float = 0.0
    method: str = "product"

    @property
    def contribution(self) -> complex:
        return self.coefficient * self.raw


@dataclass
class Q4Decomposition:
    eta: np.ndarray
    terms: Dict[str, TermEstimate]
    prefactor: float
    inconclusive: bool = False
    cross_checks: Dict[str, complex] = field(default_factory=dict)

    @property
    def total(self) -> complex:
        return self.prefactor * sum(t.contribution for t in self.terms.values())

    @property
    def std_error(self) -> float:
        return self.prefactor * math.sqrt(sum((abs(t.coefficient) * t.std_error) ** 2
                                              for t in self.terms.values()))

    def to_csv(self) -> str:
        lines = ["term,re,im,error_estimate"]
        for tid in TERM_IDS:
            t = self.terms[tid]
            z = self.prefactor * t.contribution
            lines.append(f"{tid},{z.real:.17g},{z.imag:.17g},{self.prefactor * abs(t.coefficient) * t.std_error:.17g}")
        z = self.total
        lines.append(f"total,{z.real:.17g},{z.imag:.17g},{self.std_error:.17g}")
        return "\n".join(lines) + "\n"


def _qmc_pv3(oracle: TransformOracle, eta: np.ndarray, budget: int, seed: int,
             randomizations: int = 16, pv_share: float = 0.75) -> Tuple[complex, float, int]:
    """Randomised QMC estimate of the triple principal value in 2D.

    Each radial coordinate picks either a mirror pair ``R(1 -+ t)`` (first
    ``pv_share`` of the unit interval) or an exterior point ``r = 2R/u``; all
    ``2^3`` mirror combinations are summed so the singular weights cancel.
    """
    n = 2
    c = 0.5 * eta
    R = 0.5 * float(np.linalg.norm(eta))
    per = budget // randomizations
    m = int(math.floor(math.log2(per))) if per >= 2 else 0
    if m < 1:
        return 0j, float("inf"), 0
    npts = 2**m
    ss = np.random.SeedSequence(seed)
    estimates = []
    for child in ss.spawn(randomizations):
        sob = qmc.Sobol(6, scramble=True, seed=np.random.default_rng(child))
        acc = 0j
        for _ in range(max(1, npts // 2**16)):
            u = sob.random(min(npts, 2**16))
            acc += _pv3_block(oracle, c, R, eta, u, pv_share, n)
        estimates.append(acc / npts)
    est = np.array(estimates)
    mean = complex(est.mean())
    se = float(np.sqrt(np.sum(np.abs(est - mean) ** 2) / (randomizations * (randomizations - 1))))
    return mean, se, npts * randomizations


def _radial_nodes(u: np.ndarray, R: float, pv_share: float, n: int):
    """Up to two radii per sample with importance-corrected p.v. weights."""
    inner = u < pv_share
    t = np.where(inner, u / pv_share, 0.5)
    r_minus = R * (1.0 - t)
    r_plus = R * (1.0 + t)
    w_minus = np.where(inner, R * r_minus ** (n - 1) / (R * R - r_minus**2) / pv_share, 0.0)
    w_plus = np.where(inner, R * r_plus ** (n - 1) / (R * R - r_plus**2) / pv_share, 0.0)
    v = np.where(inner, 0.5, (u - pv_share) / (1.0 - pv_share))
    v = np.maximum(v, 1e-300)
    r_out = 2.0 * R / v
    w_out = np.where(inner, 0.0, (2.0 * R / (v * v)) * r_out ** (n - 1) / (R * R - r_out**2) / (1.0 - pv_share))
    r_a = np.where(inner, r_minus, r_out)
    w_a = np.where(inner, w_minus, w_out)
    return (r_a, w_a), (r_plus, w_plus)


def _pv3_block(oracle, c, R, eta, u, pv_share, n):
    pts = []
    for v in range(3):
        ur, uphi = u[:, 2 * v], u[:, 2 * v + 1]
        phi = 2.0 * np.pi * uphi
        om = np.stack([np.cos(phi), np.sin(phi)], -1)
        pair = _radial_nodes(ur, R, pv_share, n)
        pts.append([(c + r[:, None] * om, w * 2.0 * np.pi) for r, w in pair])
    left = [oracle(eta - z) for z, _ in pts[0]]
    right = [oracle(z) for z, _ in pts[2]]
    acc = 0j
    for a, (z1, w1) in enumerate(pts[0]):
        for b, (z2, w2) in enumerate(pts[1]):
            k12 = oracle(z1 - z2)
            for d, (z3, w3) in enumerate(pts[2]):
                val = left[a] * k12 * oracle(z2 - z3) * right[d] * w1 * w2 * w3
                acc += np.sum(val)
    return acc


def q4_decomposition_2d(q, eta, mc_budget: int = 10**7, seed: int = 0,
                        delta_levels: Sequence[float] = (2.0**-8, 2.0**-9, 2.0**-10),
                        order: Optional[int] = None, radial_order: int = 16,
                        tail_octaves: int = 6, deterministic_pv3: bool = True,
                        inconclusive_ratio: float = 0.05) -> Q4Decomposition:
    """Six-term decomposition of ``Q^_4(eta)`` in 2D.

    The five terms with at least one surface factor use the product ring
    quadrature with Richardson extrapolation in the p.v. exclusion.  The
    triple principal value uses randomised QMC (``mc_budget`` points over 16
    scrambled Sobol randomisations); the product-rule value of that term is
    kept in ``cross_checks`` when ``deterministic_pv3`` is set.
    """
    oracle = as_oracle(q)
    if oracle.n_dim != 2:
        raise QuadratureError("q4_decomposition_2d is two-dimensional")
    eta = _eta_vec(eta, 2)
    rho = float(np.linalg.norm(eta))
    if rho < 4.0:
        raise QuadratureError("q4_decomposition_2d needs |eta| >= 4")
    if order is None:
        order = max(256, 1 << int(math.ceil(math.log2(16 * rho)))) - 1
    eng = _Engine(oracle, eta, order)
    S = sphere_measure(eng.R, 2)
    coef = term_coefficients(rho)

    def layouts(P):
        return {"surface_end": (S, P, P), "surface_middle": (P, S, P),
                "pv_end": (S, S, P), "pv_middle": (S, P, S), "pv3": (P, P, P)}

    wanted = ["surface_end", "surface_middle", "pv_end", "pv_middle"]
    if deterministic_pv3:
        wanted.append("pv3")
    per_level: Dict[str, List[complex]] = {t: [] for t in wanted}
    for d in delta_levels:
        P = pv_measure(eng.R, 2, d, radial_order, tail_octaves)
        lay = layouts(P)
        for t in wanted:
            per_level[t].append(eng.chain3(*lay[t]))
    terms: Dict[str, TermEstimate] = {}
    for t in ("surface_end", "surface_middle", "pv_end", "pv_middle"):
        vals = per_level[t]
        spread = abs(vals[-1] - vals[-2]) if len(vals) > 1 else 0.0
        terms[t] = TermEstimate(t, _richardson(vals), coef[t], spread, "product")
    terms["spherical"] = TermEstimate("spherical", eng.chain3(S, S, S), coef["spherical"], 0.0, "product")
    checks = {}
    if deterministic_pv3:
        checks["pv3_product"] = _richardson(per_level["pv3"])
    if mc_budget > 0:
        mean, se, used = _qmc_pv3(oracle, eta, mc_budget, seed)
        terms["pv3"] = TermEstimate("pv3", mean, 1.0, se, f"qmc[{used}]")
    else:
        terms["pv3"] = TermEstimate("pv3", 0j, 1.0, float("inf"), "qmc[0]")
    out = Q4Decomposition(eta, terms, (2.0 * np.pi) ** -6, cross_checks=checks)
    tot = abs(out.total)
    out.inconclusive = not np.isfinite(out.std_error) or out.std_error > inconclusive_ratio * max(tot, 1e-300)
    return out
