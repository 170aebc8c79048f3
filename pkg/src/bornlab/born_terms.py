"""Multiple-scattering terms ``Q_j``, their polarizations and the remainder ``R_l``.

At a frequency ``eta`` we set ``k = |eta|/2`` and ``theta = -eta/|eta|``; then

    Q^_j(f_1, ..., f_j)(eta) = int e^{ik theta.y} (f_1 R_k)(f_2 R_k)...(f_j e^{ik theta.(.)})(y) dy,

evaluated as an iterated chain of FFT resolvent applications on the compact
box that :mod:`bornlab.lippmann_schwinger` also uses, so the chain terms are
the Neumann far-field terms to round-off.
"""

from __future__ import annotations

import itertools
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .born_dt import CutoffSpec, chi_star, polar_shell_energies
from .lippmann_schwinger import (SUPPORT_RADIUS, CompactBox, _box_coordinates, compact_box,
                                 plane_wave)
from .resolvent import ResolventError, ResolventOperator, ResolventParams, check_admissible
from .spectral_core import (FREQUENCY, PHYSICAL, Grid, SampledField, compensated_sum,
                            estimate_regularity, forward_transform, inverse_transform)

logger = logging.getLogger(__name__)

_OPERATORS: "OrderedDict[tuple, ResolventOperator]" = OrderedDict()
_CACHE_SIZE = 8


def _operator(box: CompactBox, k: float, rs: float, method: str = "outgoing") -> ResolventOperator:
    key = (box, float(k), float(rs), method)
    op = _OPERATORS.get(key)
    if op is None:
        rp = ResolventParams(k, method=method, source_radius=rs, target_radius=rs)
        op = ResolventOperator(box, rp)
        _OPERATORS[key] = op
        if len(_OPERATORS) > _CACHE_SIZE:
            _OPERATORS.popitem(last=False)
    else:
        _OPERATORS.move_to_end(key)
    return op


def _support_radius(fields: Sequence[SampledField]) -> float:
    g = fields[0].grid
    slack = 0.5 * math.sqrt(g.n_dim) * g.spacing
    r = SUPPORT_RADIUS
    for f in fields:
        if f.grid != g:
            raise ValueError("all fields must share one grid")
        if f.space != PHYSICAL:
            raise ValueError("fields must be physical-space samples")
        nz = np.asarray(f.values) != 0
        if nz.any():
            r = max(r, float(g.radius[nz].max()))
    if r > SUPPORT_RADIUS + slack + 1e-12:
        raise ResolventError("fields must be supported in the unit ball")
    return r + 1e-9


def _direction(eta) -> Tuple[float, np.ndarray]:
    eta = np.asarray(eta, dtype=float)
    rho = float(np.linalg.norm(eta))
    if rho == 0:
        raise ValueError("eta must be nonzero")
    return 0.5 * rho, -eta / rho


@dataclass
class ChainResult:
    values: np.ndarray  # Q^_1 .. Q^_J at one eta (all slots equal) or a single polarized value
    term_norms: np.ndarray

    @property
    def ratios(self) -> np.ndarray:
        n = self.term_norms
        return n[1:] / np.where(n[:-1] > 0, n[:-1], 1.0)


def _chain(fields: Sequence[SampledField], eta, method: str = "outgoing", record: bool = False):
    """Run ``(f_1 R)(f_2 R)...(f_j e)`` and return Q^_j, plus partial sums if ``record``.

    With ``record`` every field is the same and the values of Q^_1..Q^_j are
    returned along the way.
    """
    g = fields[0].grid
    k, theta = _direction(eta)
    check_admissible(g, k)
    rs = _support_radius(fields)
    box = compact_box(g, rs)
    op = _operator(box, k, rs, method)
    coords = _box_coordinates(box, g)
    pw = plane_wave(coords, k, theta)
    crop = [np.asarray(f.values)[box.slices] for f in fields]
    weight = g.cell_volume * pw
    support = np.zeros(box.shape, dtype=bool)
    for c in crop:
        support |= c != 0
    v = crop[-1] * pw
    values, norms = [], []
    if record:
        values.append(np.sum(weight * v))
        norms.append(math.sqrt(g.cell_volume * compensated_sum(np.abs(pw[support]) ** 2)))
    for f in reversed(crop[:-1]):
        w = op(v)
        if record:
            norms.append(math.sqrt(g.cell_volume * compensated_sum(np.abs(w[support]) ** 2)))
        v = f * w
        if record:
            values.append(np.sum(weight * v))
    if record:
        return ChainResult(np.array(values), np.array(norms))
    return complex(np.sum(weight * v))


def q_term_at(fields: Sequence[SampledField], j: Optional[int] = None, eta=None,
              method: str = "outgoing") -> complex:
    """Polarized ``Q^_j(f_1, ..., f_j)(eta)``; a single field is repeated ``j`` times."""
    if isinstance(fields, SampledField):
        fields = [fields]
    fields = list(fields)
    if j is None:
        j = len(fields)
    if len(fields) == 1:
        fields = fields * j
    if len(fields) != j or j < 1:
        raise ValueError("need one field or exactly j fields")
    if any(not np.any(np.asarray(f.values)) for f in fields):
        return 0j
    return _chain(fields, eta, method)


def q_terms_upto(q: SampledField, J: int, eta, method: str = "outgoing") -> ChainResult:
    """``Q^_1(q)(eta), ..., Q^_J(q)(eta)`` from one chain, with term norms."""
    return _chain([q] * J, eta, method, record=True)


# ---------------------------------------------------------------------------
# sampled Q~_j, shell statistics and remainders
# ---------------------------------------------------------------------------

@dataclass
class BornTermReport:
    j: int
    k_samples: np.ndarray
    theta_samples: np.ndarray
    values: np.ndarray  # (K, M) chi*-weighted samples
    norms: Dict[Tuple[float, bool], float] = field(default_factory=dict)
    contraction_evidence: Optional[np.ndarray] = None
    tail_bound: Optional[np.ndarray] = None
    excluded: Optional[np.ndarray] = None

    @property
    def eta(self) -> np.ndarray:
        return -2.0 * self.k_samples[:, None, None] * self.theta_samples[None]

    def shell_energies(self, base_scale: float = 1.0):
        return polar_shell_energies(self.k_samples, self.theta_samples.shape[1], self.values, base_scale)

    def fitted_exponent(self, window) -> float:
        return estimate_regularity(self.shell_energies(), window).fitted_exponent

    def to_csv(self, base_scale: float = 1.0) -> str:
        from .spectral_core import shell_index
        lines = ["j,abs_eta,eta_angle_index,re,im,shell"]
        for a, k in enumerate(self.k_samples):
            shell = int(shell_index(np.array([2.0 * k]), base_scale)[0])
            for b in range(self.theta_samples.shape[0]):
                z = self.values[a, b]
                lines.append(f"{self.j},{2.0 * k:.17g},{b},{z.real:.17g},{z.imag:.17g},{shell}")
        return "\n".join(lines) + "\n"

    def summary(self) -> str:
        out = [f"j = {self.j}", f"samples = {self.values.size}"]
        for (beta, hom), v in sorted(self.norms.items()):
            out.append(f"norm[beta={beta:g},{'homogeneous' if hom else 'inhomogeneous'}] = {v:.17g}")
        if self.contraction_evidence is not None:
            out.append(f"max_contraction = {np.nanmax(self.contraction_evidence):.6g}")
        return "\n".join(out) + "\n"


def polar_sobolev_norm(k_samples, theta_samples, values, beta: float, homogeneous: bool = True) -> float:
    k = np.asarray(k_samples, dtype=float)
    n = theta_samples.shape[1]
    dk = np.gradient(k) if k.size > 1 else np.ones(1)
    omega = 2.0 * np.pi if n == 2 else 4.0 * np.pi
    rho = 2.0 * k
    w = rho ** (n - 1) * 2.0 * dk * omega / theta_samples.shape[0]
    wt = rho ** (2 * beta) if homogeneous else (1.0 + rho * rho) ** beta
    return math.sqrt(float(np.sum(w * wt * np.sum(np.abs(values) ** 2, axis=1))))


def polar_chains(q: SampledField, J: int, k_samples, theta_samples, method="outgoing"):
    K, M = len(k_samples), theta_samples.shape[0]
    vals = np.zeros((K, M, J), dtype=complex)
    norms = np.zeros((K, M, J))
    for a, k in enumerate(k_samples):
        for b, th in enumerate(theta_samples):
            res = q_terms_upto(q, J, -2.0 * k * np.asarray(th), method)
            vals[a, b] = res.values
            norms[a, b] = res.term_norms
    return vals, norms


def q_tilde_field(q: SampledField, j: int, cutoff: CutoffSpec, k_samples, theta_samples,
                  betas: Sequence[float] = (0.0, 0.5), term_values: Optional[np.ndarray] = None,
                  method: str = "outgoing") -> BornTermReport:
    """``chi*(|eta|/2) Q^_j(q)(eta)`` on the polar grid ``eta = -2 k theta``.

    ``term_values`` may carry precomputed Q^_j samples (e.g. from a sweep).
    """
    if j < 1:
        raise ValueError("j must be >= 1")
    k_samples = np.asarray(k_samples, dtype=float)
    theta_samples = np.asarray(theta_samples, dtype=float)
    ratios = None
    if term_values is None:
        vals, norms = polar_chains(q, j, k_samples, theta_samples, method)
        term_values = vals[:, :, j - 1]
        ratios = np.max(norms[:, :, 1:] / norms[:, :, :-1], axis=2) if j > 1 else None
    weights = chi_star(k_samples, cutoff)
    samples = weights[:, None] * term_values
    rep = BornTermReport(j, k_samples, theta_samples, samples, contraction_evidence=ratios)
    for beta in betas:
        rep.norms[(float(beta), True)] = polar_sobolev_norm(k_samples, theta_samples, samples, beta)
    return rep


def remainder_partial(q: SampledField, l: int, J_max: int, cutoff: CutoffSpec, k_samples,
                      theta_samples, method: str = "outgoing") -> BornTermReport:
    """Partial sum ``sum_{j=l}^{J_max} chi* Q^_j`` with a geometric tail bound.

    The tail beyond ``J_max`` is bounded by Cauchy-Schwarz,
    ``|Q^_{m+1}| <= ||q||_2 ||T_m||`` with ``T_m`` the m-th chain iterate on the
    support, summed geometrically with the last measured ratio.  Samples whose
    last ratio is not below 1 are excluded and flagged.
    """
    if not 1 <= l <= J_max:
        raise ValueError("need 1 <= l <= J_max")
    k_samples = np.asarray(k_samples, dtype=float)
    theta_samples = np.asarray(theta_samples, dtype=float)
    vals, norms = polar_chains(q, J_max + 1, k_samples, theta_samples, method)
    q_l2 = q.l2_norm()
    last = norms[:, :, J_max] / np.where(norms[:, :, J_max - 1] > 0, norms[:, :, J_max - 1], 1.0)
    excluded = last >= 1.0
    weights = chi_star(k_samples, cutoff)[:, None]
    partial = weights * vals[:, :, l - 1:J_max].sum(axis=2)
    with np.errstate(divide="ignore", invalid="ignore"):
        tail = q_l2 * norms[:, :, J_max] / (1.0 - last)
    tail = np.where(excluded, np.inf, weights * tail)
    partial = np.where(excluded, 0.0, partial)
    ratios = np.max(norms[:, :, 1:] / np.where(norms[:, :, :-1] > 0, norms[:, :, :-1], 1.0), axis=2)
    return BornTermReport(l, k_samples, theta_samples, partial, contraction_evidence=ratios,
                          tail_bound=tail, excluded=excluded)


# ---------------------------------------------------------------------------
# Leibniz formula
# ---------------------------------------------------------------------------

def multi_index_splits(alpha: Tuple[int, ...], j: int) -> List[Tuple[Tuple[Tuple[int, ...], ...], int]]:
    """All ``(beta_1, ..., beta_j)`` with sum ``alpha`` and their multinomial weights."""
    per_axis = []
    for a in alpha:
        comps = [c for c in itertools.product(range(a + 1), repeat=j) if sum(c) == a]
        per_axis.append(comps)
    out = []
    for combo in itertools.product(*per_axis):
        betas = tuple(tuple(combo[d][i] for d in range(len(alpha))) for i in range(j))
        num = 1
        den = 1
        for d, a in enumerate(alpha):
            num *= math.factorial(a)
            for i in range(j):
                den *= math.factorial(betas[i][d])
        out.append((betas, num // den))
    return out


def spectral_derivative(q: SampledField, beta: Tuple[int, ...]) -> SampledField:
    """``D^beta q`` through multiplication by ``(i xi)^beta``."""
    if not any(beta):
        return q
    g = q.grid
    spec = forward_transform(q)
    mult = np.ones(g.shape, dtype=complex)
    for d, b in enumerate(beta):
        mult = mult * (1j * g.frequencies()[d]) ** b
        if b % 2 == 1:
            # the unpaired Nyquist mode has no odd derivative
            edge = [slice(None)] * g.n_dim
            edge[d] = 0
            mult = mult.copy()
            mult[tuple(edge)] = 0.0
    return inverse_transform(SampledField(g, spec.values * mult, FREQUENCY))


def _restrict(f: SampledField, radius: float) -> SampledField:
    return SampledField(f.grid, np.where(f.grid.radius < radius, f.values, 0.0), f.space)


def leibniz_residual(q: SampledField, j: int, alpha: Tuple[int, ...], eta_samples,
                     min_exponent: Optional[float] = None) -> float:
    """Max relative residual of ``(i eta)^alpha Q^_j(q) = sum multinomial Q^_j(D^beta_i q)``.

    ``(i eta)^alpha`` is ``(-i 2k theta)^alpha`` at ``eta = -2k theta``.
    Derivative fields are restricted to the support ball of ``q``.
    ``min_exponent`` is the regularity of ``q`` when known; rough potentials
    (exponent below ``|alpha| + n/2``) are rejected.
    """
    alpha = tuple(int(a) for a in alpha)
    g = q.grid
    if len(alpha) != g.n_dim or any(a < 0 for a in alpha):
        raise ValueError("alpha must be a nonnegative multi-index of length n")
    if min_exponent is not None and min_exponent < sum(alpha) + g.n_dim / 2.0:
        raise ValueError("potential too rough for this derivative order")
    eta_samples = np.atleast_2d(np.asarray(eta_samples, dtype=float))
    if not any(alpha):
        return 0.0
    derivs: Dict[Tuple[int, ...], SampledField] = {}
    splits = multi_index_splits(alpha, j)
    for betas, _ in splits:
        for b in betas:
            if b not in derivs:
                d = spectral_derivative(q, b)
                if np.isrealobj(q.values):
                    d = SampledField(g, d.values.real, PHYSICAL)
                derivs[b] = _restrict(d, SUPPORT_RADIUS)
    lhs, rhs = [], []
    for eta in eta_samples:
        base = q_term_at([q] * j, j, eta)
        lhs.append(np.prod((1j * eta) ** np.array(alpha)) * base)
        rhs.append(sum(w * q_term_at([derivs[b] for b in betas], j, eta) for betas, w in splits))
    lhs, rhs = np.array(lhs), np.array(rhs)
    scale = max(np.max(np.abs(lhs)), np.finfo(float).tiny)
    return float(np.max(np.abs(lhs - rhs)) / scale)


# ---------------------------------------------------------------------------
# exponents
# ---------------------------------------------------------------------------

def _beta_branches(n: int, alpha: float, j: int) -> List[float]:
    vals = []
    if n == 2:
        if alpha <= 0.5:
            vals.append(0.75 * (j - 2) + 0.25 * alpha * (j - 1))
        if 0.5 <= alpha <= 1.0:
            vals.append((j - 3) * (0.75 + 0.25 * alpha) + 1.0)
    else:
        if 0.0 <= alpha <= 0.75:
            vals.append((j - 2) / 2.0 + (j - 1) * alpha / 3.0 - 0.5)
        if 0.75 <= alpha <= 1.5:
            vals.append((j - 3) * (0.5 + alpha / 3.0) + 0.5)
    return vals


def first_gain_order(n: int) -> int:
    """Smallest j with ``beta_j >= alpha + 1``: 4 in 2D, 5 in 3D."""
    return 4 if n == 2 else 5


def beta_gamma_exponents(n: int, alpha: float, j: int) -> Tuple[float, float]:
    """Decay exponents ``(beta_j, gamma_j)`` of the j-th high-frequency term."""
    if n not in (2, 3):
        raise ValueError("n must be 2 or 3")
    if not 0.0 <= alpha < n / 2.0:
        raise ValueError("alpha must satisfy 0 <= alpha < n/2")
    if j < first_gain_order(n):
        raise ValueError(f"j must be >= {first_gain_order(n)} for n = {n}")
    gamma = (-(j - 1) + 0.5 * (n - 1) * (j - 3) * (0.5 - alpha / n)
             + 0.5 * (n - 1) * max(0.0, 0.5 - 2.0 * alpha / n))
    branches = _beta_branches(n, alpha, j)
    for b in branches:
        if abs(b - (-n / 2.0 - gamma)) > 1e-12:
            raise ArithmeticError(f"beta/gamma duality broken at n={n}, alpha={alpha}, j={j}")
    return branches[0], gamma
