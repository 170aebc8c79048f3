import numpy as np
import pytest
from scipy.stats import qmc

from bornlab import potentials as P
from bornlab.born_terms import q_term_at
from bornlab.singular_quadrature import (TERM_IDS, _Engine, sphere_measure, tube_measure, QuadratureError, TransformOracle, as_oracle,
                                         pure_spherical_q4, q4_decomposition_2d, sokhotski_q2,
                                         sphere_rule, term_coefficients, tube_term, unit_sphere_rule)
from bornlab.spectral_core import Grid

BALL = P.ball_indicator(2, sampling="point")


def rotation_2d(a):
    return np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])


@pytest.mark.parametrize("eta,measure", [((2.0, 0.0), 2 * np.pi), ((1.2, 1.6, 0.0), 4 * np.pi),
                                         ((3.0, -4.0), 5 * np.pi), ((1.0, 2.0, 2.0), 9 * np.pi)])
def test_sphere_measure(eta, measure):
    r = sphere_rule(eta, 24)
    assert r.measure == pytest.approx(measure, rel=1e-10)
    e = np.asarray(eta)
    dist = np.linalg.norm(r.nodes - e / 2, axis=1)
    assert np.max(np.abs(dist - np.linalg.norm(e) / 2)) <= 1e-13 * np.linalg.norm(e)


@pytest.mark.parametrize("eta", [(3.0, 1.0), (1.0, -2.0, 0.5)])
def test_sphere_centroid(eta):
    r = sphere_rule(eta, 16)
    e = np.asarray(eta)
    direction = np.ones(e.size) / np.sqrt(e.size)
    val = r.integrate(lambda x: x @ direction)
    assert val == pytest.approx((e / 2) @ direction * r.measure, rel=1e-12)


def test_unit_sphere_rule_exactness_3d():
    dirs, w = unit_sphere_rule(3, 8)
    # int z^4 over S^2 = 4 pi / 5, int x^2 y^2 = 4 pi / 15
    assert np.sum(w * dirs[:, 2] ** 4) == pytest.approx(4 * np.pi / 5, rel=1e-13)
    assert np.sum(w * dirs[:, 0] ** 2 * dirs[:, 1] ** 2) == pytest.approx(4 * np.pi / 15, rel=1e-13)


def test_sphere_rule_rejections():
    with pytest.raises(QuadratureError):
        sphere_rule((0.0, 0.0), 8)
    with pytest.raises(ValueError):
        sphere_rule((1.0, 0.0), 8, n_dim=3)
    with pytest.raises(ValueError):
        unit_sphere_rule(4, 8)


def test_pure_spherical_rotation_invariance_2d():
    eta = np.array([8.0, 0.0])
    a = pure_spherical_q4(BALL, eta)
    b = pure_spherical_q4(BALL, rotation_2d(0.7) @ eta)
    assert b == pytest.approx(a, rel=1e-10)


def test_pure_spherical_rotation_invariance_3d():
    ball3 = P.ball_indicator(3)
    eta = np.array([0.0, 0.0, 6.0])
    rot = np.array([[1, 0, 0], [0, np.cos(0.4), -np.sin(0.4)], [0, np.sin(0.4), np.cos(0.4)]])
    a = pure_spherical_q4(ball3, eta)
    b = pure_spherical_q4(ball3, rot @ eta)
    assert abs(a) > 0 and b == pytest.approx(a, rel=1e-10)


def test_pure_spherical_matches_independent_qmc():
    """Triple circle integral at |eta| = 8 by scrambled Sobol points on the torus."""
    eta = np.array([8.0, 0.0])
    R = 4.0
    u = qmc.Sobol(3, scramble=True, seed=5).random(2**20)
    ang = 2 * np.pi * u
    pts = [eta / 2 + R * np.stack([np.cos(ang[:, i]), np.sin(ang[:, i])], -1) for i in range(3)]
    xi, tau, phi = pts
    f = (P.analytic_transform(BALL, xi) * P.analytic_transform(BALL, eta - tau)
         * P.analytic_transform(BALL, tau - phi) * P.analytic_transform(BALL, phi - xi))
    oracle = (2 * np.pi * R) ** 3 * f.mean() / np.linalg.norm(eta) ** 3
    assert pure_spherical_q4(BALL, eta) == pytest.approx(oracle, rel=0.01)


def test_pure_spherical_homogeneity_and_zero():
    eta = (0.0, 9.0)
    o = as_oracle(BALL)
    assert pure_spherical_q4(o.scaled(1.5), eta) == pytest.approx(1.5**4 * pure_spherical_q4(o, eta), rel=1e-13)
    zero = TransformOracle(2, lambda xi: np.zeros(xi.shape[:-1]), lambda r: np.zeros_like(r))
    assert pure_spherical_q4(zero, eta) == 0


def test_transform_oracle_requirements():
    with pytest.raises(QuadratureError):
        as_oracle(P.rough_random(1, 0.8))
    with pytest.raises(QuadratureError):
        as_oracle(object())


def test_tube_below_threshold_is_flagged():
    val, flagged = tube_term(BALL, (0.0, 0.5 / 0.01), 0.01)
    assert val == 0 and flagged
    with pytest.raises(ValueError):
        tube_term(BALL, (0.0, 50.0), 0.5)


def test_tube_homogeneity():
    eta = (40.0, 0.0)
    o = as_oracle(BALL)
    a, _ = tube_term(o, eta, 0.05)
    b, flagged = tube_term(o.scaled(-2.0), eta, 0.05)
    assert not flagged and b == pytest.approx(16.0 * a, rel=1e-12)


def test_thin_shell_limit_of_tube_integral():
    """Below the indicator threshold the tube integral tends to 2 delta Q (shell width 2 delta |eta|)."""
    eta = 100.0 * np.array([np.cos(0.3), np.sin(0.3)])
    eng = _Engine(as_oracle(BALL), eta, 511)
    s = sphere_measure(eng.R, 2)
    Q = eng.chain3(s, s, s) / 100.0**3
    ratios = [eng.chain3(s, tube_measure(eng.R, 2, d * 100.0, 16), s) / 100.0**4 / (d * Q) for d in (1e-3, 1e-4)]
    assert abs(ratios[1] - 2.0) < 0.01
    assert abs(ratios[0] - 2.0) < 0.05


def test_sokhotski_regular_integrand_has_no_surface_term():
    """Transform vanishing on Gamma(eta): the principal value is an ordinary integral."""
    eta = np.array([8.0, 0.0])
    R = 4.0

    def f(xi):
        d = np.linalg.norm(xi - eta / 2, axis=-1) - R
        return np.exp(-np.sum(xi * xi, axis=-1) / 8.0) * d**2

    oracle = TransformOracle(2, f)
    res = sokhotski_q2(oracle, eta, order=255)
    assert abs(res.surface) < 1e-12
    # direct integral of q(xi) q(eta - xi) / (xi . (eta - xi)) with a removable singularity
    x = np.linspace(-12, 20, 801)
    h = x[1] - x[0]
    X, Y = np.meshgrid(x, x, indexing="ij")
    xi = np.stack([X, Y], -1)
    dot = np.sum(xi * (eta - xi), -1)
    fx, fy = f(xi), f(eta - xi)
    ok = np.abs(dot) > 1e-9
    direct = np.sum(np.where(ok, fx * fy / np.where(ok, dot, 1.0), 0.0)) * h * h / (2 * np.pi) ** 2
    assert res.value.real == pytest.approx(direct, rel=2e-3)


def test_sokhotski_conjugate_symmetry():
    a = sokhotski_q2(BALL, (8.0, 0.0)).value
    b = sokhotski_q2(BALL, (-8.0, 0.0)).value
    assert b == pytest.approx(a, rel=1e-10)


def test_term_coefficients():
    c = term_coefficients(8.0)
    assert set(c) == set(TERM_IDS)
    assert c["spherical"] == pytest.approx(1j * np.pi**3 / 512.0)
    assert c["surface_end"] == pytest.approx(2 * c["surface_middle"])
    assert c["pv_end"] == pytest.approx(2 * c["pv_middle"])


def test_q4_zero_potential():
    zero = TransformOracle(2, lambda xi: np.zeros(xi.shape[:-1]), lambda r: np.zeros_like(r))
    d = q4_decomposition_2d(zero, (8.0, 0.0), mc_budget=2**12)
    assert all(t.raw == 0 for t in d.terms.values()) and d.total == 0


def test_q4_rejections():
    with pytest.raises(QuadratureError):
        q4_decomposition_2d(BALL, (2.0, 0.0))
    with pytest.raises(QuadratureError):
        q4_decomposition_2d(P.ball_indicator(3), (8.0, 0.0, 0.0))


def test_q4_zero_budget_is_inconclusive():
    d = q4_decomposition_2d(BALL, (8.0, 0.0), mc_budget=0, deterministic_pv3=False, order=255)
    assert d.inconclusive
    lines = d.to_csv().splitlines()
    assert lines[0] == "term,re,im,error_estimate"
    assert [l.split(",")[0] for l in lines[1:]] == list(TERM_IDS) + ["total"]


@pytest.fixture(scope="module")
def audit():
    eta = (8.0, 0.0)
    d = q4_decomposition_2d(BALL, eta, mc_budget=0)
    contrib = {k: d.prefactor * t.contribution for k, t in d.terms.items()}
    contrib["pv3"] = d.prefactor * d.cross_checks["pv3_product"]
    ref = q_term_at(P.sample(BALL, Grid(2, 512, 8.0)), 4, eta)
    return contrib, ref


def test_coefficient_audit_against_grid_term(audit):
    """Product-rule decomposition matches Q^_4 on the grid; any single sign flip does not."""
    contrib, ref = audit
    total = sum(contrib.values())
    assert abs(total - ref) <= 0.05 * abs(ref)
    for k in TERM_IDS:
        flipped = total - 2 * contrib[k]
        assert abs(flipped - ref) > 0.15 * abs(ref), k
