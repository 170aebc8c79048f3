import numpy as np
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from bornlab.born_dt import CutoffSpec, chi_star
from bornlab.born_terms import q_term_at
from bornlab.cli import ExperimentConfig
from bornlab.spectral_core import Grid, SampledField, forward_transform, inverse_transform

SMALL = settings(max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow])
G = Grid(2, 64, 5.0)
seeds = st.integers(0, 2**32 - 1)


def supported_field(seed):
    rng = np.random.default_rng(seed)
    return SampledField(G, rng.standard_normal(G.shape) * (G.radius < 0.9))


@SMALL
@given(seeds, st.sampled_from([8, 16, 32, 64]), st.floats(1.0, 20.0))
def test_discrete_plancherel(seed, n, L):
    g = Grid(2, n, L)
    rng = np.random.default_rng(seed)
    f = SampledField(g, rng.standard_normal(g.shape) + 1j * rng.standard_normal(g.shape))
    F = forward_transform(f)
    lhs = np.sum(np.abs(f.values) ** 2) * g.cell_volume
    rhs = np.sum(np.abs(F.values) ** 2) * g.frequency_cell / (2 * np.pi) ** 2
    assert abs(lhs - rhs) <= 1e-12 * lhs
    assert np.allclose(inverse_transform(F).values, f.values, atol=1e-12)


@SMALL
@given(seeds, seeds, st.floats(-3.0, 3.0), st.integers(0, 1))
def test_term_is_linear_in_each_slot(s1, s2, lam, slot):
    f, g = supported_field(s1), supported_field(s2)
    eta = (6.0, -5.0)
    base = [f, f]
    alt = list(base)
    alt[slot] = g
    mixed = list(base)
    mixed[slot] = SampledField(G, f.values + lam * g.values)
    a, b, c = (q_term_at(x, 2, eta) for x in (base, alt, mixed))
    assert abs(c - (a + lam * b)) <= 1e-10 * (abs(a) + abs(lam * b) + 1e-300)


@SMALL
@given(seeds, st.floats(0.1, 4.0), st.integers(1, 3))
def test_term_homogeneity(seed, lam, j):
    f = supported_field(seed)
    a = q_term_at(f, j, (0.0, 7.0))
    b = q_term_at(SampledField(G, lam * f.values), j, (0.0, 7.0))
    assert abs(b - lam**j * a) <= 1e-12 * abs(lam**j * a)


@SMALL
@given(st.floats(1.01, 50.0), st.lists(st.floats(0.0, 200.0), min_size=2, max_size=30))
def test_chi_star_monotone_and_bounded(c0, ts):
    c = CutoffSpec(c0)
    ts = np.sort(np.array(ts))
    vals = np.atleast_1d(chi_star(ts, c))
    assert np.all((vals >= 0) & (vals <= 1))
    assert np.all(np.diff(vals) >= 0)
    assert np.all(vals[ts < c0] == 0) and np.all(vals[ts >= 2 * c0] == 1)


@SMALL
@given(st.floats(0.0, 10.0, allow_subnormal=False), st.floats(1e-12, 1e-6), st.integers(1, 500),
       st.sampled_from([32, 64, 128]), st.floats(1.01, 3.0))
def test_config_round_trip(amplitude, tol, terms, n, c0):
    over = [f"potential.amplitude = {amplitude!r}", f"solver.tol = {tol!r}", f"solver.max_terms = {terms}",
            f"grid.points_per_dim = {n}", "grid.box_extent = 6.0", "sweep.k_count = 4",
            "sweep.theta_count = 64", f"cutoff.value = {c0!r}", "sweep.k_max = 10.0"]
    cfg = ExperimentConfig.from_text("", over)
    back = ExperimentConfig.from_text(cfg.to_text())
    assert back.values == cfg.values and back.config_hash == cfg.config_hash
