import numpy as np
import pytest

from bornlab import potentials as P
from bornlab.born_dt import (BelowFloorError, CoverageError, CutoffSpec, angular_spacing, assemble,
                             born_error_report, chi_star, min_c0, polar_interpolate, polar_shell_energies)
from bornlab.lippmann_schwinger import FarFieldDataset, default_angles, default_k_samples, sweep
from bornlab.spectral_core import Grid, SampledField, forward_transform, shell_energies, sobolev_norm

from conftest import analytic_field

G512 = Grid(2, 512, 8.0)


def synthetic(spec, grid, K, M, c0=2.0):
    ks = default_k_samples(grid, c0, K)
    th = default_angles(2, M)
    vals = P.analytic_transform(spec, -2.0 * ks[:, None, None] * th[None])
    return FarFieldDataset(ks, th, vals, np.zeros(vals.shape, np.uint8), {})


def rms_error(field, mask, exact):
    return np.sqrt(np.mean(np.abs(field.values[mask] - exact[mask]) ** 2) / np.mean(np.abs(exact[mask]) ** 2))


def test_chi_star_values_and_monotonicity():
    c = CutoffSpec(3.0)
    assert chi_star(1.5, c) == 0.0
    assert chi_star(9.0, c) == 1.0
    assert 0.0 < chi_star(4.5, c) < 1.0
    t = np.linspace(0, 10, 2001)
    assert np.all(np.diff(chi_star(t, c)) >= 0)


def test_chi_star_is_twice_differentiable():
    c = CutoffSpec(2.0)
    h = 1e-4
    for t0 in (2.0, 4.0):  # joins
        second = [(chi_star(t + h, c) - 2 * chi_star(t, c) + chi_star(t - h, c)) / h**2 for t in (t0 - 3 * h, t0 + 3 * h)]
        assert abs(second[0] - second[1]) < 1e-3


def test_cutoff_validation():
    with pytest.raises(ValueError):
        CutoffSpec(1.0)


def test_min_c0():
    g = Grid(2, 64, 4.0)
    assert min_c0(SampledField(g, np.zeros(g.shape)), 0.5) == 1.0
    q1 = P.sample(P.ball_indicator(2), g)
    unit = SampledField(g, q1.values / sobolev_norm(forward_transform(q1), 0.0))
    assert min_c0(unit, 0.0) == pytest.approx(16.0, rel=1e-12)
    r = min_c0(P.sample(P.ball_indicator(2, 2.0), g), 0.0) / min_c0(P.sample(P.ball_indicator(2, 1.0), g), 0.0)
    assert r == pytest.approx(16.0, rel=1e-12)


def test_angular_spacing():
    assert angular_spacing(default_angles(2, 32)) == pytest.approx(2 * np.pi / 32)
    assert angular_spacing(default_angles(3)) < np.pi / 3


def test_identity_path_reproduces_cutoff_transform():
    spec, cut = P.ball_indicator(2), CutoffSpec(2.0)
    f, mask = assemble(synthetic(spec, G512, 512, 64), G512, cut, "linear")
    exact = analytic_field(spec, G512).values * chi_star(G512.frequency_radius / 2, cut)
    assert rms_error(f, mask, exact) <= 0.01


def test_halving_angular_spacing_reduces_error():
    spec = P.translate_sum([(P.smooth_bump(2, radius=0.45), (0.5, 0.0), 1.0),
                            (P.smooth_bump(2, radius=0.4), (-0.3, 0.5), -1.5)])
    cut = CutoffSpec(2.0)
    exact = analytic_field(spec, G512).values * chi_star(G512.frequency_radius / 2, cut)
    errs = []
    for M in (64, 128):
        f, mask = assemble(synthetic(spec, G512, 512, M), G512, cut, "linear")
        errs.append(rms_error(f, mask, exact))
    assert errs[0] / errs[1] >= 1.7


def test_zero_dataset_gives_zero_field():
    ds = synthetic(P.ball_indicator(2, 0.0), G512, 16, 64)
    f, mask = assemble(ds, G512, CutoffSpec(2.0))
    assert mask.any() and not np.any(f.values)


def test_sparse_angles_rejected():
    with pytest.raises(CoverageError):
        assemble(synthetic(P.ball_indicator(2), G512, 16, 8), G512, CutoffSpec(2.0))


def test_nearest_and_linear_agree_on_nodes():
    ks = np.array([2.0, 3.0, 4.0])
    th = default_angles(2, 8)
    vals = np.arange(24, dtype=complex).reshape(3, 8)
    xi = -2.0 * 3.0 * th[2:3]
    for mode in ("nearest", "linear"):
        v, inside = polar_interpolate(ks, th, vals, xi, mode)
        assert inside[0] and v[0] == pytest.approx(vals[1, 2])


def test_polar_interpolation_3d_on_design_nodes():
    ks = np.array([2.0, 4.0])
    th = default_angles(3)
    vals = np.stack([np.arange(26.0), 2 * np.arange(26.0)]).astype(complex)
    v, inside = polar_interpolate(ks, th, vals, -2.0 * 4.0 * th[5:7], "linear")
    assert np.all(inside) and np.allclose(v, vals[1, 5:7])


def test_identity_dataset_reports_floor():
    spec = P.ball_indicator(2, sampling="point")
    g = Grid(2, 256, 5.0)
    q = P.sample(spec, g)
    ks = default_k_samples(g, 2.0, 8)
    th = default_angles(2, 32)
    vals = P.grid_transform_at(q, -2.0 * ks[:, None, None] * th[None])
    ds = FarFieldDataset(ks, th, vals, np.zeros(vals.shape, np.uint8), {})
    with pytest.raises(BelowFloorError):
        born_error_report(spec, ds, g, CutoffSpec(2.0))


@pytest.fixture(scope="module")
def small_reports():
    g = Grid(2, 256, 8.0)
    cut = CutoffSpec(1.5)
    ks = default_k_samples(g, 1.5, 24)
    th = default_angles(2, 32)
    out = {}
    for name, spec in (("a", P.ball_indicator(2, 0.1, sampling="point")),
                       ("b", P.ball_indicator(2, 0.05, sampling="point")),
                       ("bump", P.smooth_bump(2, 0.5))):
        out[name] = born_error_report(spec, sweep(spec, g, ks, th), g, cut, max_angular_spacing=0.2)
    return out


def test_difference_energy_scales_with_fourth_power(small_reports):
    ea = dict(small_reports["a"].difference_estimate.shell_energies)
    eb = dict(small_reports["b"].difference_estimate.shell_energies)
    lo, hi = small_reports["a"].q_estimate.fit_window
    for j in range(lo, hi + 1):
        assert ea[j] / eb[j] == pytest.approx(16.0, rel=0.2)


def test_smooth_bump_difference_at_ceiling(small_reports):
    assert small_reports["bump"].difference_estimate.ceiling_flag


def test_report_outputs(small_reports):
    rep = small_reports["a"]
    lines = rep.to_csv().splitlines()
    assert lines[0] == "shell,energy_q,energy_difference"
    assert all(len(l.split(",")) == 3 for l in lines[1:])
    assert "gain" in rep.summary() and "max_contraction" in rep.summary()
    assert rep.gain == pytest.approx(rep.difference_estimate.fitted_exponent - rep.q_estimate.fitted_exponent)
    assert rep.max_contraction is not None and rep.max_contraction < 0.5


def test_half_amplitude_probe_gain(probe_setup):
    """Amplitude-1/2 far field from the stored Born terms of the amplitude-1 sweep.

    Q_j is j-linear, so A(q/2) = sum_j 2^-j Q_j(q); the eight stored terms
    leave a remainder far below the interpolation error.
    """
    spec, grid, ds, cut = probe_setup
    half = P.ball_indicator(2, 0.5, sampling="point")
    w = 0.5 ** np.arange(1, ds.term_values.shape[2] + 1)
    vals = ds.term_values @ w
    ds_half = FarFieldDataset(ds.k_samples, ds.theta_samples, vals, ds.flags, dict(ds.meta))
    rep = born_error_report(half, ds_half, grid, cut)
    assert rep.difference_estimate.fitted_exponent >= rep.q_estimate.fitted_exponent + 0.3


def test_polar_shell_energies_match_cartesian_for_radial_transform():
    spec = P.ball_indicator(2)
    ks = np.linspace(2.0, 80.0, 2000)
    th = default_angles(2, 16)
    vals = P.analytic_transform(spec, -2.0 * ks[:, None, None] * th[None])
    polar = dict(polar_shell_energies(ks, 2, vals))
    cart = dict(shell_energies(analytic_field(spec, G512)))
    for j in (4, 5, 6, 7):
        assert polar[j] == pytest.approx(cart[j], rel=0.03)
