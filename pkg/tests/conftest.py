import numpy as np
import pytest

from bornlab import potentials as P
from bornlab.born_dt import CutoffSpec
from bornlab.lippmann_schwinger import default_angles, default_k_samples, sweep
from bornlab.spectral_core import FREQUENCY, Grid, SampledField

PROBE_C0 = 2.0


def analytic_field(spec, grid):
    """Analytic transform of ``spec`` sampled at the grid's frequency nodes."""
    xi = np.stack([np.broadcast_to(c, grid.shape) for c in grid.frequencies()], -1)
    return SampledField(grid, P.analytic_transform(spec, xi), FREQUENCY)


@pytest.fixture(scope="session")
def probe_setup(tmp_path_factory):
    """Shared 2D backscattering sweep for the regularity-gain probes.

    Point-sampled unit-disk indicator, N=512, L=8, 48 wavenumbers from C0=2
    to 0.8 of the grid limit, 64 incident directions.
    """
    grid = Grid(2, 512, 8.0)
    spec = P.ball_indicator(2, 1.0, sampling="point")
    ks = default_k_samples(grid, PROBE_C0)
    th = default_angles(2, 64)
    ds = sweep(spec, grid, ks, th, cache_dir=tmp_path_factory.mktemp("probe"))
    return spec, grid, ds, CutoffSpec(PROBE_C0)


ACCEPTANCE = {}


def record_acceptance(number: int, passed: bool, detail: str) -> None:
    """Register one acceptance line; the lines are printed at the end of the run."""
    ACCEPTANCE[number] = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    print(ACCEPTANCE[number])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
