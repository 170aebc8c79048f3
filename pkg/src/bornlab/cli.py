"""``bornlab`` command-line front end.

Experiments are described by a flat ``key = value`` text file with dotted
sections (``bornlab schema`` lists every key).  Subcommands:

``forward``    far-field sweep, cached by the hash of its defining keys
``born``       Born-approximation error analysis of a stored dataset
``terms``      cut-off multiple-scattering terms on the sweep's polar grid
``check``      auxiliary numerical checks
``q4-oracle``  six-term decomposition of the fourth-order term

Exit codes: 0 pass, 1 computational failure, 2 input error, 3 inconclusive.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import analytic_checks
from .born_dt import BelowFloorError, CoverageError, CutoffSpec, born_error_report, min_c0
from .born_terms import polar_chains, q_tilde_field
from .lippmann_schwinger import (FarFieldDataset, SolverParams, SweepError, compact_box,
                                 default_angles, max_wavenumber, sweep)
from .potentials import KINDS, SAMPLING_MODES, PotentialError, PotentialSpec, sample
from .singular_quadrature import QuadratureError, q4_decomposition_2d
from .spectral_core import EstimationError, Grid, atomic_write_text, save_field

logger = logging.getLogger("bornlab")

EXIT_OK, EXIT_FAILURE, EXIT_INPUT, EXIT_INCONCLUSIVE = 0, 1, 2, 3


class ConfigError(ValueError):
    """Invalid experiment configuration (exit code 2)."""


# key -> (type, default, description); None default means "derived"
SCHEMA: Dict[str, Tuple[type, object, str]] = {
    "potential.kind": (str, "ball_indicator", f"one of {', '.join(KINDS[:-2])}, rough_random"),
    "potential.n_dim": (int, 2, "spatial dimension, 2 or 3"),
    "potential.amplitude": (float, 1.0, "overall scale of q"),
    "potential.radius": (float, 1.0, "support radius in (0, 1]"),
    "potential.gamma": (float, 1.0, "cusp order for radial_cusp"),
    "potential.seed": (int, 0, "seed for rough_random"),
    "potential.target_exponent": (float, 0.75, "Sobolev exponent for rough_random"),
    "potential.sampling": (str, "auto", f"one of {', '.join(SAMPLING_MODES)}"),
    "grid.points_per_dim": (int, 512, "nodes per axis (even)"),
    "grid.box_extent": (float, 8.0, "side length L of the periodic box"),
    "sweep.k_min": (float, 2.0, "smallest wavenumber"),
    "sweep.k_max": (float, None, "largest wavenumber; default 0.8 pi N / (2L)"),
    "sweep.k_count": (int, 48, "number of uniformly spaced wavenumbers"),
    "sweep.theta_count": (int, 64, "incident directions (2D); 3D uses the 26-point design"),
    "sweep.design_refine": (int, 0, "3D direction design refinement passes"),
    "solver.max_terms": (int, 200, "Neumann series term cap"),
    "solver.tol": (float, 1e-10, "relative term-norm stopping tolerance"),
    "cutoff.policy": (str, "override", "override (use cutoff.value) or theoretical"),
    "cutoff.value": (float, 2.0, "C0 under the override policy; must exceed 1"),
    "cutoff.alpha": (float, 0.5, "Sobolev index used by the theoretical C0"),
    "analysis.window": (str, "auto", "dyadic shell fit window lo,hi or auto"),
    "analysis.base_scale": (float, 1.0, "radius of shell 0"),
    "analysis.interp": (str, "linear", "polar interpolation: linear or nearest"),
    "analysis.max_angular_spacing": (float, 2.0 * np.pi / 32.0, "largest admissible gap between directions (rad)"),
    "seed": (int, 0, "randomisation seed for Monte Carlo components"),
    "output.dir": (str, "bornlab_out", "output directory"),
}
DATASET_SECTIONS = ("potential", "grid", "sweep", "solver")


def _format(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class ExperimentConfig:
    values: Dict[str, object] = field(default_factory=dict)

    def __getitem__(self, key: str):
        return self.values[key]

    # --- text form -----------------------------------------------------
    @classmethod
    def from_text(cls, text: str, overrides: Sequence[str] = ()) -> "ExperimentConfig":
        raw: Dict[str, str] = {}
        lines = list(text.splitlines()) + list(overrides)
        for lineno, line in enumerate(lines, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in SCHEMA:
                raise ConfigError(f"unknown configuration key {key!r}")
            raw[key] = value
        values: Dict[str, object] = {}
        for key, (typ, default, _) in SCHEMA.items():
            if key in raw:
                try:
                    values[key] = typ(raw[key])
                except ValueError as exc:
                    raise ConfigError(f"{key}: cannot parse {raw[key]!r} as {typ.__name__}") from exc
            else:
                values[key] = default
        cfg = cls(values)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: Path, overrides: Sequence[str] = ()) -> "ExperimentConfig":
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"configuration file {p} not found")
        return cls.from_text(p.read_text(), overrides)

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.values.items() if v is not None)

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    @property
    def dataset_hash(self) -> str:
        """Hash of the sections that determine the far-field dataset."""
        text = "".join(line for line in self.to_text().splitlines(True)
                       if line.split(".", 1)[0] in DATASET_SECTIONS)
        return hashlib.sha256(text.encode()).hexdigest()

    # --- derived objects -----------------------------------------------
    def potential(self) -> PotentialSpec:
        v = self.values
        return PotentialSpec(kind=v["potential.kind"], n_dim=v["potential.n_dim"],
                             amplitude=v["potential.amplitude"], radius=v["potential.radius"],
                             gamma=v["potential.gamma"], seed=v["potential.seed"],
                             target_exponent=v["potential.target_exponent"],
                             sampling=v["potential.sampling"])

    def grid(self) -> Grid:
        return Grid(self["potential.n_dim"], self["grid.points_per_dim"], self["grid.box_extent"])

    def k_max(self) -> float:
        km = self["sweep.k_max"]
        return max_wavenumber(self.grid()) if km is None else km

    def k_samples(self) -> np.ndarray:
        return np.linspace(self["sweep.k_min"], self.k_max(), self["sweep.k_count"])

    def theta_samples(self) -> np.ndarray:
        return default_angles(self["potential.n_dim"], self["sweep.theta_count"], self["sweep.design_refine"])

    def solver_params(self) -> SolverParams:
        return SolverParams(max_terms=self["solver.max_terms"], tol=self["solver.tol"])

    def window(self) -> Optional[Tuple[int, int]]:
        w = self["analysis.window"]
        if w == "auto":
            return None
        lo, hi = (int(s) for s in w.split(","))
        return lo, hi

    def cutoff(self) -> CutoffSpec:
        theo = min_c0(sample(self.potential(), self.grid()), self["cutoff.alpha"])
        c0 = theo if self["cutoff.policy"] == "theoretical" else self["cutoff.value"]
        if c0 >= self.k_max():
            raise ConfigError(f"theoretical C0 = {c0:g} leaves no coverage below sweep.k_max = {self.k_max():g}")
        return CutoffSpec(c0, theoretical_C0=theo)

    # --- validation ----------------------------------------------------
    def validate(self) -> None:
        v = self.values
        try:
            spec = self.potential()
            grid = self.grid()
        except (PotentialError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        h = grid.spacing
        if grid.box_extent < 4.0 + 5.0 * h:
            raise ConfigError(f"support constraint: grid.box_extent = {grid.box_extent:g} must be at least "
                              f"4 + 5h = {4.0 + 5.0 * h:g} to hold the unit-ball support and kernel")
        if compact_box(grid).points_per_dim > grid.points_per_dim:
            raise ConfigError("support constraint: compact box exceeds the grid")
        if spec.kind != "rough_random" and spec.radius > 1.0:
            raise ConfigError("support constraint: potential.radius must be at most 1")
        k_min, k_max = v["sweep.k_min"], self.k_max()
        if not 0.0 < k_min < k_max:
            raise ConfigError(f"sweep.k_min = {k_min:g} must be positive and below sweep.k_max = {k_max:g}")
        nyq = np.pi * grid.points_per_dim / grid.box_extent
        if k_max > nyq:
            raise ConfigError(f"Nyquist constraint: sweep.k_max = {k_max:g} exceeds pi N / L = {nyq:g}")
        if v["sweep.k_count"] < 2 or v["sweep.theta_count"] < 3:
            raise ConfigError("sweep.k_count must be >= 2 and sweep.theta_count >= 3")
        if v["cutoff.policy"] not in ("override", "theoretical"):
            raise ConfigError("cutoff.policy must be override or theoretical")
        if v["cutoff.policy"] == "override":
            if not v["cutoff.value"] > 1.0:
                raise ConfigError("cutoff.value must exceed 1")
            if v["cutoff.value"] >= k_max:
                raise ConfigError(f"cutoff.value = {v['cutoff.value']:g} leaves no coverage below "
                                  f"sweep.k_max = {k_max:g}")
        if v["potential.n_dim"] == 2 and 2.0 * np.pi / v["sweep.theta_count"] > v["analysis.max_angular_spacing"] + 1e-12:
            raise ConfigError(f"coverage constraint: sweep.theta_count = {v['sweep.theta_count']} gives angular "
                              f"spacing above analysis.max_angular_spacing = {v['analysis.max_angular_spacing']:g}")
        if v["analysis.interp"] not in ("linear", "nearest"):
            raise ConfigError("analysis.interp must be linear or nearest")
        if v["analysis.window"] != "auto":
            try:
                lo, hi = self.window()
            except ValueError as exc:
                raise ConfigError("analysis.window must be 'lo,hi' or auto") from exc
            if not 0 <= lo < hi:
                raise ConfigError("analysis.window needs 0 <= lo < hi")
        if v["solver.max_terms"] < 1 or not v["solver.tol"] > 0:
            raise ConfigError("solver.max_terms must be >= 1 and solver.tol positive")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def dataset_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg["output.dir"]) / f"dataset-{cfg.dataset_hash[:16]}"


def cmd_forward(cfg: ExperimentConfig, threads: Optional[int] = None) -> Tuple[int, Path]:
    target = dataset_dir(cfg)
    if (target / "manifest.txt").exists():
        ds = FarFieldDataset.load(target)
        if ds.meta.get("dataset_hash") == cfg.dataset_hash:
            logger.info("cache hit %s", target)
            return EXIT_OK, target
    try:
        ds = sweep(cfg.potential(), cfg.grid(), cfg.k_samples(), cfg.theta_samples(),
                   cfg.solver_params(), workers=threads, progress=True)
        code = EXIT_OK
    except SweepError as exc:
        logger.error("%s; partial dataset written with flags", exc)
        ds, code = exc.dataset, EXIT_FAILURE
    ds.meta["dataset_hash"] = cfg.dataset_hash
    ds.save(target)
    atomic_write_text(target / "config.txt", cfg.to_text())
    logger.info("dataset written to %s", target)
    return code, target


def _load_matching(cfg: ExperimentConfig, path: Optional[Path]) -> FarFieldDataset:
    path = dataset_dir(cfg) if path is None else Path(path)
    if not (path / "manifest.txt").exists():
        raise ConfigError(f"no dataset at {path}; run 'bornlab forward' first")
    ds = FarFieldDataset.load(path)
    if ds.meta.get("dataset_hash") != cfg.dataset_hash:
        raise ConfigError(f"dataset {path} was produced by a different configuration "
                          f"(hash {ds.meta.get('dataset_hash', '?')[:16]} != {cfg.dataset_hash[:16]})")
    return ds


def cmd_born(cfg: ExperimentConfig, path: Optional[Path] = None, emit: str = "summary") -> int:
    ds = _load_matching(cfg, path)
    grid = cfg.grid()
    out = Path(cfg["output.dir"])
    out.mkdir(parents=True, exist_ok=True)
    try:
        rep = born_error_report(cfg.potential(), ds, grid, cfg.cutoff(), cfg["analysis.interp"],
                                cfg.window(), cfg["analysis.max_angular_spacing"])
    except BelowFloorError as exc:
        print(exc)
        return EXIT_OK
    atomic_write_text(out / "born_shells.csv", rep.to_csv())
    atomic_write_text(out / "born_summary.txt", rep.summary())
    save_field(rep.difference, out / "born_difference")
    print(rep.to_csv() if emit == "csv" else rep.summary(), end="")
    return EXIT_OK


def cmd_terms(cfg: ExperimentConfig, js: Sequence[int], emit: str = "summary") -> int:
    if not js or min(js) < 1:
        raise ConfigError("term orders must be positive integers")
    q = sample(cfg.potential(), cfg.grid())
    ks, th = cfg.k_samples(), cfg.theta_samples()
    vals, _ = polar_chains(q, max(js), ks, th)
    cutoff = cfg.cutoff()
    reports = [q_tilde_field(q, j, cutoff, ks, th, term_values=vals[:, :, j - 1]) for j in js]
    csv_text = reports[0].to_csv(cfg["analysis.base_scale"])
    for r in reports[1:]:
        csv_text += r.to_csv(cfg["analysis.base_scale"]).split("\n", 1)[1]
    out = Path(cfg["output.dir"])
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "terms.csv", csv_text)
    print(csv_text if emit == "csv" else "".join(r.summary() for r in reports), end="")
    return EXIT_OK


def cmd_check(selection: Sequence[str], seed: int = 0, emit: str = "summary",
              output: Optional[Path] = None) -> int:
    reports = analytic_checks.run_checks(selection, seed)
    text = analytic_checks.reports_to_csv(reports)
    if output is not None:
        Path(output).mkdir(parents=True, exist_ok=True)
        atomic_write_text(Path(output) / "checks.csv", text)
    if emit == "csv":
        print(text, end="")
    else:
        for r in reports:
            print(f"{r.status.upper():13s} {r.check_id}  statistic={r.statistic:.6g} tolerance={r.tolerance:.6g}")
    return analytic_checks.exit_code(reports)


def _parse_eta(items: Sequence[str]) -> List[np.ndarray]:
    etas = []
    for it in items:
        try:
            etas.append(np.array([float(s) for s in it.split(",")]))
        except ValueError as exc:
            raise ConfigError(f"cannot parse eta {it!r}; expected x,y") from exc
        if etas[-1].size != 2:
            raise ConfigError(f"eta {it!r} must have two components")
    return etas


def cmd_q4_oracle(cfg: ExperimentConfig, etas: Sequence[str], budget: int, emit: str = "summary") -> int:
    if cfg["potential.n_dim"] != 2:
        raise ConfigError("q4-oracle is two-dimensional")
    if budget < 0:
        raise ConfigError("budget must be nonnegative")
    spec = cfg.potential()
    rows = ["eta_x,eta_y,term,re,im,error_estimate"]
    summary = []
    inconclusive = False
    for eta in _parse_eta(etas):
        dec = q4_decomposition_2d(spec, eta, mc_budget=budget, seed=cfg["seed"])
        inconclusive |= dec.inconclusive
        for line in dec.to_csv().splitlines()[1:]:
            rows.append(f"{eta[0]:.17g},{eta[1]:.17g},{line}")
        z = dec.total
        summary.append(f"eta = ({eta[0]:g}, {eta[1]:g}): Q4 = {z.real:.10g}{z.imag:+.10g}j "
                       f"+- {dec.std_error:.3g}{'  INCONCLUSIVE' if dec.inconclusive else ''}")
    text = "\n".join(rows) + "\n"
    out = Path(cfg["output.dir"])
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "q4.csv", text)
    print(text if emit == "csv" else "\n".join(summary) + "\n", end="")
    return EXIT_INCONCLUSIVE if inconclusive else EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment configuration file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a configuration key")
    common.add_argument("--emit", choices=("csv", "summary"), default="summary")
    common.add_argument("--seed", type=int, default=None, help="override the configuration seed")
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    common.add_argument("--output", type=Path, default=None, help="override output.dir")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="bornlab", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("forward", parents=[common], help="compute the far-field dataset")
    b = sub.add_parser("born", parents=[common], help="Born error analysis of a dataset")
    b.add_argument("--dataset", type=Path, default=None)
    t = sub.add_parser("terms", parents=[common], help="multiple-scattering term samples")
    t.add_argument("--j", type=lambda s: [int(x) for x in s.split(",")], default=[2, 3, 4])
    c = sub.add_parser("check", parents=[common], help="auxiliary numerical checks")
    c.add_argument("selection", nargs="*", default=["all"],
                   help=f"any of {', '.join(analytic_checks.CHECKS)} or all")
    q = sub.add_parser("q4-oracle", parents=[common], help="fourth-order term decomposition")
    q.add_argument("--eta", action="append", default=[], metavar="X,Y")
    q.add_argument("--budget", type=int, default=10**7)
    sub.add_parser("schema", help="list configuration keys")
    return p


def _config(args) -> ExperimentConfig:
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"seed = {args.seed}")
    if args.output is not None:
        overrides.append(f"output.dir = {args.output}")
    text = ""
    if args.config is not None:
        if not args.config.exists():
            raise ConfigError(f"configuration file {args.config} not found")
        text = args.config.read_text()
    return ExperimentConfig.from_text(text, overrides)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger("bornlab").setLevel(logging.INFO)
    if args.command == "schema":
        for key, (typ, default, doc) in SCHEMA.items():
            print(f"{key} ({typ.__name__}, default {default if default is not None else 'derived'}): {doc}")
        return EXIT_OK
    try:
        if args.command == "check":
            sel = list(analytic_checks.CHECKS) if "all" in args.selection else args.selection
            unknown = set(sel) - set(analytic_checks.CHECKS)
            if unknown:
                raise ConfigError(f"unknown checks: {', '.join(sorted(unknown))}")
            return cmd_check(sel, args.seed or 0, args.emit, args.output)
        cfg = _config(args)
        if args.command == "forward":
            return cmd_forward(cfg, args.threads)[0]
        if args.command == "born":
            return cmd_born(cfg, args.dataset, args.emit)
        if args.command == "terms":
            return cmd_terms(cfg, args.j, args.emit)
        if args.command == "q4-oracle":
            if not args.eta:
                raise ConfigError("q4-oracle needs at least one --eta")
            return cmd_q4_oracle(cfg, args.eta, args.budget, args.emit)
    except ConfigError as exc:
        logger.error("%s", exc)
        return EXIT_INPUT
    except (CoverageError, QuadratureError, EstimationError, SweepError, RuntimeError) as exc:
        logger.error("computation failed: %s", exc)
        return EXIT_FAILURE
    return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
