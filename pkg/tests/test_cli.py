import subprocess
import sys

import numpy as np
import pytest

from bornlab.cli import SCHEMA, ConfigError, ExperimentConfig, dataset_dir, main

TINY = """
# tiny 2D experiment
potential.kind = ball_indicator
potential.amplitude = 0.5
grid.points_per_dim = 64
grid.box_extent = 6.0
sweep.k_count = 4
sweep.theta_count = 16
analysis.max_angular_spacing = 0.4
"""

MID = """
potential.kind = ball_indicator
potential.amplitude = 0.5
potential.sampling = point
grid.points_per_dim = 256
grid.box_extent = 5.0
sweep.k_count = 16
sweep.theta_count = 32
"""


def write_config(tmp_path, text, name="exp.cfg"):
    p = tmp_path / name
    p.write_text(text + f"\noutput.dir = {tmp_path / 'out'}\n")
    return p


def test_config_round_trip_is_lossless():
    cfg = ExperimentConfig.from_text(TINY, ["solver.tol = 1e-11", "cutoff.value = 2.5"])
    back = ExperimentConfig.from_text(cfg.to_text())
    assert back.values == cfg.values
    assert back.config_hash == cfg.config_hash


def test_every_field_changes_the_hash():
    base = ExperimentConfig.from_text(TINY)
    seen = {base.config_hash}
    for key, (typ, default, _) in SCHEMA.items():
        current = base[key]
        if typ is str:
            alt = {"potential.kind": "smooth_bump", "potential.sampling": "cell", "cutoff.policy": "theoretical",
                   "analysis.window": "3,5", "analysis.interp": "nearest"}.get(key, "elsewhere")
        elif current is None:
            alt = 12.5
        else:
            alt = typ(current) + typ(1)
        values = dict(base.values)
        values[key] = typ(alt)
        h = ExperimentConfig(values).config_hash
        assert h not in seen, key
        seen.add(h)


def test_dataset_hash_ignores_analysis_settings():
    a = ExperimentConfig.from_text(TINY)
    b = ExperimentConfig.from_text(TINY, ["analysis.window = 3,5", "cutoff.value = 1.5"])
    c = ExperimentConfig.from_text(TINY, ["sweep.k_count = 5"])
    assert a.dataset_hash == b.dataset_hash != c.dataset_hash


def test_unknown_key_and_bad_value_rejected():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_text("grid.points = 64")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_text("grid.points_per_dim = many")


@pytest.mark.parametrize("override,needle", [
    ("sweep.k_max = 500", "Nyquist"),
    ("grid.box_extent = 3.0", "support"),
    ("sweep.theta_count = 8", "angular"),
    ("cutoff.value = 0.5", "cutoff"),
])
def test_validation_names_the_constraint(override, needle):
    with pytest.raises(ConfigError, match=f"(?i){needle}"):
        ExperimentConfig.from_text(TINY, [override])


def test_forward_then_cache_hit(tmp_path, caplog):
    cfg = write_config(tmp_path, TINY)
    assert main(["forward", "--config", str(cfg)]) == 0
    target = dataset_dir(ExperimentConfig.load(cfg))
    manifest = (target / "manifest.txt").read_bytes()
    caplog.clear()
    with caplog.at_level("INFO", logger="bornlab"):
        assert main(["forward", "--config", str(cfg)]) == 0
    assert any("cache hit" in r.getMessage() for r in caplog.records)
    assert (target / "manifest.txt").read_bytes() == manifest


def test_nyquist_violation_exits_2(tmp_path, capsys):
    cfg = write_config(tmp_path, TINY)
    assert main(["forward", "--config", str(cfg), "--set", "sweep.k_max=500"]) == 2


def test_missing_config_and_dataset_exit_2(tmp_path):
    assert main(["forward", "--config", str(tmp_path / "nope.cfg")]) == 2
    cfg = write_config(tmp_path, TINY)
    assert main(["born", "--config", str(cfg)]) == 2


def test_dataset_hash_mismatch_exits_2(tmp_path):
    cfg = write_config(tmp_path, TINY)
    assert main(["forward", "--config", str(cfg)]) == 0
    target = dataset_dir(ExperimentConfig.load(cfg))
    assert main(["born", "--config", str(cfg), "--set", "potential.amplitude=0.25", "--dataset", str(target)]) == 2


def test_zero_potential_pipeline(tmp_path, capsys):
    cfg = write_config(tmp_path, TINY + "potential.amplitude = 0.0\n")
    assert main(["forward", "--config", str(cfg)]) == 0
    from bornlab.lippmann_schwinger import FarFieldDataset
    ds = FarFieldDataset.load(dataset_dir(ExperimentConfig.load(cfg)))
    assert not np.any(ds.values)
    capsys.readouterr()
    assert main(["born", "--config", str(cfg)]) == 0
    assert "below interpolation floor" in capsys.readouterr().out


def test_forward_and_born_outputs(tmp_path, capsys):
    cfg = write_config(tmp_path, MID)
    assert main(["forward", "--config", str(cfg)]) == 0
    capsys.readouterr()
    assert main(["born", "--config", str(cfg), "--emit", "summary"]) == 0
    text = capsys.readouterr().out
    assert "gain" in text
    out = tmp_path / "out"
    lines = (out / "born_shells.csv").read_text().splitlines()
    assert lines[0] == "shell,energy_q,energy_difference" and len(lines) > 4
    assert (out / "born_difference.c128").exists() and (out / "born_summary.txt").exists()


def test_terms_csv_rows(tmp_path, capsys):
    cfg = write_config(tmp_path, TINY)
    assert main(["terms", "--config", str(cfg), "--j", "2,3", "--emit", "csv"]) == 0
    lines = (tmp_path / "out" / "terms.csv").read_text().splitlines()
    assert lines[0] == "j,abs_eta,eta_angle_index,re,im,shell"
    rows = [l.split(",") for l in lines[1:]]
    assert len(rows) == 2 * 4 * 16
    assert {(r[0], r[1], r[2]) for r in rows}.__len__() == len(rows)
    assert main(["terms", "--config", str(cfg), "--j", "0"]) == 2


def test_q4_zero_budget_is_inconclusive(tmp_path):
    cfg = write_config(tmp_path, TINY)
    assert main(["q4-oracle", "--config", str(cfg), "--eta", "8,0", "--budget", "0"]) == 3
    lines = (tmp_path / "out" / "q4.csv").read_text().splitlines()
    assert lines[0] == "eta_x,eta_y,term,re,im,error_estimate" and len(lines) == 8
    assert main(["q4-oracle", "--config", str(cfg)]) == 2
    assert main(["q4-oracle", "--config", str(cfg), "--eta", "8"]) == 2


def test_check_command(tmp_path, capsys):
    assert main(["check", "support", "--output", str(tmp_path), "--emit", "csv"]) == 0
    text = (tmp_path / "checks.csv").read_text()
    assert text.startswith("check_id,status,statistic,tolerance,samples,detail")
    assert main(["check", "bogus"]) == 2


def test_schema_lists_every_key(capsys):
    assert main(["schema"]) == 0
    out = capsys.readouterr().out
    assert all(key in out for key in SCHEMA)


def test_console_entry_point():
    r = subprocess.run([sys.executable, "-m", "bornlab.cli", "schema"], capture_output=True, text=True)
    assert r.returncode == 0 and "grid.points_per_dim" in r.stdout
