import hashlib
import json

import pytest

from lisbayes.cli import COMMANDS, main, sub_seed
from lisbayes.config import ExperimentConfig, apply_env, config_from_dict, load_config
from lisbayes.errors import ConfigError

SMALL = {
    "model": {"kind": "linear", "dim": 10, "dim_obs": 8, "lambda0": 3.0, "beta_gamma": 0.0},
    "gram": {"m": 2000, "m_values": [100, 1000], "m_reference": 5000},
    "subspace": {"d_r": [1, 2, 4]},
    "surrogate": {"M": [4], "M_sweep": [1, 4]},
    "sampler": {"epochs": 2, "t": 200, "n_particles": 256, "d_r": 3},
    "diagnostics": {"replications": 5, "n_target": 2000, "smc_particles": 256},
}


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(SMALL))
    return str(path)


def test_defaults_validate():
    cfg = ExperimentConfig().validate()
    assert cfg.model.dim == 50 and cfg.diagnostics.kappa == 1.0


@pytest.mark.parametrize("data,key", [
    ({"model": {"dimm": 3}}, "model.dimm"),
    ({"bogus": 1}, "bogus"),
    ({"sampler": {"tau": 1.5}}, "sampler.tau"),
    ({"subspace": {"d_r": [60]}}, "subspace.d_r"),
    ({"model": {"kind": "quadratic"}}, "model.kind"),
    ({"sampler": {"betas": [0.5, 0.2, 1.0]}}, "sampler.betas"),
])
def test_invalid_config_names_key(data, key):
    with pytest.raises(ConfigError) as exc:
        config_from_dict(data)
    assert key in str(exc.value)


def test_env_override_parsed_as_json():
    data = apply_env({"model": {"dim": 5}}, {"LISBAYES_MODEL__DIM": "12", "LISBAYES_SEED": "7",
                                             "LISBAYES_SAMPLER__PROPOSAL": "PCN", "OTHER": "x"})
    assert data == {"model": {"dim": 12}, "seed": 7, "sampler": {"proposal": "PCN"}}
    cfg = load_config(environ={"LISBAYES_SUBSPACE__D_R": "[1, 3]"})
    assert cfg.subspace.d_r == [1, 3]


def test_explicit_override_beats_env(small_config):
    cfg = load_config(small_config, environ={"LISBAYES_SEED": "4"}, overrides={"seed": 9, "out": None})
    assert cfg.seed == 9


def test_sub_seed_deterministic_and_distinct():
    assert sub_seed(3, "a", 1) == sub_seed(3, "a", 1)
    assert len({sub_seed(3, "a", 1), sub_seed(3, "a", 2), sub_seed(4, "a", 1)}) == 3
    assert 0 <= sub_seed(2**64 - 1, "x") < 2**63


def test_unknown_key_exit_code(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"model": {"dimension": 10}}))
    assert main(["spectrum", "--config", str(path), "--out", str(tmp_path / "o")]) == 2
    assert "model.dimension" in capsys.readouterr().err


def test_missing_config_file_exit_code(tmp_path):
    assert main(["spectrum", "--config", str(tmp_path / "none.json")]) == 2


def test_synth_data_manifest_hashes(small_config, tmp_path):
    out = tmp_path / "synth"
    assert main(["synth-data", "--config", small_config, "--out", str(out), "--seed", "3"]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 3 and manifest["command"] == "synth-data"
    assert {f["path"] for f in manifest["files"]} == {"data.csv", "truth.csv"}
    for f in manifest["files"]:
        assert hashlib.sha256((out / f["path"]).read_bytes()).hexdigest() == f["sha256"]


def test_spectrum_writes_bounds_for_linear_model(small_config, tmp_path):
    out = tmp_path / "spec"
    assert main(["spectrum", "--config", small_config, "--out", str(out)]) == 0
    reports = json.loads((out / "bounds.json").read_text())
    assert reports and all(r["satisfied"] for r in reports)
    header = (out / "spectrum_H0.csv").read_text().splitlines()[0]
    assert header == "r,eigenvalue,gap,tail_sum"


def test_threads_do_not_change_output(small_config, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["subspace-stability", "--config", small_config, "--out", str(a)]) == 0
    assert main(["subspace-stability", "--config", small_config, "--out", str(b), "--threads", "3"]) == 0
    name = "subspace_stability.csv"
    assert (a / name).read_bytes() == (b / name).read_bytes()


def test_seed_changes_output(small_config, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["smc", "--config", small_config, "--out", str(a), "--seed", "1"]) == 0
    assert main(["smc", "--config", small_config, "--out", str(b), "--seed", "2"]) == 0
    assert (a / "particles.csv").read_bytes() != (b / "particles.csv").read_bytes()


def test_all_commands_registered():
    assert set(COMMANDS) == {"spectrum", "approx-error", "mc-error", "subspace-stability", "mcmc", "smc",
                             "synth-data"}
