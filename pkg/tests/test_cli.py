import csv
import io
import json
import shutil
import subprocess

import pytest

from mhdlab.cli import main
from mhdlab.config import config_hash, load_config
from mhdlab.hoermander import nonparallel_pairs

SMALL = {
    "schema_version": 1,
    "experiments": {
        "simulate": {"T": 0.2},
        "malliavin": {"T": 0.5, "probes": 10},
        "moments": {"M": 16, "T": 1.0, "burn_in": 0.5},
        "e_property": {"M": 8, "t": 0.2},
        "irreducibility": {"M": 40, "T": 1.0, "candidates": 2, "pilot": 10},
        "invariant_measure": {"M": 6, "T": 2.0, "burn_in": 1.0},
        "positivity": {"samples": 3, "horizon": 20.0},
    },
}


@pytest.fixture
def small_config(tmp_path):
    p = tmp_path / "small.json"
    p.write_text(json.dumps(SMALL))
    return p


def _run(cmd, out, config=None, *extra):
    argv = [cmd, "--out", str(out), "--threads", "1", *extra]
    if config is not None:
        argv += ["--config", str(config)]
    return main(argv)


def _artifacts(out):
    return {p.name: p.read_bytes() for p in sorted(out.iterdir()) if p.name != "manifest.json"}


def _rows(text):
    return list(csv.DictReader(io.StringIO(text.split("\n", 1)[1])))


def test_brackets_default_config(tmp_path):
    assert _run("brackets", tmp_path) == 0
    rows = _rows((tmp_path / "brackets.csv").read_text())
    pairs = {(int(r["k1"]), int(r["k2"]), int(r["l1"]), int(r["l2"])) for r in rows}
    assert pairs == {(*k, *l) for k, l in nonparallel_pairs(5)}
    assert max(float(r["residual"]) for r in rows) <= 1e-10
    summary = json.loads((tmp_path / "brackets.json").read_text())
    assert summary["velocity"]["passed"] and summary["magnetic"]["passed"]


def test_cascade_report(tmp_path):
    assert _run("cascade", tmp_path) == 0
    rep = json.loads((tmp_path / "cascade.json").read_text())
    assert [1, 2] in rep["generations"][0]["new_modes"]
    assert rep["missing"] == [] and rep["generator_check"]["generator"]


def test_invalid_config_exit_code(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"schema_version": 1, "dissipation": {"alpha": 0.9}}))
    assert _run("simulate", tmp_path / "o", p) == 2
    assert "dissipation.alpha: fractional exponent must exceed 1" in capsys.readouterr().err
    p.write_text(json.dumps({"schema_version": 1, "subordinator": {"family": "compound-poisson", "rate": 1,
                                                                   "mean_jump": 1}}))
    assert _run("simulate", tmp_path / "o", p) == 2
    assert "admissibility condition" in capsys.readouterr().err
    assert _run("simulate", tmp_path / "o", tmp_path / "missing.json") == 2
    assert _run("simulate", tmp_path / "o", None, "--threads", "0") == 2


def test_missing_amplitude_is_a_config_error(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"schema_version": 1, "amplitudes": {"0,1": [0.1, 0.1]}}))
    assert _run("cascade", tmp_path / "o", p) == 2
    assert "(1, 1)" in capsys.readouterr().err


@pytest.mark.parametrize("cmd", ["simulate", "cascade", "malliavin", "moments"])
def test_reruns_are_byte_identical(tmp_path, small_config, cmd):
    a, b = tmp_path / "a", tmp_path / "b"
    assert _run(cmd, a, small_config) in (0, 4)
    assert _run(cmd, b, small_config) in (0, 4)
    assert _artifacts(a) == _artifacts(b)
    c = tmp_path / "c"
    _run(cmd, c, small_config, "--seed", "9")
    if cmd != "cascade":
        assert _artifacts(c) != _artifacts(a)


def test_every_artifact_carries_hash_and_seed(tmp_path, small_config):
    out = tmp_path / "sim"
    assert _run("simulate", out, small_config, "--seed", "3") == 0
    cfg = load_config(small_config)
    cfg["seed"] = 3
    h = config_hash(cfg)
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config_hash"] == h and manifest["exit_status"] == 0
    assert set(manifest["artifacts"]) == set(_artifacts(out))
    for name, data in _artifacts(out).items():
        text = data.decode()
        if name.endswith(".json"):
            d = json.loads(text)
            assert d["config_hash"] == h and d["seed"] == 3
        else:
            assert text.startswith(f"# config_hash={h} seed=3\n")


@pytest.mark.slow
def test_ergodicity_writes_every_probe(tmp_path, small_config):
    assert _run("ergodicity", tmp_path, small_config) in (0, 4)
    summary = json.loads((tmp_path / "ergodicity.json").read_text())
    names = {"moments", "e_property", "irreducibility", "invariant_measure", "positivity"}
    assert names <= set(summary)
    for n in names:
        assert (tmp_path / f"{n}.csv").exists()


@pytest.mark.skipif(shutil.which("mhdlab") is None, reason="console script not installed")
def test_console_script(tmp_path):
    res = subprocess.run(["mhdlab", "cascade", "--out", str(tmp_path)], capture_output=True, text=True)
    assert res.returncode == 0
    bad = subprocess.run(["mhdlab", "nonsense"], capture_output=True, text=True)
    assert bad.returncode == 2
