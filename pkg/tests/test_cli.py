import csv
import json
import subprocess
import sys

import pytest
from hypothesis import given, settings, strategies as st

from lrscat.cli import DEFAULTS, main, parse_config, validate
from lrscat.errors import SchemaError

FAST_MODEL = {"cutoff_radius": 1.0}


def write(tmp_path, doc, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return p


def test_minimal_config_gets_defaults(tmp_path):
    cfg = parse_config(write(tmp_path, {}))
    assert cfg.raw["model"] == DEFAULTS["model"]
    assert cfg.raw["smatrix"]["N"] == 128
    assert len(cfg.hash) == 64


def test_mu_out_of_range_pointer(tmp_path):
    with pytest.raises(SchemaError) as exc:
        parse_config(write(tmp_path, {"model": {"mu": 1.2}}))
    assert exc.value.pointer == "/model/mu"
    assert "must be in (0,1)" in str(exc.value)


@pytest.mark.parametrize("doc, pointer", [
    ({"model": {"p0_family": "bogus"}}, "/model/p0_family"),
    ({"smatrix": {"N": 1}}, "/smatrix/N"),
    ({"flow": {"data": [{"x": [1.0], "xi": [1.0, 0.0]}]}}, "/flow/data/0/x"),
    ({"unexpected": 1}, "/"),
    ({"verify": {"checks": ["nope"]}}, "/verify/checks/0"),
])
def test_schema_errors(doc, pointer):
    with pytest.raises(SchemaError) as exc:
        validate(doc)
    assert exc.value.pointer == pointer


@settings(max_examples=50, deadline=None)
@given(mu=st.floats(-5, 5, allow_nan=False))
def test_mu_gate_property(mu):
    if 0 < mu < 1:
        assert validate({"model": {"mu": mu}})["model"]["mu"] == mu
    else:
        with pytest.raises(SchemaError):
            validate({"model": {"mu": mu}})


def test_missing_file(tmp_path):
    with pytest.raises(OSError):
        parse_config(tmp_path / "absent.json")
    assert main(["flow", "--config", str(tmp_path / "absent.json")]) == 2


def test_bad_config_exit_code(tmp_path, capsys):
    p = write(tmp_path, {"model": {"mu": 1.2}})
    assert main(["flow", "--config", str(p)]) == 2
    assert "/model/mu" in capsys.readouterr().err


def test_flow_outputs_and_determinism(tmp_path):
    doc = {"model": FAST_MODEL, "flow": {"t": 5.0, "samples": 6}}
    p = write(tmp_path, doc)
    outs = []
    for k in range(2):
        out = tmp_path / f"o{k}"
        assert main(["flow", "--config", str(p), "--out", str(out)]) == 0
        outs.append(out)
    a = (outs[0] / "flow.csv").read_bytes()
    assert a == (outs[1] / "flow.csv").read_bytes()
    text = a.decode()
    assert text.startswith("# config_sha256: ")
    rows = list(csv.reader(line for line in text.splitlines() if not line.startswith("#")))
    assert len(rows) > 6
    j = [json.loads((o / "flow.json").read_text()) for o in outs]
    for d in j:
        d.pop("metadata", None)
    assert j[0] == j[1]


def test_smatrix_subcommand(tmp_path):
    doc = {"model": {"potential_family": "zero", "coupling": 0.0, "cutoff_radius": 1.0},
           "smatrix": {"N": 8, "Y": 20.0, "Ny": 128}}
    p = write(tmp_path, doc)
    assert main(["smatrix", "--config", str(p), "--out", str(tmp_path / "s")]) == 0
    meta = json.loads((tmp_path / "s" / "smatrix.json").read_text())
    assert meta["metadata"]["N"] == 8
    assert meta["metadata"]["unitarity_defect"] < 1e-8
    lines = [ln for ln in (tmp_path / "s" / "smatrix.csv").read_text().splitlines()
             if not ln.startswith("#")]
    assert lines[0] == "j,k,re,im" and len(lines) == 65


@pytest.mark.parametrize("command", ["hj", "wavemap", "scatmap"])
def test_other_subcommands(tmp_path, command):
    p = write(tmp_path, {"model": FAST_MODEL})
    assert main([command, "--config", str(p), "--out", str(tmp_path / command)]) == 0
    assert (tmp_path / command / f"{command}.json").exists()


def test_verify_exit_codes(tmp_path):
    good = write(tmp_path, {"model": FAST_MODEL,
                            "verify": {"checks": ["elementary-bound", "surface-measure"]}}, "g.json")
    assert main(["verify", "--config", str(good), "--out", str(tmp_path / "g")]) == 0
    bundle = json.loads((tmp_path / "g" / "conformance.json").read_text())
    assert bundle["all_pass"] and "config_sha256" in bundle
    bad = write(tmp_path, {"model": {"coupling": 10.0, "mu": 0.99, "cutoff_radius": 1.0},
                           "verify": {"checks": ["convexity"]}}, "b.json")
    assert main(["verify", "--config", str(bad), "--out", str(tmp_path / "b")]) == 1


def test_runtime_error_exit_code(tmp_path):
    # lambda outside the range of a relativistic p0 cannot form a surface
    doc = {"model": {"p0_family": "relativistic", "energy_interval": [1.45, 1.55],
                     "cutoff_radius": 1.0},
           "smatrix": {"lambda": 0.5, "N": 8, "Y": 10.0, "Ny": 32}}
    assert main(["smatrix", "--config", str(write(tmp_path, doc)),
                 "--out", str(tmp_path / "r")]) == 2


def test_module_entry_point(tmp_path):
    p = write(tmp_path, {"model": {"mu": 7}})
    r = subprocess.run([sys.executable, "-m", "lrscat", "flow", "--config", str(p)],
                       capture_output=True, text=True)
    assert r.returncode == 2
    assert "/model/mu" in r.stderr
