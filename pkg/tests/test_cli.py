from __future__ import annotations

import csv
import json
import math

import numpy as np
import pytest

from nathermo.cli import main
from nathermo.config import (
    ConfigError,
    RunConfig,
    eval_arithmetic,
    load_config,
    parse_config,
    substitute,
)

EXCHANGE = {
    "schema_version": 1,
    "mode": "exchange",
    "model": {"type": "heisenberg", "J": 1.0, "omega": 1.0, "beta": 1.0, "beta_r": 0.5},
    "grid": {"min": 0.0, "max": math.pi, "points": 65},
}

CUSTOM = {
    "schema_version": 1,
    "mode": "custom",
    "model": {
        "type": "custom",
        "system_sites": 1,
        "reservoir_sites": 1,
        "system_charges": ["X", "Y", "Z"],
        "reservoir_charges": ["X", "Y", "Z"],
        "charge_names": ["x", "y", "z"],
        "affinities": ["{0.5*sin(theta)}", 0.0, "{0.5*cos(theta)}"],
        "reservoir_affinities": [0.0, 0.0, 0.25],
        "system_hamiltonian": "{0.5*cos(theta)}*Z + {0.5*sin(theta)}*X",
        "reservoir_hamiltonian": "0.5*Z",
        "interaction": "XX + YY + ZZ",
        "duration": math.pi,
    },
    "grid": {"min": 0.0, "max": math.pi, "points": 5},
}


def write(tmp_path, data, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(data))
    return p


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_arithmetic_placeholders():
    assert eval_arithmetic("0.5*cos(theta)", 0.0) == 0.5
    assert eval_arithmetic("-pi/2 + 2**2", 0.0) == pytest.approx(4 - math.pi / 2)
    with pytest.raises(ConfigError):
        eval_arithmetic("__import__('os')", 0.0)
    with pytest.raises(ConfigError):
        eval_arithmetic("theta +", 0.0)
    assert substitute("{cos(theta)}*Z + {-1}*X", 0.0) == "1.0*Z - 1.0*X"


def test_config_round_trip(tmp_path):
    for data in (EXCHANGE, CUSTOM):
        cfg = parse_config(data)
        again = parse_config(json.loads(cfg.to_json()))
        assert again == cfg
        assert load_config(write(tmp_path, cfg.to_dict())) == cfg


def test_config_defaults():
    cfg = parse_config({"schema_version": 1})
    assert cfg == RunConfig()


@pytest.mark.parametrize(
    "patch, fragment",
    [
        ({"schema_version": 2}, "schema_version"),
        ({"mode": "other"}, "mode"),
        ({"grid": {"points": 0}}, "points"),
        ({"flags": ["nope"]}, "flags"),
        ({"extra": 1}, "unknown top-level"),
        ({"model": {"type": "heisenberg", "beta": "hot"}}, "number"),
        ({"model": {"type": "heisenberg", "gamma": 1}}, "unknown key"),
        ({"model": {"type": "heisenberg", "tau": -1.0}}, "tau"),
    ],
)
def test_config_errors(patch, fragment):
    data = {**EXCHANGE, **patch}
    with pytest.raises(ConfigError, match=fragment):
        parse_config(data)


def test_custom_model_errors():
    bad = json.loads(json.dumps(CUSTOM))
    bad["model"]["interaction"] = "XX + YQ"
    with pytest.raises(ConfigError, match="unknown Pauli letter"):
        parse_config(bad)
    bad = json.loads(json.dumps(CUSTOM))
    bad["model"]["system_hamiltonian"] = "1j*X"
    with pytest.raises(ConfigError):
        parse_config(bad)
    bad = json.loads(json.dumps(CUSTOM))
    bad["model"]["affinities"] = [0.0, 0.0]
    with pytest.raises(ConfigError):
        parse_config(bad).build_setup(0.0)


def test_custom_model_matches_heisenberg():
    from nathermo.heisenberg import HeisenbergParams, build_exchange_model

    cfg = parse_config(CUSTOM)
    for theta in (0.0, 1.1, 2.5):
        a = cfg.build_setup(theta)
        b = build_exchange_model(HeisenbergParams(theta=theta))
        assert np.allclose(a.propagator.matrix, b.propagator.matrix, atol=1e-12)
        assert np.allclose(a.affinities, b.affinities)


def test_sweep_exchange(tmp_path, capsys):
    cfg = write(tmp_path, EXCHANGE)
    out = tmp_path / "exchange.csv"
    assert main(["sweep", "--config", str(cfg), "--out", str(out)]) == 0
    rows = read_csv(out)
    assert len(rows) == 66
    summary = capsys.readouterr().out
    assert "max|ft-1|=" in summary
    dev = float(summary.split("max|ft-1|=")[1].split()[0])
    assert dev < 1e-9
    # deterministic bytes
    out2 = tmp_path / "again.csv"
    main(["sweep", "--config", str(cfg), "--out", str(out2)])
    assert out.read_bytes() == out2.read_bytes()


def test_sweep_overrides_and_flags(tmp_path):
    cfg = write(tmp_path, EXCHANGE)
    out = tmp_path / "x.csv"
    code = main(["sweep", "--config", str(cfg), "--out", str(out), "--points", "3",
                 "--theta-min", "0", "--theta-max", str(math.pi), "--flag", "force-epsilon-zero"])
    assert code == 0
    rows = read_csv(out)
    col = rows[0].index("ft_exchange")
    ft = [float(r[col]) for r in rows[1:]]
    assert abs(ft[1] - 1) > 1e-3
    assert abs(ft[0] - 1) < 1e-9 and abs(ft[2] - 1) < 1e-9


def test_driven_sweep_with_force_epsilon_zero(tmp_path):
    data = {**EXCHANGE, "mode": "work", "grid": {"min": 0.0, "max": math.pi, "points": 3}}
    cfg = write(tmp_path, data)
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["sweep", "--config", str(cfg), "--out", str(a)]) == 0
    assert main(["sweep", "--config", str(cfg), "--out", str(b), "--flag", "force-epsilon-zero"]) == 0
    ra, rb = read_csv(a), read_csv(b)
    col = ra[0].index("ft_work")
    assert "W_z" in ra[0]
    assert float(ra[2][col]) != pytest.approx(float(rb[2][col]), rel=1e-6)


def test_sweep_failed_rows_exit_2(tmp_path):
    data = {**EXCHANGE, "model": {"type": "heisenberg", "beta": 5000.0}, "grid": {"min": 0.5, "max": 1.0, "points": 2}}
    assert main(["sweep", "--config", str(write(tmp_path, data)), "--out", str(tmp_path / "f.csv")]) == 2


def test_missing_config(tmp_path, capsys):
    missing = tmp_path / "nope.json"
    assert main(["sweep", "--config", str(missing)]) == 1
    assert str(missing) in capsys.readouterr().err


def test_invalid_json(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    assert main(["verify", "--config", str(p)]) == 1
    assert "invalid JSON" in capsys.readouterr().err


def test_verify_exchange(tmp_path):
    data = {**EXCHANGE, "grid": {"min": 0.0, "max": math.pi, "points": 9}}
    out = tmp_path / "report.json"
    assert main(["verify", "--config", str(write(tmp_path, data)), "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert rep["passed"]
    names = {c["name"] for c in rep["checks"]}
    assert {"forward_normalization", "reverse_normalization", "first_law_closure",
            "exchange_ft", "conservation_residual"} <= names
    assert len(rep["reports"]) == 9
    assert "work_ft_variants" not in rep
    assert rep["reports"][0]["ft_exchange"] == pytest.approx(1)


def test_verify_rejects_bad_expression(tmp_path):
    bad = json.loads(json.dumps(CUSTOM))
    bad["model"]["system_hamiltonian"] = "0.5*Z + 2i*X"
    assert main(["verify", "--config", str(write(tmp_path, bad))]) == 1


def test_verify_driven(tmp_path):
    data = {**EXCHANGE, "mode": "work", "grid": {"min": 0.5, "max": 1.0, "points": 2}}
    out = tmp_path / "report.json"
    assert main(["verify", "--config", str(write(tmp_path, data)), "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    info = {c["name"]: c for c in rep["checks"]}
    assert not info["work_detailed_residual"]["hard"]
    assert not info["conservation_residual"]["hard"]
    assert rep["reports"][0]["ft_exchange"] is None
    variants = rep["work_ft_variants"]
    assert set(variants["values"]) == {"j_ij", "j_mn", "literal_ij", "literal_mn"}
    assert variants["best_variant"] in variants["values"]


def test_verify_custom(tmp_path):
    out = tmp_path / "r.json"
    assert main(["verify", "--config", str(write(tmp_path, CUSTOM)), "--out", str(out)]) == 0


def test_trajectories_dump(tmp_path):
    cfg = write(tmp_path, EXCHANGE)
    out = tmp_path / "t.csv"
    assert main(["trajectories", "--config", str(cfg), "--theta", str(math.pi / 2), "--out", str(out)]) == 0
    rows = read_csv(out)
    assert len(rows) == 65
    p = [float(r[6]) for r in rows[1:]]
    assert abs(sum(p) - 1) < 1e-12
    out0 = tmp_path / "t0.csv"
    main(["trajectories", "--config", str(cfg), "--theta", "0", "--out", str(out0)])
    rows0 = read_csv(out0)
    eps_cols = [k for k, name in enumerate(rows0[0]) if name.startswith("eps_") and name != "eps_valid"]
    valid = [r for r in rows0[1:] if r[-1] == "true"]
    # records with no coupling path at any power carry zero probability and stay undefined
    assert all(float(r[6]) == 0 for r in rows0[1:] if r[-1] == "false")
    assert valid and all(float(r[k]) == 0 for r in valid for k in eps_cols)


def test_trajectories_singular_rows_follow_threshold(tmp_path):
    from nathermo.heisenberg import HeisenbergParams, build_exchange_model
    from nathermo.trajectories import EnsembleOptions, enumerate_ensemble

    cfg = write(tmp_path, EXCHANGE)
    out = tmp_path / "t.csv"
    main(["trajectories", "--config", str(cfg), "--theta", str(math.pi / 2), "--out", str(out),
          "--flag", "exclude-singular"])
    rows = read_csv(out)
    flags = np.array([r[-1] == "false" for r in rows[1:]])
    ens = enumerate_ensemble(build_exchange_model(HeisenbergParams(theta=math.pi / 2)),
                             EnsembleOptions(singular="exclude"))
    thr = 1e-12 * np.max(np.abs(ens.setup.interaction))
    assert np.array_equal(flags, ens.v_element_magnitude <= thr)
    assert flags.any()


def test_module_entry_point():
    import subprocess
    import sys

    res = subprocess.run([sys.executable, "-m", "nathermo", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "sweep" in res.stdout
