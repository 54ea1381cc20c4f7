import csv
import dataclasses
import json

import numpy as np
import pytest

from bcsr_eit import cli
from bcsr_eit.config import ConfigError, Experiment, load_config, validate_config
from bcsr_eit.mesh import generate_disk_mesh
from bcsr_eit.mesh_io import save_mesh
from bcsr_eit.phantoms import Phantom

SMALL = {
    "case": "case1",
    "sim_mesh": {"n_rings": 6},
    "recon_mesh": {"n_rings": 5},
    "n_basis": 20,
    "lmf": {"max_iter": 8},
    "snr_db": [60],
    "seeds": [0],
}


def write_cfg(tmp_path, **over):
    cfg = {**SMALL, **over}
    path = tmp_path / "exp.json"
    path.write_text(json.dumps(cfg))
    return str(path)


def run(tmp_path, stage, out="out", extra=(), **over):
    return cli.main([stage, "--config", write_cfg(tmp_path, **over), "--out", str(tmp_path / out), *extra])


# -- config ------------------------------------------------------------------------


def test_defaults_filled():
    cfg = validate_config({"case": "case1"})
    assert cfg["enforce_no_inverse_crime"] is True
    assert cfg["methods"] == ["bcsr"]
    exp = Experiment(cfg)
    assert exp.bounds == (0.2, 2.0)
    assert exp.snr_values == [60.0]


def test_unknown_key_names_path():
    with pytest.raises(ConfigError, match="lmf"):
        validate_config({"case": "case1", "lmf": {"mu_0": 1e-4}})
    with pytest.raises(ConfigError, match="<root>"):
        validate_config({"case": "case1", "nbasis": 3})


def test_bad_values():
    with pytest.raises(ConfigError, match="unknown case"):
        validate_config({"case": "case7"})
    with pytest.raises(ConfigError, match="bounds"):
        validate_config({"case": "case1", "bounds": [2.0, 0.2]})
    with pytest.raises(ConfigError, match="methods"):
        validate_config({"case": "case1", "methods": ["bcsr", "bcsr"]})
    with pytest.raises(ConfigError, match="snr_db"):
        validate_config({"case": "case1", "snr_db": ["loud"]})


def test_missing_mesh_file_names_path(tmp_path):
    path = tmp_path / "exp.json"
    path.write_text(json.dumps({"case": "case1", "sim_mesh": {"file": "/nowhere/m.msh"}}))
    with pytest.raises(ConfigError, match="/nowhere/m.msh"):
        load_config(path)


def test_invalid_json(tmp_path):
    path = tmp_path / "exp.json"
    path.write_text("{case: 1")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(path)


def test_n_basis_resolution():
    exp = Experiment(validate_config({"case": "case1"}))
    assert exp.n_basis_values(2000) == [200]
    exp = Experiment(validate_config({"case": "case1", "n_basis": [100, 200, 500]}))
    assert exp.n_basis_values(2000) == [100, 200, 500]


# -- exit codes ----------------------------------------------------------------------


def test_exit_unknown_key(tmp_path, capsys):
    assert run(tmp_path, "simulate", foo=1) == cli.EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_exit_missing_mesh_file(tmp_path, capsys):
    assert run(tmp_path, "simulate", sim_mesh={"file": str(tmp_path / "absent.json")}) == cli.EXIT_CONFIG
    assert "absent.json" in capsys.readouterr().err


def test_exit_missing_config(tmp_path):
    assert cli.main(["mesh", "--config", str(tmp_path / "none.json")]) == cli.EXIT_CONFIG


def test_inverse_crime_guard_aborts_before_simulation(tmp_path, capsys):
    code = run(tmp_path, "simulate", recon_mesh={"n_rings": 6})
    assert code == cli.EXIT_GUARD
    assert "identical" in capsys.readouterr().err
    assert not list((tmp_path / "out").glob("data/*"))


def test_guard_with_mesh_files(tmp_path):
    mesh, layout = generate_disk_mesh(n_rings=5)
    save_mesh(tmp_path / "a.json", mesh, layout)
    save_mesh(tmp_path / "b.json", mesh, layout)
    code = run(tmp_path, "mesh", sim_mesh={"file": str(tmp_path / "a.json")},
               recon_mesh={"file": str(tmp_path / "b.json")})
    assert code == cli.EXIT_GUARD


def test_reconstruct_without_data(tmp_path):
    assert run(tmp_path, "reconstruct") == cli.EXIT_CONFIG


# -- stages ------------------------------------------------------------------------


def test_mesh_stage(tmp_path):
    assert run(tmp_path, "mesh") == 0
    fp = json.loads((tmp_path / "out/meshes/fingerprints.json").read_text())
    assert fp["sim"] != fp["recon"]
    assert fp["sim_nodes"] == 193 and fp["recon_nodes"] == 129


def test_simulate_snr_grid_and_determinism(tmp_path):
    snrs = [60, 50, 40, 30]
    assert run(tmp_path, "simulate", out="a", snr_db=snrs) == 0
    assert run(tmp_path, "simulate", out="b", snr_db=snrs) == 0
    files = sorted(p.name for p in (tmp_path / "a/data").iterdir())
    assert files == [f"snr{s}_seed0.json" for s in sorted(snrs)]
    for f in files:
        assert (tmp_path / "a/data" / f).read_bytes() == (tmp_path / "b/data" / f).read_bytes()


def test_seed_override(tmp_path):
    assert run(tmp_path, "simulate", extra=["--seed-override", "7"], seeds=[1, 2]) == 0
    assert [p.name for p in (tmp_path / "out/data").iterdir()] == ["snr60_seed7.json"]


def test_three_methods_tagged(tmp_path):
    methods = ["bcsr", "ld", "gn_l2"]
    assert run(tmp_path, "pipeline", methods=methods, gn_l2={"iters": 3}) == 0
    res = tmp_path / "out/results"
    assert (res / "bcsr_snr60_seed0_nb20.json").exists()
    assert (res / "ld_snr60_seed0.json").exists()
    assert (res / "gn_l2_snr60_seed0.json").exists()
    for f in res.glob("*.json"):
        assert json.loads(f.read_text())["status"] == "ok"
    rows = list(csv.DictReader(open(tmp_path / "out/metrics.csv")))
    assert sorted(r["method"] for r in rows) == ["bcsr[nb=20]", "gn_l2", "ld"]
    assert (tmp_path / "out/logs/bcsr_snr60_seed0_nb20.log").read_text().strip()
    summary = json.loads((tmp_path / "out/summary.json").read_text())
    assert summary["ld@snr=60.0"]["rmse"]["n"] == 1


def test_end_to_end_determinism(tmp_path):
    for out in ("a", "b"):
        assert run(tmp_path, "pipeline", out=out, methods=["bcsr", "ld"], seeds=[0, 1]) == 0
    assert (tmp_path / "a/metrics.csv").read_bytes() == (tmp_path / "b/metrics.csv").read_bytes()
    for f in (tmp_path / "a/results").glob("*.csv"):
        assert f.read_bytes() == (tmp_path / "b/results" / f.name).read_bytes()


def test_inject_truth_row(tmp_path):
    assert run(tmp_path, "pipeline") == 0
    assert run(tmp_path, "evaluate", extra=["--inject-truth"]) == 0
    rows = {r["method"]: r for r in csv.DictReader(open(tmp_path / "out/metrics.csv"))}
    assert float(rows["truth"]["ssim"]) == pytest.approx(1.0, abs=1e-12)
    assert float(rows["truth"]["rmse"]) == 0.0


def test_nb_sweep_rows(tmp_path):
    nbs = [10, 20, 40]
    assert run(tmp_path, "pipeline", n_basis=nbs, lmf={"max_iter": 3}) == 0
    rows = list(csv.DictReader(open(tmp_path / "out/metrics.csv")))
    assert sorted(r["method"] for r in rows) == sorted(f"bcsr[nb={n}]" for n in nbs)


def test_self_consistent_noise_free_converges(tmp_path, monkeypatch):
    # same mesh for simulation and reconstruction, homogeneous truth: sigma0 already fits
    from bcsr_eit import config

    real = config.case_library
    monkeypatch.setattr(
        config, "case_library",
        lambda cid: dataclasses.replace(real(cid), phantom=Phantom("flat", 1.3)),
    )
    code = run(
        tmp_path, "pipeline", recon_mesh={"n_rings": 6}, enforce_no_inverse_crime=False,
        snr_db=["inf"], lmf={"max_iter": 30},
    )
    assert code == 0
    res = json.loads((tmp_path / "out/results/bcsr_snrinf_seed0_nb20.json").read_text())
    assert res["termination_reason"] == "step_tol"
    np.testing.assert_allclose(res["sigma"], 1.3, rtol=1e-6)


def test_difference_mode(tmp_path):
    code = run(
        tmp_path, "pipeline", case="case5_lung", mode="difference", methods=["bcsr", "ld"],
        sim_mesh={"n_rings": 8}, recon_mesh={"n_rings": 7}, difference={"n_frames": 3},
        lmf={"max_iter": 5}, export_vtk=True,
    )
    assert code == 0
    out = tmp_path / "out"
    for m in ("bcsr", "ld"):
        res = json.loads((out / f"results/{m}_snr60_seed0.json").read_text())
        assert len(res["delta_sigma"]) == 3
        vent = list(csv.reader(open(out / f"ventilation_{m}_snr60_seed0.csv")))
        assert vent[0] == ["t", "F_left", "F_right", "F_total"] and len(vent) == 4
    b = json.loads((out / "results/bcsr_snr60_seed0.json").read_text())
    l = json.loads((out / "results/ld_snr60_seed0.json").read_text())
    assert b["sigma_baseline"] == l["sigma_baseline"]
    assert (out / "vtk/bcsr_snr60_seed0.vtk").exists()


def test_jobs_matches_serial(tmp_path):
    kw = dict(snr_db=[60, 40], methods=["ld"])
    assert run(tmp_path, "pipeline", out="s", **kw) == 0
    assert run(tmp_path, "pipeline", out="p", extra=["--jobs", "2"], **kw) == 0
    assert (tmp_path / "s/metrics.csv").read_bytes() == (tmp_path / "p/metrics.csv").read_bytes()
