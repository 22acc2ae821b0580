import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hosweep.cli import ConfigError, RunConfig, main
from hosweep.mesh import HighOrderMesh


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def meshes(tmp_path_factory):
    d = tmp_path_factory.mktemp("meshes")
    paths = {
        "uniform": d / "uniform.json",
        "annulus": d / "annulus.json",
        "distorted": d / "distorted.json",
    }
    assert main(["generate-mesh", "uniform", "--nx", "4", "--ny", "4", "--order", "3",
                 "-o", str(paths["uniform"])]) == 0
    assert main(["generate-mesh", "annulus", "--r1", "0.4", "--r2", "0.45", "--half-width",
                 "0.6", "--order", "3", "-o", str(paths["annulus"])]) == 0
    assert main(["generate-mesh", "distorted", "--nx", "8", "--ny", "8", "--order", "3",
                 "--amplitude", "0.018", "-o", str(paths["distorted"])]) == 0
    return paths


def test_generate_uniform(meshes):
    m = HighOrderMesh.load(meshes["uniform"])
    assert m.n_elements == 16 and m.order == 3


def test_generate_annulus_regions(meshes):
    m = HighOrderMesh.load(meshes["annulus"])
    assert set(m.regions.tolist()) == {1, 2, 3}


def test_generate_bad_parameters(tmp_path, capsys):
    code = main(["generate-mesh", "distorted", "--nx", "8", "--ny", "8", "--amplitude", "0.2",
                 "-o", str(tmp_path / "x.json")])
    assert code == 1
    assert "element" in capsys.readouterr().err


def test_graph_info_uniform_acyclic(meshes, tmp_path):
    assert main(["graph-info", str(meshes["uniform"]), "-o", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "graph_info.csv")
    assert len(rows) == 12
    assert all(r["edges_lagged"] == "0" and r["simple_cycles"] == "0"
               and r["large_sccs"] == "0" for r in rows)


def test_graph_info_distorted_cycles(meshes, tmp_path):
    assert main(["graph-info", str(meshes["distorted"]), "--all-weightings", "--dot",
                 "-o", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "graph_info.csv")
    assert len(rows) == 36
    assert sum(int(r["simple_cycles"]) + int(r["large_sccs"]) for r in rows) >= 1
    assert len(list(tmp_path.glob("*.dot"))) == 36


def test_graph_info_annulus_diagonal_vs_off(meshes, tmp_path):
    assert main(["graph-info", str(meshes["annulus"]), "-o", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "graph_info.csv")
    diag = [r for r in rows if np.isclose(abs(float(r["mu"])), abs(float(r["eta"])))]
    off = [r for r in rows if r not in diag]
    assert {int(r["edges_lagged"]) for r in diag} != {int(r["edges_lagged"]) for r in off}


def test_solve_triple_point_with_oracle(meshes, tmp_path):
    code = main(["solve", str(meshes["distorted"]), "--xs", "default=2,1", "--source",
                 "triple-point", "--inflow", "1", "--compare-oracle", "-o", str(tmp_path)])
    assert code == 0
    bal = json.loads((tmp_path / "balance.json").read_text())
    assert bal["converged"] and bal["oracle_converged"]
    assert bal["iterations"] >= bal["oracle_iterations"]
    hist = read_csv(tmp_path / "convergence.csv")
    assert len(hist) == bal["iterations"]
    assert float(hist[-1]["error"]) <= 1e-14
    assert len(read_csv(tmp_path / "convergence_oracle.csv")) == bal["oracle_iterations"]
    sol = np.load(tmp_path / "solution.npz")
    assert sol["psi"].shape == (12, 64, 4)


def test_solve_not_converged_exit_code(meshes, tmp_path):
    code = main(["solve", str(meshes["uniform"]), "--xs", "default=1,0.9",
                 "--max-iterations", "3", "-o", str(tmp_path)])
    assert code == 2
    assert not json.loads((tmp_path / "balance.json").read_text())["converged"]


def test_solve_missing_region_exit_code(meshes, tmp_path, capsys):
    code = main(["solve", str(meshes["annulus"]), "--xs", "1=1,0", "-o", str(tmp_path)])
    assert code == 1
    assert "region" in capsys.readouterr().err


def test_solve_missing_mesh_file(tmp_path):
    assert main(["solve", str(tmp_path / "nope.json"), "-o", str(tmp_path)]) == 1


def test_outputs_are_deterministic(meshes, tmp_path):
    outs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        args = ["--xs", "default=2,1", "--source", "triple-point", "--inflow", "1",
                "-o", str(out)]
        assert main(["graph-info", str(meshes["distorted"]), "--all-weightings"] + args) == 0
        assert main(["solve", str(meshes["distorted"])] + args) == 0
        outs.append(out)
    for name in ("graph_info.csv", "convergence.csv", "balance.json"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


def test_mms_single_mesh_has_no_order(meshes, tmp_path):
    assert main(["mms", str(meshes["uniform"]), "--order", "2", "--xs", "default=1,0.5",
                 "-o", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "mms_errors.csv")
    assert len(rows) == 1 and rows[0]["order"] == ""
    assert rows[0]["dofs"] == str(16 * 9)
    assert 0 < float(rows[0]["l2_error"]) < 1e-2


def test_mms_refinement_family(tmp_path):
    paths = []
    for n in (2, 4, 8):
        p = tmp_path / f"u{n}.json"
        assert main(["generate-mesh", "uniform", "--nx", str(n), "--ny", str(n), "--order", "1",
                     "-o", str(p)]) == 0
        paths.append(str(p))
    assert main(["mms", *paths, "--order", "3", "--xs", "default=1,0.5",
                 "-o", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "mms_errors.csv")
    assert rows[0]["order"] == ""
    assert all(float(r["order"]) >= 3.8 for r in rows[1:])


def test_straighten_command(meshes, tmp_path, capsys):
    out = tmp_path / "s.json"
    assert main(["straighten", str(meshes["annulus"]), "--nref", "2", "-o", str(out)]) == 0
    assert "all sub-elements valid" in capsys.readouterr().out
    assert HighOrderMesh.load(out).n_elements == 4 * HighOrderMesh.load(meshes["annulus"]).n_elements


def test_config_file_overrides_flags(meshes, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"max_iterations": 2, "cross_sections": {"default": [1, 0.9]}}))
    code = main(["solve", str(meshes["uniform"]), "--max-iterations", "500", "--config",
                 str(cfg), "-o", str(tmp_path)])
    assert code == 2


def test_config_unknown_key_rejected(meshes, tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"sigma": 1.0}))
    assert main(["solve", str(meshes["uniform"]), "--config", str(cfg),
                 "-o", str(tmp_path)]) == 1
    assert "unknown" in capsys.readouterr().err


@pytest.mark.parametrize("bad", [
    {"order": 0},
    {"angular_set": "S8"},
    {"source": "gaussian"},
    {"weighting": "area"},
    {"cross_sections": {"default": [0.5, 1.0]}},
    {"cross_sections": {"fuel": [1.0, 0.0]}},
    {"tolerance": -1.0},
])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(bad)


xs_values = st.floats(0.0, 10.0, allow_nan=False)


@settings(max_examples=60, deadline=None)
@given(order=st.integers(1, 4), angular=st.sampled_from(["S2", "S4"]),
       source=st.sampled_from(["constant", "triple-point", "mms"]),
       weighting=st.sampled_from(["unity", "face", "siginvface"]),
       tol=st.floats(1e-15, 1e-3), value=st.floats(-5, 5), st_ss=st.tuples(xs_values, xs_values),
       regions=st.lists(st.integers(1, 9), unique=True, max_size=3))
def test_config_round_trip(tmp_path_factory, order, angular, source, weighting, tol, value,
                           st_ss, regions):
    sig_t, sig_s = max(st_ss), min(st_ss)
    xs = {"default": [sig_t, sig_s]} | {str(r): [sig_t + r, sig_s] for r in regions}
    cfg = RunConfig(order=order, angular_set=angular, source=source, weighting=weighting,
                    tolerance=tol, source_value=value, cross_sections=xs)
    assert RunConfig.from_dict(cfg.to_dict()) == cfg
    path = tmp_path_factory.mktemp("cfg") / "c.json"
    cfg.save(path)
    assert RunConfig.load(path) == cfg
