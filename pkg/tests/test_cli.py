import json

import numpy as np
import pytest

from bvjump import cli, pdaj
from bvjump.bv_core import curve_from_dict
from bvjump.cli import (
    EXIT_CONFIG,
    EXIT_OK,
    EXIT_SOLVER,
    ConfigError,
    build_config,
    build_problem,
    main,
    noise_vector,
    packaged_config,
    parse_key_values,
    read_config_file,
    truth_curve,
)
from bvjump.subproblem import SubproblemFailure


def files(path):
    return sorted(p.name for p in path.iterdir())


def test_key_value_grammar():
    raw = parse_key_values("# c\nbeta = 2e-5  # trailing\n\ntruth_levels = 0; 1, \n")
    assert set(raw) == {"beta", "truth_levels"}
    cfg = build_config(
        {"beta": raw["beta"], "truth_positions": ("0.5", "x"), "truth_levels": ("0; 1", "x")}, {}
    )
    assert cfg.beta == 2e-5
    assert cfg.truth_levels == ((0.0,), (1.0,))


@pytest.mark.parametrize(
    "text, fragment",
    [
        ("beta 1e-5", ":1: expected 'key = value'"),
        ("\nbogus = 1", ":2: unknown key 'bogus'"),
        ("beta = 1\nbeta = 2", ":2: duplicate key 'beta'"),
    ],
)
def test_key_value_errors_name_the_line(text, fragment):
    with pytest.raises(ConfigError, match=fragment):
        parse_key_values(text, "f.cfg")


@pytest.mark.parametrize(
    "overrides, field",
    [
        ({"beta": "-1"}, "beta"),
        ({"beta": "abc"}, "beta"),
        ({"noise_seed": "none-int"}, "noise_seed"),
        ({"problem": "heat"}, "problem"),
        ({"solver": "cg"}, "solver"),
        ({"truth_positions": "0.5, 0.3"}, "truth_positions"),
        ({"truth_levels": "0; 1"}, "truth_levels"),
        ({"truth_levels": "0; 1, 2; 3; 4"}, "truth_levels"),
        ({"fista_n_h": "1, 10"}, "fista_n_h"),
        ({"fista_n_h": "2.5"}, "fista_n_h"),
        ({"certify": "maybe"}, "certify"),
        ({"problem": "grid_matrix"}, "matrix_file"),
    ],
)
def test_invalid_values_name_the_field(overrides, field):
    raw, base = read_config_file(packaged_config("deconv_paper.cfg"))
    with pytest.raises(ConfigError, match=field):
        build_config(raw, {k: (v, f"--set {k}") for k, v in overrides.items()}, base)


def test_noise_needs_a_seed():
    with pytest.raises(ConfigError, match="noise_seed"):
        build_config({"noise_level": ("0.1", "x")}, {})


def test_json_config(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"beta": 3e-5, "truth_positions": [0.5], "truth_levels": [[0.0], [1.0]]}))
    raw, base = read_config_file(path)
    cfg = build_config(raw, {}, base)
    assert cfg.beta == 3e-5 and cfg.truth_levels == ((0.0,), (1.0,))
    path.write_text(json.dumps({"betta": 1}))
    with pytest.raises(ConfigError, match="betta"):
        read_config_file(path)
    path.write_text("{")
    with pytest.raises(ConfigError, match="invalid JSON"):
        read_config_file(path)


def test_precedence_flags_over_set_over_file(tmp_path):
    cfg_file = tmp_path / "a.cfg"
    cfg_file.write_text("beta = 1e-3\nmax_iter = 7\n")
    args = cli.make_parser().parse_args(
        ["run-deconv", "-c", str(cfg_file), "--set", "beta=2e-3", "--set", "max_iter=9", "--beta", "4e-3"]
    )
    cfg = cli.config_from_args(args)
    assert cfg.beta == 4e-3
    assert cfg.max_iter == 9
    assert cfg.tol_phi == 1e-13


@pytest.mark.parametrize(
    "argv",
    [
        ["run-deconv", "--set", "bogus=1"],
        ["run-deconv", "--set", "noequals"],
        ["run-deconv", "--beta", "0"],
        ["run-deconv", "-c", "missing.cfg"],
        ["run-vector", "-c", "deconv_paper.cfg"],
        ["run-deconv", "-c", "vector_demo.cfg"],
    ],
)
def test_config_errors_exit_2(argv, tmp_path, capsys):
    assert main(argv + ["-o", str(tmp_path)]) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err
    assert not any(tmp_path.iterdir())


def test_noise_is_relative_and_seeded():
    s = np.arange(1.0, 10.0)
    z = noise_vector(9, 5, 0.05, s)
    assert np.linalg.norm(z) == pytest.approx(0.05 * np.linalg.norm(s), rel=1e-14)
    assert np.array_equal(z, noise_vector(9, 5, 0.05, s))
    assert not np.array_equal(z, noise_vector(9, 6, 0.05, s))
    raw = np.random.Generator(np.random.Philox(5)).standard_normal(9)
    assert np.allclose(z / np.linalg.norm(z), raw / np.linalg.norm(raw), rtol=1e-15)
    assert np.array_equal(noise_vector(4, 0, 0.0, s[:4]), np.zeros(4))


def test_truth_staircase():
    cfg = build_config({"truth_positions": ("0.25, 0.5", "x"), "truth_levels": ("1; 3; 2", "x")}, {})
    u = truth_curve(cfg)
    assert np.allclose(u.positions, [0.25, 0.5])
    assert np.allclose(u.magnitudes, [2.0, 1.0])
    assert np.allclose(u.directions[:, 0], [1.0, -1.0])
    assert u.mean[0] == pytest.approx(0.25 * 1 + 0.25 * 3 + 0.5 * 2)


def test_constant_truth_without_noise_gives_no_atoms(tmp_path):
    out = tmp_path / "flat"
    argv = ["run-deconv", "-o", str(out), "--noise-level", "0", "--no-certify",
            "--set", "truth_positions=", "--set", "truth_levels=3e-5"]
    assert main(argv) == EXIT_OK
    sol = json.loads((out / "solution.json").read_text())
    assert curve_from_dict(sol).active_set.atoms == []
    assert json.loads((out / "summary.json").read_text())["status"] == "optimal_exact"


@pytest.fixture(scope="module")
def deconv_out(tmp_path_factory):
    root = tmp_path_factory.mktemp("deconv")
    codes = [main(["run-deconv", "-o", str(root / name)]) for name in ("a", "b")]
    return root, codes


def test_deconv_artifact_set(deconv_out):
    root, codes = deconv_out
    assert codes == [EXIT_OK, EXIT_OK]
    assert files(root / "a") == [
        "metadata.json", "nondegeneracy.json", "optimality.json", "problem.json",
        "rates.json", "reference.json", "solution.json", "summary.json", "trace_pdaj.csv",
    ]
    summary = json.loads((root / "a" / "summary.json").read_text())
    assert summary["status"] == "optimal_phi" and summary["final_active_size"] == 3
    assert json.loads((root / "a" / "optimality.json").read_text())["pass"] is True
    assert len(json.loads((root / "a" / "nondegeneracy.json").read_text())["extrema"]) == 3


def test_reruns_are_byte_identical(deconv_out):
    root, _ = deconv_out
    for name in ("trace_pdaj.csv", "solution.json", "summary.json", "rates.json", "reference.json"):
        assert (root / "a" / name).read_bytes() == (root / "b" / name).read_bytes(), name
    # the recorded config differs only in its output directory
    pa, pb = (json.loads((root / n / "problem.json").read_text()) for n in ("a", "b"))
    pa["config"].pop("output_dir"), pb["config"].pop("output_dir")
    assert pa == pb
    meta = json.loads((root / "a" / "metadata.json").read_text())
    assert {"started", "finished", "versions", "command"} <= set(meta)


def test_csv_uses_17_significant_digits(deconv_out, packaged_run):
    root, _ = deconv_out
    row = (root / "a" / "trace_pdaj.csv").read_text().splitlines()[2].split(",")
    assert float(row[1]) == packaged_run.trace[1].j
    assert row[-1] == ""


def test_solution_round_trip(deconv_out):
    root, _ = deconv_out
    sol = json.loads((root / "a" / "solution.json").read_text())
    problem = json.loads((root / "a" / "problem.json").read_text())
    model = cli.model_from_dict(problem["model"])
    y = model.forward(curve_from_dict(sol))
    assert np.max(np.abs(y - np.asarray(sol["y_final"]))) <= 1e-12
    assert np.allclose(problem["y_d"], np.asarray(problem["y_clean"]) + np.asarray(problem["noise"]), rtol=0, atol=0)


def test_certify_from_problem_file(deconv_out, tmp_path, capsys):
    root, _ = deconv_out
    argv = ["certify", "--problem", str(root / "a" / "problem.json"),
            "--solution", str(root / "a" / "solution.json"), "-o", str(tmp_path)]
    assert main(argv) == EXIT_OK
    assert "first order: pass" in capsys.readouterr().out
    assert files(tmp_path) == ["nondegeneracy.json", "optimality.json"]
    assert (tmp_path / "optimality.json").read_bytes() == (root / "a" / "optimality.json").read_bytes()


def test_certify_flags_a_perturbed_solution(deconv_out, tmp_path, capsys):
    root, _ = deconv_out
    sol = json.loads((root / "a" / "solution.json").read_text())
    curve = curve_from_dict(sol)
    mags = curve.magnitudes.copy()
    mags[0] *= 1.5
    from bvjump.bv_core import BvCurve, curve_to_dict

    bad = BvCurve.from_arrays(curve.positions, curve.directions, mags, curve.mean, curve.horizon)
    (tmp_path / "bad.json").write_text(json.dumps(curve_to_dict(bad)))
    argv = ["certify", "-c", "deconv_paper.cfg", "--solution", str(tmp_path / "bad.json"), "-o", str(tmp_path)]
    assert main(argv) == EXIT_OK
    assert "first order: FAIL" in capsys.readouterr().out
    assert json.loads((tmp_path / "optimality.json").read_text())["pass"] is False


def test_certify_bad_solution_file(tmp_path):
    (tmp_path / "s.json").write_text("{}")
    assert main(["certify", "-c", "deconv_paper.cfg", "--solution", str(tmp_path / "s.json")]) == EXIT_CONFIG


def test_run_vector(tmp_path):
    assert main(["run-vector", "-o", str(tmp_path), "--no-certify"]) == EXIT_OK
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["status"] == "optimal_phi"
    problem = json.loads((tmp_path / "problem.json").read_text())
    assert problem["model"]["dim"] == 2
    sol = json.loads((tmp_path / "solution.json").read_text())
    y = cli.model_from_dict(problem["model"]).forward(curve_from_dict(sol))
    assert np.max(np.abs(y - np.asarray(sol["y_final"]))) <= 1e-12


def test_fista_solver_and_thread_count(tmp_path):
    base = ["run-deconv", "--solver", "fista", "--set", "fista_n_h=10,20,40", "--set", "fista_iterations=50"]
    assert main(base + ["-o", str(tmp_path / "j1"), "--jobs", "1"]) == EXIT_OK
    assert main(base + ["-o", str(tmp_path / "j4"), "--jobs", "4"]) == EXIT_OK
    names = [n for n in files(tmp_path / "j1") if n.endswith(".csv")]
    assert names == ["trace_fista_h0.025.csv", "trace_fista_h0.05.csv", "trace_fista_h0.1.csv"]
    for n in names:
        assert (tmp_path / "j1" / n).read_bytes() == (tmp_path / "j4" / n).read_bytes()
    assert len((tmp_path / "j1" / names[0]).read_text().splitlines()) == 51 + 1


def test_compare_fista_summary(tmp_path):
    assert main(["compare-fista", "-o", str(tmp_path), "--set", "fista_n_h=10,20"]) == EXIT_OK
    assert files(tmp_path) == [
        "compare_summary.json", "metadata.json", "problem.json", "trace_fista_h0.05.csv",
        "trace_fista_h0.1.csv", "trace_pdaj_h0.05.csv", "trace_pdaj_h0.1.csv", "trace_pdaj_h0.csv",
    ]
    summary = json.loads((tmp_path / "compare_summary.json").read_text())
    assert set(summary["pdaj_iterations"]) == {"0", "0.1", "0.05"}
    row = summary["rows"][0]
    assert set(row) == {"solver", "h", "k", "j", "wall_ms"}
    assert {r["solver"] for r in summary["rows"]} == {"pdaj", "fista"}
    assert all(v >= 0 for v in summary["fista_final_residual"].values())


def test_solver_failure_exits_3_and_keeps_outputs(tmp_path, monkeypatch):
    def broken(*args, **kwargs):
        raise SubproblemFailure("forced")

    monkeypatch.setattr(pdaj, "solve_magnitudes", broken)
    assert main(["run-deconv", "-o", str(tmp_path)]) == EXIT_SOLVER
    assert {"problem.json", "trace_pdaj.csv", "summary.json", "metadata.json"} <= set(files(tmp_path))
    assert json.loads((tmp_path / "summary.json").read_text())["status"] == "solver_failure"


def test_record_timings_fills_ms(tmp_path):
    assert main(["run-deconv", "-o", str(tmp_path), "--no-certify", "--record-timings"]) == EXIT_OK
    row = (tmp_path / "trace_pdaj.csv").read_text().splitlines()[1].split(",")
    assert float(row[-1]) >= 0.0


def test_build_problem_dimension_mismatch(tmp_path):
    raw, base = read_config_file(packaged_config("vector_demo.cfg"))
    cfg = build_config(raw, {"truth_levels": ("0; 1; 2; 3", "x")}, base)
    with pytest.raises(ConfigError, match="components"):
        build_problem(cfg)
