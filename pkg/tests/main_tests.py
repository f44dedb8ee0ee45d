import json
import os
import sys

import numpy as np
import pytest

sys.path.append(os.getcwd() + "/..")

import main
from utils.DensityGrid import DensityGrid


def _manifest(out):
    with open(os.path.join(out, main.MANIFEST)) as f:
        return json.load(f)


def test_global_vars():
    """
    Test to verify various important global vars exist and have sane settings
    @return:
    """
    assert isinstance(main.MODEL, str)
    assert isinstance(main.MODEL_POINTS, dict)
    assert main.PARAMETRIX_NODES >= 4
    assert main.GRID_NODES >= 4
    assert main.TROTTER_NODES >= main.GRID_NODES
    for model, params in main.MODEL_PARAMS.items():
        assert model in main.MODEL_REGISTRY
        main.build_model(model, params)
    assert main.LOG_LEVEL in ("DEBUG", "INFO", "WARNING", "ERROR", "NONE")
    for command, (_, dests) in main.COMMANDS.items():
        assert command in main.HANDLERS
        for dest in dests:
            assert dest in main.OPTIONS


def test_converters():
    assert main.to_bool("yes") and not main.to_bool("0")
    with pytest.raises(ValueError):
        main.to_bool("maybe")
    with pytest.raises(ValueError):
        main.to_int(True)
    assert main.to_floats("0.5, 1") == [0.5, 1.0]
    assert main.to_ints([2, 4]) == [2, 4]
    assert main.to_params(["lambda2=2", "mu1=3"]) == {"lambda2": 2.0, "mu1": 3.0}
    assert main.to_params("lambda2=2") == {"lambda2": 2.0}
    with pytest.raises(ValueError):
        main.to_params("lambda2")


def test_parse_grid_and_box():
    grid = main.parse_grid("-1:1:5,0:2:9")
    assert grid.shape == (5, 9)
    assert np.allclose(grid.spacing, [0.5, 0.25])
    for bad in ("-1:1", "1:-1:5", "-1:1:3"):
        with pytest.raises(ValueError):
            main.parse_grid(bad)
    assert main.parse_box("-1:1,0:2") == ((-1.0, 1.0), (0.0, 2.0))
    with pytest.raises(ValueError):
        main.parse_box("1:0")


def test_resolve_config_precedence(tmp_path):
    config_file = tmp_path / "run.cfg"
    config_file.write_text("# trotter settings\nt = 0.3\nm = 8\nstrang = true\n")
    args = main.build_parser().parse_args(["trotter", "--config", str(config_file), "--m", "4"])
    config = main.resolve_config("trotter", args)
    assert config["t"] == 0.3
    assert config["m"] == 4
    assert config["strang"] is True
    assert config["flow_steps"] == main.FLOW_STEPS
    assert config["nodes"] is None


def test_resolve_config_errors(tmp_path):
    unknown = tmp_path / "unknown.cfg"
    unknown.write_text("paths = 10\n")
    args = main.build_parser().parse_args(["trotter", "--config", str(unknown)])
    with pytest.raises(main.ConfigError):
        main.resolve_config("trotter", args)
    broken = tmp_path / "broken.cfg"
    broken.write_text("just words\n")
    with pytest.raises(main.ConfigError):
        main.read_config_file(str(broken))
    with pytest.raises(main.ConfigError):
        main.read_config_file(str(tmp_path / "missing.cfg"))


def test_config_errors_exit_two(tmp_path):
    out = str(tmp_path / "out")
    assert main.main(["trotter", "--m", "abc", "--out", out]) == 2
    assert main.main(["trotter", "--m", "0", "--out", out]) == 2
    assert main.main(["kernel", "--t", "0", "--out", out]) == 2
    assert main.main(["walk", "--model", "grushin", "--i", "7", "--out", out]) == 2
    assert main.main(["rank", "--model", "polynomial", "--out", out]) == 2
    assert main.main(["envelope", "--in", "a.csv", "--out", out]) == 2
    assert main.main(["exact", "--model", "kolmogorov", "--x", "1,2,3", "--out", out]) == 2
    assert main.main(["rank", "--model", "grushin", "--param", "lambda2=2", "--out", out]) == 2
    assert main.main(["rank", "--model", "kolmogorov", "--param", "kappa=1", "--out", out]) == 2


def test_walk_command(tmp_path):
    out = str(tmp_path)
    assert main.main(["walk", "--model", "grushin", "--i", "2", "--j", "1", "--x", "0.3,0.2", "--out", out]) == 0
    manifest = _manifest(out)
    assert manifest["status"] == "ok"
    assert manifest["command"] == "walk"
    assert manifest["checks"]["order"]
    assert manifest["diagnostics"]["slope"] is None
    assert os.path.isfile(os.path.join(out, "walk.csv"))
    assert manifest["versions"]["hypokernel"] == main.__version__


def test_rank_command(tmp_path):
    out = str(tmp_path)
    assert main.main(["rank", "--model", "kolmogorov", "--x", "0,1", "--out", out]) == 0
    manifest = _manifest(out)
    assert manifest["checks"]["full_rank"]
    assert manifest["diagnostics"]["basis"]["full_rank_depth"] == 1


def test_module_failure_exits_one(tmp_path):
    out = str(tmp_path)
    assert main.main(["trotter", "--model", "kolmogorov", "--y", "0,0", "--m", "4", "--out", out]) == 1
    manifest = _manifest(out)
    assert manifest["status"] == "error"
    assert "WitnessError" in manifest["error"]


def test_exact_compare_and_replay(tmp_path):
    first = str(tmp_path / "first")
    assert main.main(["exact", "--model", "kolmogorov", "--nodes", "31", "--out", first]) == 0
    manifest = _manifest(first)
    assert manifest["checks"]["determinant"]
    exact_csv = os.path.join(first, "exact.csv")
    density = DensityGrid.from_csv(exact_csv)
    assert density.slot == "y"
    assert density.grid.shape == (31, 31)
    assert abs(density.mass() - 1.0) < 1e-2

    compared = str(tmp_path / "compare")
    assert main.main(["compare", "--in", exact_csv, exact_csv, "--out", compared]) == 0
    assert _manifest(compared)["diagnostics"]["distances"] == {"sup": 0.0, "tv": 0.0}

    replay = str(tmp_path / "replay")
    assert main.main(["exact", "--config", os.path.join(first, main.MANIFEST), "--out", replay]) == 0
    with open(exact_csv) as a, open(os.path.join(replay, "exact.csv")) as b:
        assert a.read() == b.read()
    # a manifest only replays its own command
    assert main.main(["walk", "--config", os.path.join(first, main.MANIFEST), "--out", replay]) == 2


def test_envelope_command(tmp_path):
    inputs = []
    for t in ("0.2", "0.4"):
        out = str(tmp_path / t)
        assert main.main(["exact", "--model", "elliptic_ou", "--t", t, "--nodes", "41", "--out", out]) == 0
        inputs.append(os.path.join(out, "exact.csv"))
    out = str(tmp_path / "envelope")
    assert main.main(["envelope", "--in"] + inputs + ["--y", "0,0", "--out", out]) == 0
    fit = _manifest(out)["diagnostics"]["fit"]
    assert fit["order"] == "0,0+0,0+0"
    assert fit["passed"]
    assert fit["n_fit"] == pytest.approx(1.0)
    assert main.main(["envelope", "--in"] + inputs + ["--y", "0,0", "--derivative", "0,1,0", "--out", out]) == 2
