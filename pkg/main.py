# DO NOT EDIT THIS FILE, EDIT USER_CONFIG.PY INSTEAD
# SPDX-License-Identifier: AGPL-3.0-only
from __future__ import annotations

__version__ = "1.0"


try:
    import argparse
    import functools
    import importlib
    import json
    import logging.handlers
    import os
    import platform
    import sys
    import time
    from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

    import numpy as np
    import scipy

    import utils.estimates as estimates
    import utils.hoermander as hoermander
    import utils.kernels as kernels
    import utils.oracle as oracle
    import utils.parametrix as parametrix
    import utils.splitting as splitting
    from utils.DensityGrid import DensityGrid, TensorGrid, describe_grid
    from utils.fields import Box, VectorFieldSet
    from utils.models import MODEL_REGISTRY, build_model, load_model_file
    from utils.utils import (
        HypokernelError,
        get_worker_count,
        json_default,
        print_and_log as _print_and_log,
        print_table,
        write_csv,
    )
except Exception as e:
    print(
        "Error loading some required modules. Make sure you have installed the modules in requirements.txt as documented in the README"
    )
    print(str(e))
    import sys

    sys.exit(1)


# Set default settings for all vars
MODEL: str = "kolmogorov"
MODEL_PARAMS: Dict[str, Dict[str, float]] = {}
MODEL_ORDER: int = 4
MODEL_POINTS: Dict[str, List[float]] = {"kolmogorov": [0.0, 1.0], "weak_lipschitz": [0.0, 1.0]}
OUTPUT_DIR: str = "runs"
WORKERS: int = 1
SEED: int = 0
T: float = 0.5
RANK_MODE: str = "classical"
RANK_CAP: int = 3
RANK_TOL: float = 1e-8
RANK_SAMPLES: int = 1000
RANK_SAMPLER: str = "halton"
GRID_NODES: int = 121
TROTTER_NODES: int = 241
PARAMETRIX_NODES: int = 41
PARAMETRIX_ORDER: int = 2
TIME_PANELS: int = 6
TROTTER_M: int = 64
FLOW_STEPS: int = 4
STRANG: bool = False
WALK_I: int = 1
WALK_J: int = 0
WALK_DELTAS: List[float] = [0.1, 0.03, 0.01, 0.003]
WALK_STEPS: int = 16
MC_STEPS: int = 200
MC_PATHS: int = 100000
MOLLIFICATION_LADDER: List[int] = [2, 4, 8]
LIMIT_TROTTER_M: int = 32
LOG_LEVEL: str = "WARNING"
MAX_LOGFILE_SIZE_IN_MB: int = 10


def verify_config_import(fname: str) -> bool:
    """
    Verify that config or user_config imported correctly
    @param fname: Filename to verify
    """
    if not os.path.isfile(fname + ".py"):
        return False
    try:
        module = importlib.import_module(fname)
    except Exception as e:
        print("Error opening {}.py, using defaults! Error is: {}".format(fname, e))
        return False
    for variable in dir(module):
        if variable.startswith("__"):
            continue
        # Verify all imports are upper-cased
        if str(variable) != variable.upper():
            error = "Error: variable from {} file {} is not uppercased. Make sure all variables you set are uppercased and named the same as the template in config.py".format(
                fname, variable
            )
            print(error)
            sys.exit(1)
    return True


# Import user settings from config
try:
    from config import *
except Exception as e:
    print("Error opening config.py, using defaults! Error is: {}".format(e))
# Import additional user settings from user_config
if verify_config_import("user_config"):
    from user_config import *


# Setup logging
def setup_log():
    log = logging.getLogger()
    global LOG_LEVEL
    global MAX_LOGFILE_SIZE_IN_MB
    if LOG_LEVEL == "NONE":
        log.setLevel(logging.CRITICAL + 10)
        log.addHandler(logging.NullHandler())
    else:
        log.setLevel(os.environ.get("LOGLEVEL", LOG_LEVEL))
        handler = logging.handlers.RotatingFileHandler(
            os.environ.get("LOGFILE", "hypokernel.log"),
            maxBytes=MAX_LOGFILE_SIZE_IN_MB * 1024 * 1024,
            backupCount=1,
        )
        formatter = logging.Formatter(
            fmt="[%(asctime)s] %(levelname)s [%(name)s.%(funcName)s:%(lineno)d] %(message)s"
        )
        handler.setFormatter(formatter)
        log.addHandler(handler)
    return log


log = setup_log()
print_and_log = functools.partial(_print_and_log, log=log)


class ConfigError(HypokernelError):
    pass


# Value converters. Each accepts the text form used on the command line and in
# key = value files, and the typed form found in a manifest config echo.
def to_str(value: Any) -> str:
    return str(value).strip()


def to_int(value: Any) -> int:
    if isinstance(value, bool):
        raise ValueError("expected an integer")
    if isinstance(value, (int, np.integer)):
        return int(value)
    text = str(value).strip()
    return int(text)


def to_float(value: Any) -> float:
    if isinstance(value, bool):
        raise ValueError("expected a number")
    return float(value)


def to_bool(value: Any) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ("1", "true", "yes", "on"):
        return True
    if text in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected true or false, got {}".format(value))


def to_floats(value: Any) -> List[float]:
    if isinstance(value, (list, tuple)):
        return [to_float(v) for v in value]
    return [float(v) for v in str(value).split(",") if v.strip()]


def to_ints(value: Any) -> List[int]:
    if isinstance(value, (list, tuple)):
        return [to_int(v) for v in value]
    return [int(v) for v in str(value).split(",") if v.strip()]


def to_paths(value: Any) -> List[str]:
    if isinstance(value, (list, tuple)):
        return [str(v) for v in value]
    return [v.strip() for v in str(value).split(",") if v.strip()]


def to_params(value: Any) -> Dict[str, float]:
    """'lambda2=2,mu1=1' or a list of 'k=v' items or a dict"""
    if isinstance(value, dict):
        return {str(k): to_float(v) for k, v in value.items()}
    items = value if isinstance(value, (list, tuple)) else str(value).split(",")
    params = {}
    for item in items:
        item = str(item).strip()
        if not item:
            continue
        if "=" not in item:
            raise ValueError("model parameters look like name=value, got {}".format(item))
        key, raw = item.split("=", 1)
        params[key.strip()] = float(raw)
    return params


def to_grid_spec(value: Any) -> str:
    """'lo:hi:n,lo:hi:n', validated and returned as text"""
    text = str(value).strip()
    parse_grid(text)
    return text


def to_box_spec(value: Any) -> str:
    text = str(value).strip()
    parse_box(text)
    return text


def parse_grid(text: str) -> TensorGrid:
    lows, highs, counts = [], [], []
    for axis in text.split(","):
        parts = axis.split(":")
        if len(parts) != 3:
            raise ValueError("grid axes look like lo:hi:n, got {}".format(axis))
        lows.append(float(parts[0]))
        highs.append(float(parts[1]))
        counts.append(int(parts[2]))
    if any(hi <= lo for lo, hi in zip(lows, highs)) or min(counts) < 4:
        raise ValueError("grid axes need lo < hi and at least 4 nodes")
    return TensorGrid.uniform(lows, highs, counts)


def parse_box(text: str) -> Box:
    box = []
    for axis in text.split(","):
        parts = axis.split(":")
        if len(parts) != 2 or not float(parts[0]) < float(parts[1]):
            raise ValueError("box axes look like lo:hi with lo < hi, got {}".format(axis))
        box.append((float(parts[0]), float(parts[1])))
    return tuple(box)


Option = Tuple[Callable[[Any], Any], Callable[[], Any], str]

# dest -> (converter, default, help)
OPTIONS: Dict[str, Option] = {
    "model": (to_str, lambda: MODEL, "model name, one of {} or polynomial".format(", ".join(sorted(MODEL_REGISTRY)))),
    "param": (to_params, lambda: {}, "model parameters, name=value[,name=value]. Overrides MODEL_PARAMS for the model"),
    "model_file": (to_str, lambda: None, "polynomial coefficient table for --model polynomial"),
    "box": (to_box_spec, lambda: None, "model box lo:hi[,lo:hi...]"),
    "model_order": (to_int, lambda: MODEL_ORDER, "derivative order carried by the fields"),
    "x": (to_floats, lambda: None, "start point x1,x2,..."),
    "y": (to_floats, lambda: None, "freeze or terminal point y1,y2,..."),
    "t": (to_float, lambda: T, "time"),
    "s": (to_float, lambda: 0.0, "initial time"),
    "grid": (to_grid_spec, lambda: None, "tensor grid lo:hi:n[,lo:hi:n...]"),
    "nodes": (to_int, lambda: None, "nodes per axis of automatic grids, the command default when unset"),
    "panels": (to_int, lambda: TIME_PANELS, "graded time panels per half interval"),
    "order": (to_int, lambda: PARAMETRIX_ORDER, "parametrix order"),
    "m": (to_int, lambda: TROTTER_M, "Trotter substeps"),
    "strang": (to_bool, lambda: STRANG, "symmetric splitting"),
    "flow_steps": (to_int, lambda: FLOW_STEPS, "Runge-Kutta steps per flow substep"),
    "cap": (to_int, lambda: RANK_CAP, "bracket depth cap"),
    "tol": (to_float, lambda: RANK_TOL, "rank tolerance"),
    "mode": (to_str, lambda: RANK_MODE, "classical or reduced"),
    "samples": (to_int, lambda: RANK_SAMPLES, "sampled points"),
    "sampler": (to_str, lambda: RANK_SAMPLER, "halton or uniform"),
    "seed": (to_int, lambda: SEED, "random seed"),
    "i": (to_int, lambda: WALK_I, "first walk field"),
    "j": (to_int, lambda: WALK_J, "second walk field"),
    "deltas": (to_floats, lambda: list(WALK_DELTAS), "walk edge lengths"),
    "walk_steps": (to_int, lambda: WALK_STEPS, "Runge-Kutta steps per walk leg"),
    "steps": (to_int, lambda: MC_STEPS, "Euler-Maruyama steps"),
    "paths": (to_int, lambda: MC_PATHS, "Euler-Maruyama paths"),
    "samples_csv": (to_bool, lambda: False, "also write the terminal samples"),
    "inputs": (to_paths, lambda: [], "density grid CSV files"),
    "derivative": (to_str, lambda: None, "derivative order j,alpha,beta"),
    "ladder": (to_ints, lambda: list(MOLLIFICATION_LADDER), "mollification indices"),
    "limit_m": (to_int, lambda: LIMIT_TROTTER_M, "Trotter substeps per rung"),
    "slot": (to_str, lambda: "y", "grid variable of the exact kernel, x or y"),
    "smooth_delta": (to_bool, lambda: False, "add the one-cell delta covariance to the exact kernel"),
    "workers": (to_int, lambda: get_worker_count(WORKERS), "worker threads"),
    "out": (to_str, lambda: OUTPUT_DIR, "output directory"),
}

MODEL_OPTIONS = ["model", "param", "model_file", "box", "model_order"]
COMMANDS: Dict[str, Tuple[str, List[str]]] = {
    "rank": ("bracket rank at a point or over sampled points", MODEL_OPTIONS + ["x", "cap", "tol", "mode", "samples", "sampler", "seed", "workers"]),
    "kernel": ("frozen Gaussian on a grid", MODEL_OPTIONS + ["y", "t", "s", "grid", "nodes"]),
    "density": ("parametrix density", MODEL_OPTIONS + ["y", "t", "s", "order", "grid", "nodes", "panels", "workers"]),
    "trotter": ("Trotter product density", MODEL_OPTIONS + ["y", "t", "m", "grid", "nodes", "strang", "flow_steps"]),
    "walk": ("commutator square walk", MODEL_OPTIONS + ["x", "i", "j", "deltas", "walk_steps"]),
    "mc": ("Euler-Maruyama paths and kernel density estimate", MODEL_OPTIONS + ["x", "t", "steps", "paths", "seed", "grid", "nodes", "samples_csv", "workers"]),
    "envelope": ("fit the derivative bound over density grid files", ["inputs", "derivative", "y"]),
    "approx": ("mollification limit check", MODEL_OPTIONS + ["y", "t", "ladder", "limit_m", "grid", "order", "nodes"]),
    "compare": ("sup and total variation distance of two density grids", ["inputs"]),
    "exact": ("exact kernel of a linear model", MODEL_OPTIONS + ["x", "y", "t", "slot", "grid", "nodes", "smooth_delta"]),
}
MANIFEST = "manifest.json"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hypokernel", description="Densities of degenerate diffusions")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for command, (description, dests) in COMMANDS.items():
        cmd = sub.add_parser(command, help=description, description=description)
        cmd.add_argument("--config", dest="config", default=None, help="key = value file or a manifest.json")
        for dest in dests + ["out"]:
            flag = "--" + ("in" if dest == "inputs" else dest.replace("_", "-"))
            converter = OPTIONS[dest][0]
            if converter is to_bool:
                cmd.add_argument(flag, dest=dest, nargs="?", const="true", default=None, help=OPTIONS[dest][2])
            elif dest == "inputs":
                cmd.add_argument(flag, dest=dest, nargs="+", default=None, help=OPTIONS[dest][2])
            elif dest == "param":
                cmd.add_argument(flag, dest=dest, action="append", default=None, help=OPTIONS[dest][2])
            else:
                cmd.add_argument(flag, dest=dest, default=None, help=OPTIONS[dest][2])
    return parser


def read_config_file(path: str) -> Tuple[Optional[str], Dict[str, Any]]:
    """
    Either a manifest written by an earlier run (its config echo is used) or
    flat 'key = value' lines with '#' comments. Keys are the long flag names.
    Returns:
        (command recorded in a manifest or None, raw values)
    """
    try:
        with open(path, "r") as f:
            text = f.read()
    except OSError as e:
        raise ConfigError("cannot read config file {}: {}".format(path, e))
    if text.lstrip().startswith("{"):
        try:
            data = json.loads(text)
        except ValueError as e:
            raise ConfigError("config file {} is not valid JSON: {}".format(path, e))
        values = dict(data.get("config", {}))
        values.pop("config", None)
        return data.get("command"), values
    values: Dict[str, Any] = {}
    for line_number, line in enumerate(text.splitlines(), start=1):
        content = line.split("#", 1)[0].strip()
        if not content:
            continue
        if "=" not in content:
            raise ConfigError("line {} of {} is not 'key = value'".format(line_number, path))
        key, value = content.split("=", 1)
        key = key.strip().replace("-", "_")
        values["inputs" if key == "in" else key] = value.strip()
    return None, values


def resolve_config(command: str, args: argparse.Namespace) -> Dict[str, Any]:
    """
    Defaults (config.py, user_config.py) < config file < flags. Every value
    goes through its converter; the first failure names its key.
    Raises:
        ConfigError: unknown key or invalid value
    """
    dests = COMMANDS[command][1] + ["out"]
    file_values: Dict[str, Any] = {}
    if args.config:
        recorded, file_values = read_config_file(args.config)
        if recorded is not None and recorded != command:
            raise ConfigError("config file {} belongs to command {}, not {}".format(args.config, recorded, command))
        for key in file_values:
            if key not in dests:
                raise ConfigError("unknown config key {} for command {}".format(key, command))
    config: Dict[str, Any] = {}
    for dest in dests:
        converter, default, _ = OPTIONS[dest]
        flag_value = getattr(args, dest, None)
        if flag_value is not None:
            raw = flag_value
        elif dest in file_values:
            raw = file_values[dest]
        else:
            config[dest] = default()
            continue
        if raw is None:
            config[dest] = None
            continue
        try:
            config[dest] = converter(raw)
        except (TypeError, ValueError) as e:
            raise ConfigError("invalid value for {}: {} ({})".format(dest, raw, e))
    return config


def require(condition: bool, key: str, message: str) -> None:
    if not condition:
        raise ConfigError("invalid value for {}: {}".format(key, message))


def load_model(config: Dict[str, Any]) -> VectorFieldSet:
    box = parse_box(config["box"]) if config.get("box") else None
    if config["model"] == "polynomial":
        require(bool(config.get("model_file")), "model_file", "polynomial models need --model-file")
        require(box is not None, "box", "polynomial models need --box")
        return load_model_file(config["model_file"], box, order=config["model_order"])
    require(config["model"] in MODEL_REGISTRY, "model", "unknown model {}".format(config["model"]))
    params = dict(MODEL_PARAMS.get(config["model"], {}))
    params.update(config["param"])
    try:
        return build_model(config["model"], params, box=box, order=config["model_order"])
    except HypokernelError as e:
        raise ConfigError("invalid value for param: {}".format(e))


def model_point(config: Dict[str, Any], key: str, fields: VectorFieldSet) -> np.ndarray:
    point = config.get(key)
    if point is None:
        point = MODEL_POINTS.get(fields.name, [0.0] * fields.dim)
    require(len(point) == fields.dim, key, "point has {} coordinates, model has {}".format(len(point), fields.dim))
    return np.asarray(point, dtype=float)


def config_grid(config: Dict[str, Any], dim: int) -> Optional[TensorGrid]:
    if not config.get("grid"):
        return None
    grid = parse_grid(config["grid"])
    require(grid.dim == dim, "grid", "grid has {} axes, model has {}".format(grid.dim, dim))
    return grid


def node_count(config: Dict[str, Any], default: int) -> int:
    nodes = config.get("nodes")
    if nodes is None:
        return default
    require(nodes >= 4, "nodes", "need at least 4 nodes per axis")
    return nodes


def check_time(config: Dict[str, Any]) -> None:
    require(config["t"] > config.get("s", 0.0), "t", "t must exceed s")


def write_json(path: str, payload: Any) -> None:
    with open(path, "w") as f:
        json.dump(payload, f, default=json_default, sort_keys=True, indent=2)


def write_density(out: str, name: str, density: DensityGrid) -> str:
    path = os.path.join(out, name)
    density.to_csv(path)
    return path


Result = Tuple[Dict[str, Any], Dict[str, bool], List[str]]


def run_rank(config: Dict[str, Any], out: str) -> Result:
    fields = load_model(config)
    require(config["mode"] in hoermander.MODES, "mode", "expected one of {}".format(hoermander.MODES))
    if config.get("x") is not None:
        x = model_point(config, "x", fields)
        basis = hoermander.rank_recursion(fields, x, mode=config["mode"], cap=config["cap"], tol=config["tol"])
        path = os.path.join(out, "rank.csv")
        write_csv(path, ["depth", "rank"], sorted(hoermander.rank_profile(basis).items()))
        print_and_log("Full rank depth at {}: {}".format(x.tolist(), basis.full_rank_depth), "INFO")
        return {"basis": basis.to_dict()}, {"full_rank": basis.full_rank}, [path]
    report = hoermander.weak_condition_probe(
        fields,
        samples=config["samples"],
        cap=config["cap"],
        tol=config["tol"],
        mode=config["mode"],
        sampler=config["sampler"],
        seed=config["seed"],
        workers=config["workers"],
    )
    rows = [{"depth": depth, "points": count} for depth, count in report.histogram.items()]
    print(print_table(rows))
    path = os.path.join(out, "rank.csv")
    write_csv(path, ["depth", "points"], [[r["depth"], r["points"]] for r in rows])
    return {"condition": report.to_dict()}, {"full_rank_everywhere": report.fraction == 1.0}, [path]


def run_kernel(config: Dict[str, Any], out: str) -> Result:
    fields = load_model(config)
    check_time(config)
    y = model_point(config, "y", fields)
    gaussian = kernels.frozen_gaussian(kernels.assemble_diffusion(fields), y)
    grid = config_grid(config, fields.dim)
    if grid is None:
        grid = kernels.default_kernel_grid(gaussian, config["t"], config["s"], node_count(config, GRID_NODES))
    density = kernels.frozen_gaussian_grid(gaussian, grid, config["t"], config["s"])
    path = write_density(out, "kernel.csv", density)
    mass = density.mass()
    return {"density": density.summary(), "gaussian": gaussian.to_dict()}, {"mass": abs(mass - 1.0) <= 1e-6}, [path]


def run_density(config: Dict[str, Any], out: str) -> Result:
    fields = load_model(config)
    check_time(config)
    require(config["order"] >= 0, "order", "must be non-negative")
    y = model_point(config, "y", fields)
    grid = config_grid(config, fields.dim)
    if grid is None:
        grid = parametrix.default_grid(
            kernels.assemble_diffusion(fields), y, config["t"], config["s"], node_count(config, PARAMETRIX_NODES)
        )
    dt = 1e-3 * (config["t"] - config["s"])
    family = [
        parametrix.density_approx(
            fields,
            y,
            tau,
            order=config["order"],
            grid=grid,
            s=config["s"],
            panels=config["panels"],
            workers=config["workers"],
        )
        for tau in (config["t"] - dt, config["t"], config["t"] + dt)
    ]
    density = family[1]
    residual = parametrix.fd_residual(family, fields)
    density.diagnostics["residual_sup"] = residual["sup"]
    path = write_density(out, "density.csv", density)
    checks = {"nonnegative": not density.diagnostics["negative"]}
    return {"density": density.summary(), "residual_sup": residual["sup"]}, checks, [path]


def run_trotter(config: Dict[str, Any], out: str) -> Result:
    fields = load_model(config)
    check_time(config)
    require(config["m"] >= 1, "m", "must be at least 1")
    y = model_point(config, "y", fields)
    grid = config_grid(config, fields.dim)
    if grid is None:
        nodes = node_count(config, TROTTER_NODES)
        grid = splitting.default_trotter_grid(kernels.assemble_diffusion(fields), fields, y, config["t"], nodes)
    density = splitting.trotter_density(
        fields, y, config["t"], config["m"], grid=grid, strang=config["strang"], flow_steps=config["flow_steps"]
    )
    path = write_density(out, "trotter.csv", density)
    print_and_log("Trotter density on {}: mass {:.6f}".format(describe_grid(grid), density.mass()), "INFO")
    checks = {
        "mass": 0.98 <= density.mass() <= 1.01,
        "positive": density.diagnostics["raw_min"] >= -1e-8,
        "finite_curvature": density.diagnostics["finite_curvature"],
    }
    return {"density": density.summary()}, checks, [path]


def run_walk(config: Dict[str, Any], out: str) -> Result:
    fields = load_model(config)
    x = model_point(config, "x", fields)
    for key in ("i", "j"):
        require(0 <= config[key] <= fields.m, key, "field index out of range")
    study = splitting.walk_study(fields, config["i"], config["j"], x, config["deltas"], config["walk_steps"])
    n = fields.dim
    header = ["delta"] + ["estimate{}".format(k + 1) for k in range(n)] + ["bracket{}".format(k + 1) for k in range(n)] + ["error"]
    rows = [[w.delta] + [float(v) for v in w.estimate] + [float(v) for v in w.bracket] + [w.error] for w in study["walks"]]
    path = os.path.join(out, "walk.csv")
    write_csv(path, header, rows)
    slope = study["slope"]
    checks = {"order": slope is None or 0.8 <= slope <= 1.5}
    return {"slope": slope, "max_error": study["max_error"]}, checks, [path]


def sample_grid(samples: np.ndarray, nodes: int) -> TensorGrid:
    center = samples.mean(axis=0)
    half = np.maximum(6.0 * samples.std(axis=0), 1e-3)
    return TensorGrid.centered(center, half, [nodes] * samples.shape[1])


def run_mc(config: Dict[str, Any], out: str) -> Result:
    fields = load_model(config)
    check_time(config)
    x = model_point(config, "x", fields)
    spec = oracle.SdeSpec(fields=fields, x=x, t=config["t"], steps=config["steps"], paths=config["paths"], seed=config["seed"])
    result = oracle.euler_maruyama(spec, workers=config["workers"])
    moments = oracle.moment_summary(result.samples)
    grid = config_grid(config, fields.dim)
    if grid is None:
        grid = sample_grid(result.samples, node_count(config, GRID_NODES))
    kde = oracle.kde_density(result.samples, grid, t=config["t"], point=x)
    outputs = [write_density(out, "mc.csv", kde.density)]
    if config["samples_csv"]:
        path = os.path.join(out, "samples.csv")
        write_csv(path, ["x{}".format(k + 1) for k in range(fields.dim)], result.samples.tolist())
        outputs.append(path)
    moments_path = os.path.join(out, "moments.json")
    write_json(moments_path, moments.to_dict())
    outputs.append(moments_path)
    diagnostics: Dict[str, Any] = {"excluded": result.excluded, "moments": moments.to_dict(), "density": kde.density.summary()}
    checks = {"kde_mass": 0.97 <= kde.density.mass() <= 1.01}
    if fields.linear_drift is not None:
        kernel = oracle.kernel_for_model(fields, config["t"])
        em_mean, em_cov = oracle.euler_maruyama_moments(kernel.B, kernel.a, x, config["t"], config["steps"])
        mean_gap = np.abs(moments.mean - kernel.mean(x))
        cov_gap = np.abs(moments.covariance - kernel.covariance)
        mean_bias = np.abs(em_mean - kernel.mean(x))
        cov_bias = np.abs(em_cov - kernel.covariance)
        checks["mean"] = bool(np.all(mean_gap <= 3.0 * moments.mean_se + mean_bias + 1e-12))
        checks["covariance"] = bool(np.all(cov_gap <= 3.0 * moments.covariance_se + cov_bias + 1e-12))
        exact = kernel.density(grid, "y", x)
        diagnostics["tv_exact"] = oracle.tv_distance(kde.density, exact)
        checks["tv_exact"] = diagnostics["tv_exact"] <= 0.05
    return diagnostics, checks, outputs


def run_envelope(config: Dict[str, Any], out: str) -> Result:
    require(len(config["inputs"]) >= 2, "inputs", "need at least two density grid files")
    require(config.get("y") is not None, "y", "give the base point of the grids")
    levels = [DensityGrid.from_csv(path, point=config["y"]) for path in config["inputs"]]
    dim = levels[0].grid.dim
    text = config.get("derivative") or "0,{},{}".format("+".join(["0"] * dim), "+".join(["0"] * dim))
    try:
        order = estimates.parse_order(text, dim)
    except (HypokernelError, ValueError) as e:
        raise ConfigError("invalid value for derivative: {}".format(e))
    derived = [estimates.derivative_grid(p, order) for p in levels]
    fit = estimates.fit_envelope(derived, order)
    path = os.path.join(out, "envelope.json")
    write_json(path, fit.to_dict())
    return {"fit": fit.to_dict()}, {"envelope": fit.passed}, [path]


def run_approx(config: Dict[str, Any], out: str) -> Result:
    fields = load_model(config)
    check_time(config)
    require(len(config["ladder"]) >= 2, "ladder", "need at least two mollification indices")
    y = model_point(config, "y", fields)
    report = estimates.density_limit_check(
        fields,
        config["t"],
        y,
        ladder=config["ladder"],
        grid=config_grid(config, fields.dim),
        trotter_m=config["limit_m"],
        order=config["order"],
        nodes=node_count(config, PARAMETRIX_NODES),
    )
    outputs = [write_density(out, "approx-{}.csv".format(m), p) for m, p in zip(report.ladder, report.densities)]
    path = os.path.join(out, "approx.json")
    write_json(path, report.to_dict())
    outputs.append(path)
    checks = {"cauchy": report.cauchy, "residual_decreasing": report.residual_decreasing}
    return {"limit": report.to_dict()}, checks, outputs


def run_compare(config: Dict[str, Any], out: str) -> Result:
    require(len(config["inputs"]) == 2, "inputs", "compare needs exactly two density grid files")
    p, q = [DensityGrid.from_csv(path) for path in config["inputs"]]
    distances = {"sup": oracle.sup_distance(p, q), "tv": oracle.tv_distance(p, q)}
    print(print_table([distances]))
    path = os.path.join(out, "compare.json")
    write_json(path, distances)
    return {"distances": distances, "inputs": config["inputs"]}, {}, [path]


def exact_grid(kernel: oracle.ExactLinearKernel, slot: str, point: np.ndarray, nodes: int) -> TensorGrid:
    if slot == "y":
        center = kernel.mean(point)
        covariance = kernel.covariance
    else:
        inverse = np.linalg.inv(kernel.propagator)
        center = inverse @ point
        covariance = inverse @ kernel.covariance @ inverse.T
    half = 6.0 * np.sqrt(np.maximum(np.diag(covariance), 1e-12))
    return TensorGrid.centered(center, half, [nodes] * point.size)


def run_exact(config: Dict[str, Any], out: str) -> Result:
    fields = load_model(config)
    check_time(config)
    require(config["slot"] in ("x", "y"), "slot", "expected x or y")
    point = model_point(config, "y" if config["slot"] == "x" else "x", fields)
    kernel = oracle.kernel_for_model(fields, config["t"])
    grid = config_grid(config, fields.dim)
    if grid is None:
        grid = exact_grid(kernel, config["slot"], point, node_count(config, GRID_NODES))
    smoothing = np.diag(grid.spacing**2) if config["smooth_delta"] else None
    density = kernel.density(grid, config["slot"], point, smoothing=smoothing)
    path = write_density(out, "exact.csv", density)
    return {"kernel": kernel.to_dict(), "density": density.summary()}, {"determinant": kernel.determinant() > 0}, [path]


HANDLERS: Dict[str, Callable[[Dict[str, Any], str], Result]] = {
    "rank": run_rank,
    "kernel": run_kernel,
    "density": run_density,
    "trotter": run_trotter,
    "walk": run_walk,
    "mc": run_mc,
    "envelope": run_envelope,
    "approx": run_approx,
    "compare": run_compare,
    "exact": run_exact,
}


def dispatch(command: str, config: Dict[str, Any]) -> int:
    """
    Run one subcommand and write its manifest. Returns the exit status:
    0 on success, 1 when a module raised.
    """
    out = config["out"]
    os.makedirs(out, exist_ok=True)
    manifest: Dict[str, Any] = {
        "command": command,
        "config": config,
        "versions": {
            "hypokernel": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
    }
    start = time.perf_counter()
    status = 0
    try:
        diagnostics, checks, outputs = HANDLERS[command](config, out)
        manifest.update({"status": "ok", "diagnostics": diagnostics, "checks": checks, "outputs": outputs})
        failed = [name for name, passed in checks.items() if not passed]
        if failed:
            print_and_log("{} finished, failed checks: {}".format(command, ", ".join(failed)), "WARNING")
    except ConfigError:
        raise
    except Exception as e:
        log.exception("%s failed", command)
        print_and_log("Error running {}: {}".format(command, e), "ERROR")
        manifest.update({"status": "error", "error": "{}: {}".format(type(e).__name__, e)})
        status = 1
    manifest["wall_time"] = time.perf_counter() - start
    write_json(os.path.join(out, MANIFEST), manifest)
    return status


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    log.debug("Python version {}".format(platform.python_version()))
    try:
        config = resolve_config(args.command, args)
        return dispatch(args.command, config)
    except ConfigError as e:
        print_and_log(str(e), "ERROR")
        return 2


if __name__ == "__main__":
    sys.exit(main())
