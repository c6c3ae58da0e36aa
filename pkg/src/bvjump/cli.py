"""Experiment runner: problem setup with seeded noise, solver dispatch and output files.

Config files are either JSON objects or flat ``key = value`` text::

    # comment
    problem = gaussian_deconv
    sample_points = 0.1, 0.2, 0.3
    truth_positions = 0.25, 0.5
    truth_levels = 0; 1; 0.5        # one level per piece, components split by ','

Command-line flags override file values, which override the defaults.
Exit codes: 0 success, 2 configuration error, 3 solver failure.

Noise is ``level * |K u_true| * z / |z|`` with ``z`` the first ``m`` draws of
``numpy.random.Generator(numpy.random.Philox(seed)).standard_normal``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np
import scipy

from .bv_core import BvCurve, curve_from_dict, curve_to_dict, l1_distance, tv_seminorm
from .diagnostics import check_first_order, check_nondegeneracy, fit_geometric, fit_rate
from .fista import discretize, run_fista
from .forward_models import (
    ForwardModel,
    GaussianDeconvModel,
    GridMatrixModel,
    QuadraticLoss,
    load_matrix_csv,
)
from .pdaj import PdajConfig, RunResult, run, trace_to_csv

log = logging.getLogger("bvjump")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER = 0, 2, 3
PROBLEMS = ("gaussian_deconv", "grid_matrix")
SOLVERS = ("pdaj", "fista", "both")


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field or line."""


def _floats(value, name):
    if isinstance(value, (int, float)):
        return (float(value),)
    if isinstance(value, str):
        parts = [p.strip() for p in value.split(",") if p.strip()]
    else:
        parts = list(value)
    try:
        return tuple(float(p) for p in parts)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: expected a list of numbers, got {value!r}") from None


def _levels(value, name):
    if isinstance(value, str):
        rows = [_floats(r, name) for r in value.split(";") if r.strip()]
    else:
        rows = [_floats(r, name) for r in value]
    if not rows or len({len(r) for r in rows}) != 1:
        raise ConfigError(f"{name}: every level needs the same number of components")
    return tuple(rows)


def _bool(value, name):
    if isinstance(value, bool):
        return value
    s = str(value).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{name}: expected a boolean, got {value!r}")


def _scalar(kind):
    def convert(value, name):
        try:
            return kind(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{name}: expected {kind.__name__}, got {value!r}") from None

    return convert


def _optional_float(value, name):
    if value is None or (isinstance(value, str) and value.strip().lower() in ("", "none")):
        return None
    return _scalar(float)(value, name)


def _ints(value, name):
    vals = _floats(value, name)
    if any(v != int(v) for v in vals):
        raise ConfigError(f"{name}: expected integers, got {value!r}")
    return tuple(int(v) for v in vals)


@dataclass
class ExperimentConfig:
    problem: str = "gaussian_deconv"
    horizon: float = 1.0
    kernel_width: float = 0.05
    sample_points: tuple = tuple(0.1 * i for i in range(1, 10))
    matrix_file: Optional[str] = None
    truth_positions: tuple = ()
    truth_levels: tuple = ((0.0,),)
    beta: float = 1e-5
    noise_level: float = 0.0
    noise_seed: Optional[int] = None
    solver: str = "pdaj"
    tol_phi: float = 1e-13
    max_iter: int = 100
    n_starts: int = 9
    prune_eps: float = 1e-14
    merge_eps: Optional[float] = None
    boundary_eps: Optional[float] = None
    sub_tol: Optional[float] = None
    reference_tol: float = 1e-15
    fista_n_h: tuple = (10, 100, 1000)
    fista_iterations: int = 200
    certify: bool = False
    output_dir: str = "out"
    record_timings: bool = False
    jobs: int = 4
    base_dir: str = field(default=".", repr=False)

    def validate(self):
        if self.problem not in PROBLEMS:
            raise ConfigError(f"problem: must be one of {', '.join(PROBLEMS)}, got {self.problem!r}")
        if self.solver not in SOLVERS:
            raise ConfigError(f"solver: must be one of {', '.join(SOLVERS)}, got {self.solver!r}")
        for name in ("horizon", "beta", "tol_phi", "prune_eps", "reference_tol"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name}: must be positive")
        if self.noise_level < 0:
            raise ConfigError("noise_level: must be nonnegative")
        if self.noise_level > 0 and self.noise_seed is None:
            raise ConfigError("noise_seed: required when noise_level > 0")
        if self.max_iter < 1 or self.fista_iterations < 1:
            raise ConfigError("max_iter/fista_iterations: must be >= 1")
        if any(n < 2 for n in self.fista_n_h):
            raise ConfigError("fista_n_h: every entry must be >= 2")
        if self.jobs < 1:
            raise ConfigError("jobs: must be >= 1")
        pos = np.asarray(self.truth_positions, float)
        if pos.size and (np.any(np.diff(pos) <= 0) or pos[0] <= 0 or pos[-1] >= self.horizon):
            raise ConfigError("truth_positions: must increase strictly inside (0, horizon)")
        if len(self.truth_levels) != pos.size + 1:
            raise ConfigError(
                f"truth_levels: need {pos.size + 1} levels for {pos.size} positions, "
                f"got {len(self.truth_levels)}"
            )
        if self.problem == "gaussian_deconv":
            if not self.kernel_width > 0:
                raise ConfigError("kernel_width: must be positive")
            if not self.sample_points:
                raise ConfigError("sample_points: at least one sample is required")
            if len(self.truth_levels[0]) != 1:
                raise ConfigError("truth_levels: the deconvolution model is scalar")
        else:
            if not self.matrix_file:
                raise ConfigError("matrix_file: required for problem = grid_matrix")
            if not self.matrix_path().is_file():
                raise ConfigError(f"matrix_file: {self.matrix_path()} does not exist")
        return self

    def matrix_path(self) -> Path:
        p = Path(self.matrix_file)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def pdaj_config(self, **overrides) -> PdajConfig:
        kw = dict(
            beta=self.beta,
            tol_phi=self.tol_phi,
            max_iter=self.max_iter,
            n_starts=self.n_starts,
            prune_eps=self.prune_eps,
            merge_eps=self.merge_eps,
            boundary_eps=self.boundary_eps,
            sub_tol=self.sub_tol,
        )
        kw.update(overrides)
        return PdajConfig(**kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d


CONVERTERS = {
    "problem": _scalar(str),
    "horizon": _scalar(float),
    "kernel_width": _scalar(float),
    "sample_points": _floats,
    "matrix_file": _scalar(str),
    "truth_positions": _floats,
    "truth_levels": _levels,
    "beta": _scalar(float),
    "noise_level": _scalar(float),
    "noise_seed": _scalar(int),
    "solver": _scalar(str),
    "tol_phi": _scalar(float),
    "max_iter": _scalar(int),
    "n_starts": _scalar(int),
    "prune_eps": _scalar(float),
    "merge_eps": _optional_float,
    "boundary_eps": _optional_float,
    "sub_tol": _optional_float,
    "reference_tol": _scalar(float),
    "fista_n_h": _ints,
    "fista_iterations": _scalar(int),
    "certify": _bool,
    "output_dir": _scalar(str),
    "record_timings": _bool,
    "jobs": _scalar(int),
}
assert set(CONVERTERS) == {f.name for f in fields(ExperimentConfig)} - {"base_dir"}


def parse_key_values(text: str, source: str = "<config>") -> dict:
    """Parse flat ``key = value`` text; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in CONVERTERS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = (value, f"{source}:{lineno}: {key}")
    return out


def read_config_file(path) -> tuple[dict, str]:
    """Raw values (with diagnostics labels) and the directory of ``path``."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if path.suffix.lower() == ".json":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
        unknown = sorted(set(data) - set(CONVERTERS))
        if unknown:
            raise ConfigError(f"{path}: unknown key(s) {', '.join(unknown)}")
        raw = {k: (v, f"{path}: {k}") for k, v in data.items()}
    else:
        raw = parse_key_values(text, str(path))
    return raw, str(path.parent.resolve())


def build_config(file_values: dict, overrides: dict, base_dir: str = ".") -> ExperimentConfig:
    """Apply converters to file values, then overrides, on top of the defaults."""
    values = {}
    for layer in (file_values, overrides):
        for key, (value, label) in layer.items():
            if key not in CONVERTERS:
                raise ConfigError(f"{label}: unknown key {key!r}")
            values[key] = CONVERTERS[key](value, label)
    return ExperimentConfig(**values, base_dir=base_dir).validate()


def packaged_config(name: str) -> Path:
    return Path(str(resources.files("bvjump") / "configs" / name))


@dataclass
class Problem:
    model: ForwardModel
    loss: QuadraticLoss
    truth: BvCurve
    y_clean: np.ndarray
    noise: np.ndarray


def truth_curve(cfg: ExperimentConfig) -> BvCurve:
    levels = np.asarray(cfg.truth_levels, float)
    pos = np.asarray(cfg.truth_positions, float)
    bounds = np.concatenate([[0.0], pos, [cfg.horizon]])
    mean = (levels * np.diff(bounds)[:, None]).sum(axis=0) / cfg.horizon
    jumps = np.diff(levels, axis=0)
    mags = np.linalg.norm(jumps, axis=1)
    keep = mags > 0
    dirs = jumps[keep] / mags[keep, None] if keep.any() else np.zeros((0, levels.shape[1]))
    return BvCurve.from_arrays(pos[keep], dirs, mags[keep], mean, cfg.horizon)


def build_model(cfg: ExperimentConfig) -> ForwardModel:
    if cfg.problem == "gaussian_deconv":
        return GaussianDeconvModel(cfg.kernel_width, np.asarray(cfg.sample_points), cfg.horizon)
    try:
        matrix, n, d = load_matrix_csv(cfg.matrix_path())
    except ValueError as exc:
        raise ConfigError(f"matrix_file: {exc}") from None
    return GridMatrixModel(matrix, n, d, cfg.horizon)


def noise_vector(m: int, seed: int, level: float, signal: np.ndarray) -> np.ndarray:
    if level == 0:
        return np.zeros(m)
    z = np.random.Generator(np.random.Philox(seed)).standard_normal(m)
    return level * np.linalg.norm(signal) * z / np.linalg.norm(z)


def build_problem(cfg: ExperimentConfig) -> Problem:
    model = build_model(cfg)
    truth = truth_curve(cfg)
    if truth.dim != model.dim:
        raise ConfigError(f"truth_levels: model has {model.dim} components, levels have {truth.dim}")
    y = model.forward(truth)
    zeta = noise_vector(model.n_obs, cfg.noise_seed, cfg.noise_level, y)
    return Problem(model, QuadraticLoss(y + zeta), truth, y, zeta)


def model_to_dict(model: ForwardModel) -> dict:
    if isinstance(model, GaussianDeconvModel):
        return {
            "type": "gaussian_deconv",
            "kernel_width": model.kernel_width,
            "sample_points": [float(x) for x in model.sample_points],
            "horizon": model.horizon,
        }
    return {
        "type": "grid_matrix",
        "grid_n": model.grid_n,
        "dim": model.dim,
        "horizon": model.horizon,
        "matrix": model.matrix.tolist(),
    }


def model_from_dict(data: dict) -> ForwardModel:
    if data["type"] == "gaussian_deconv":
        return GaussianDeconvModel(data["kernel_width"], np.asarray(data["sample_points"]), data["horizon"])
    if data["type"] == "grid_matrix":
        return GridMatrixModel(np.asarray(data["matrix"]), data["grid_n"], data["dim"], data["horizon"])
    raise ConfigError(f"model.type: unknown model {data['type']!r}")


def problem_to_dict(problem: Problem, cfg: ExperimentConfig) -> dict:
    return {
        "model": model_to_dict(problem.model),
        "beta": cfg.beta,
        "truth": curve_to_dict(problem.truth),
        "y_clean": problem.y_clean.tolist(),
        "noise": problem.noise.tolist(),
        "y_d": problem.loss.target.tolist(),
        "noise_level": cfg.noise_level,
        "noise_seed": cfg.noise_seed,
        "config": cfg.to_dict(),
    }


def write_atomic(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path: Path, data):
    write_atomic(path, json.dumps(data, indent=2, sort_keys=True) + "\n")


def _summary(result: RunResult) -> dict:
    last = result.trace[-1] if result.trace else None
    return {
        "status": result.status,
        "iterations": len(result.trace),
        "final_phi": last.phi if last else None,
        "final_active_size": len(result.solution.active_set),
        "j_final": last.j if last else None,
        "message": result.message,
    }


def _h_label(h: float) -> str:
    return format(h, "g")


class Runner:
    """Writes the artifact set for one configuration into ``cfg.output_dir``."""

    def __init__(self, cfg: ExperimentConfig, command: str):
        self.cfg = cfg
        self.command = command
        self.out = Path(cfg.output_dir)
        self.meta = {
            "command": command,
            "started": datetime.now(timezone.utc).isoformat(),
            "versions": {
                "python": platform.python_version(),
                "numpy": np.__version__,
                "scipy": scipy.__version__,
            },
            "timings_ms": {},
        }

    def trace_file(self, name: str, trace):
        write_atomic(self.out / name, trace_to_csv(trace, self.cfg.record_timings))
        self.meta["timings_ms"][name] = [r.ms for r in trace]

    def finish(self):
        self.meta["finished"] = datetime.now(timezone.utc).isoformat()
        write_json(self.out / "metadata.json", self.meta)

    def run_pdaj(self, problem: Problem) -> RunResult:
        cfg = self.cfg
        result = run(problem.model, problem.loss, cfg.pdaj_config(), keep_states=cfg.certify)
        self.trace_file("trace_pdaj.csv", result.trace)
        sol = curve_to_dict(result.solution)
        sol["y_final"] = problem.model.forward(result.solution).tolist()
        write_json(self.out / "solution.json", sol)
        write_json(self.out / "summary.json", _summary(result))
        if cfg.certify and result.status != "solver_failure":
            self.certify(problem, result)
        return result

    def certify(self, problem: Problem, result: RunResult):
        cfg = self.cfg
        model, loss, beta = problem.model, problem.loss, cfg.beta
        fo = check_first_order(result.solution, model, loss, beta)
        nd = check_nondegeneracy(result.solution, model, loss, beta)
        write_json(self.out / "optimality.json", fo.to_dict())
        write_json(self.out / "nondegeneracy.json", nd.to_dict())
        ref = run(model, loss, cfg.pdaj_config(tol_phi=cfg.reference_tol, max_iter=10 * cfg.max_iter))
        j_star = min(ref.trace[-1].j, min(r.j for r in result.trace))
        reference = {
            "j_star": j_star,
            "tol_phi": cfg.reference_tol,
            "status": ref.status,
            "iterations": len(ref.trace),
            "solution": curve_to_dict(ref.solution),
        }
        write_json(self.out / "reference.json", reference)
        rates = {"j_star": j_star}
        if len(result.trace) >= 5:
            fit = fit_rate(
                result.trace, j_star,
                norm_bound=model.measure_norm_bound(), m0=result.initial_jhat / beta,
            )
            errs = [
                l1_distance(s.curve, ref.solution) + abs(tv_seminorm(s.curve) - tv_seminorm(ref.solution))
                for s in result.states
            ]
            rates.update(
                zeta_residual=fit.zeta,
                envelope_pass=fit.envelope_pass,
                envelope_violations=fit.envelope_violations,
                zeta_iterates=fit_geometric(errs)[0],
            )
        write_json(self.out / "rates.json", rates)

    def run_fista_grids(self, problem: Problem):
        cfg = self.cfg

        def one(n_h):
            grid = discretize(problem.model, problem.loss, cfg.beta, n_h)
            return grid, run_fista(grid, cfg.fista_iterations)

        with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
            outs = list(pool.map(one, cfg.fista_n_h))
        for grid, res in outs:
            self.trace_file(f"trace_fista_h{_h_label(grid.h)}.csv", res.trace)
        return outs


def run_experiment(cfg: ExperimentConfig, command: str = "run") -> int:
    """Run the configured solvers and write all outputs; returns the exit code."""
    runner = Runner(cfg, command)
    problem = build_problem(cfg)
    write_json(runner.out / "problem.json", problem_to_dict(problem, cfg))
    code = EXIT_OK
    try:
        if cfg.solver in ("pdaj", "both"):
            result = runner.run_pdaj(problem)
            log.info("pdaj: %s after %d iterations", result.status, len(result.trace))
            if result.status == "solver_failure":
                log.error("solver failure: %s", result.message)
                code = EXIT_SOLVER
        if cfg.solver in ("fista", "both"):
            runner.run_fista_grids(problem)
    finally:
        runner.finish()
    return code


def compare_fista(cfg: ExperimentConfig) -> int:
    """Grid-restricted active jump runs and FISTA on every ``N_h``, plus the
    continuous run; one trace per (solver, h) and a merged summary."""
    runner = Runner(cfg, "compare-fista")
    problem = build_problem(cfg)
    model, loss = problem.model, problem.loss
    write_json(runner.out / "problem.json", problem_to_dict(problem, cfg))

    def grid_task(n_h):
        grid = discretize(model, loss, cfg.beta, n_h)
        nodes = tuple(grid.nodes)
        pdaj = run(model, loss, cfg.pdaj_config(search_mode="grid", grid_nodes=nodes))
        ref = run(
            model, loss,
            cfg.pdaj_config(search_mode="grid", grid_nodes=nodes, tol_phi=cfg.reference_tol,
                            max_iter=10 * cfg.max_iter),
        )
        fista = run_fista(grid, cfg.fista_iterations)
        return grid.h, pdaj, ref, fista

    try:
        with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
            cont_future = pool.submit(run, model, loss, cfg.pdaj_config())
            results = list(pool.map(grid_task, cfg.fista_n_h))
            cont = cont_future.result()

        rows, j_star, iterations, fista_res = [], {}, {}, {}

        def add_rows(solver, h, trace):
            wall = np.cumsum([0.0 if np.isnan(r.ms) else r.ms for r in trace])
            rows.extend(
                {"solver": solver, "h": h, "k": r.k, "j": r.j, "wall_ms": float(w)}
                for r, w in zip(trace, wall)
            )

        runner.trace_file("trace_pdaj_h0.csv", cont.trace)
        add_rows("pdaj", 0.0, cont.trace)
        iterations["0"] = len(cont.trace)
        code = EXIT_SOLVER if cont.status == "solver_failure" else EXIT_OK
        for h, pdaj, ref, fista in results:
            label = _h_label(h)
            runner.trace_file(f"trace_pdaj_h{label}.csv", pdaj.trace)
            runner.trace_file(f"trace_fista_h{label}.csv", fista.trace)
            add_rows("pdaj", h, pdaj.trace)
            add_rows("fista", h, fista.trace)
            js = min(min(r.j for r in ref.trace), min(r.j for r in pdaj.trace), min(r.j for r in fista.trace))
            j_star[label] = js
            iterations[label] = len(pdaj.trace)
            fista_res[label] = fista.trace[-1].j - js
            if "solver_failure" in (pdaj.status, ref.status):
                code = EXIT_SOLVER
        counts = list(iterations[_h_label(h)] for h, *_ in results)
        summary = {
            "rows": rows,
            "j_star": j_star,
            "pdaj_iterations": iterations,
            "pdaj_iteration_ratio": max(counts) / min(counts),
            "fista_final_residual": fista_res,
        }
        write_json(runner.out / "compare_summary.json", summary)
    finally:
        runner.finish()
    return code


def certify_command(args, cfg: Optional[ExperimentConfig]) -> int:
    if args.problem:
        try:
            data = json.loads(Path(args.problem).read_text(encoding="utf-8"))
            model = model_from_dict(data["model"])
            loss = QuadraticLoss(np.asarray(data["y_d"], float))
            beta = float(data["beta"])
        except (OSError, KeyError, ValueError) as exc:
            raise ConfigError(f"problem file {args.problem}: {exc}") from None
    else:
        problem = build_problem(cfg)
        model, loss, beta = problem.model, problem.loss, cfg.beta
    try:
        curve = curve_from_dict(json.loads(Path(args.solution).read_text(encoding="utf-8")))
    except (OSError, KeyError, ValueError) as exc:
        raise ConfigError(f"solution file {args.solution}: {exc}") from None
    out = Path(args.output_dir or (cfg.output_dir if cfg else Path(args.solution).parent))
    fo = check_first_order(curve, model, loss, beta, tol=args.tol)
    nd = check_nondegeneracy(curve, model, loss, beta)
    write_json(out / "optimality.json", fo.to_dict())
    write_json(out / "nondegeneracy.json", nd.to_dict())
    print(f"first order: {'pass' if fo.passed else 'FAIL'}  nondegeneracy: {'pass' if nd.passed else 'FAIL'}"
          f"  extrema: {len(nd.extrema)}")
    return EXIT_OK


FLAG_KEYS = {
    "beta": "beta",
    "noise_level": "noise_level",
    "noise_seed": "noise_seed",
    "tol_phi": "tol_phi",
    "max_iter": "max_iter",
    "solver": "solver",
    "output_dir": "output_dir",
    "jobs": "jobs",
}


def _add_common(p: argparse.ArgumentParser, default_config: Optional[str]):
    p.add_argument("-c", "--config", default=default_config,
                   help="key=value or JSON config file" + (f" (default: packaged {default_config})" if default_config else ""))
    p.add_argument("-o", "--output-dir", dest="output_dir")
    p.add_argument("--beta")
    p.add_argument("--noise-level", dest="noise_level")
    p.add_argument("--noise-seed", dest="noise_seed")
    p.add_argument("--tol-phi", dest="tol_phi")
    p.add_argument("--max-iter", dest="max_iter")
    p.add_argument("--solver", choices=SOLVERS)
    p.add_argument("--jobs")
    p.add_argument("--certify", dest="certify", action="store_const", const="true")
    p.add_argument("--no-certify", dest="certify", action="store_const", const="false")
    p.add_argument("--record-timings", action="store_const", const="true",
                   help="fill the ms column of the trace CSVs (breaks byte-identical reruns)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key; repeatable")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bvjump", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    _add_common(sub.add_parser("run-deconv", help="Gaussian deconvolution experiment"), "deconv_paper.cfg")
    _add_common(sub.add_parser("run-vector", help="vector-valued grid-matrix experiment"), "vector_demo.cfg")
    _add_common(sub.add_parser("compare-fista", help="mesh study: grid runs and FISTA"), "deconv_paper.cfg")
    cert = sub.add_parser("certify", help="first-order and nondegeneracy reports for a solution")
    _add_common(cert, None)
    cert.add_argument("--solution", required=True)
    cert.add_argument("--problem", help="problem.json written by a run (instead of --config)")
    cert.add_argument("--tol", type=float, default=1e-8)
    return parser


def _resolve_config_path(name: str) -> Path:
    p = Path(name)
    if p.exists():
        return p
    packaged = packaged_config(name)
    if packaged.exists():
        return packaged
    raise ConfigError(f"config file {name} not found")


def config_from_args(args) -> ExperimentConfig:
    file_values, base_dir = {}, "."
    if args.config:
        file_values, base_dir = read_config_file(_resolve_config_path(args.config))
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set {item!r}: expected KEY=VALUE")
        key, value = (s.strip() for s in item.split("=", 1))
        overrides[key] = (value, f"--set {key}")
    for attr, key in FLAG_KEYS.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = (value, f"--{attr.replace('_', '-')}")
    if args.certify is not None:
        overrides["certify"] = (args.certify, "--certify")
    if args.record_timings:
        overrides["record_timings"] = ("true", "--record-timings")
    return build_config(file_values, overrides, base_dir)


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "certify":
            cfg = config_from_args(args) if (args.config or not args.problem) else None
            return certify_command(args, cfg)
        cfg = config_from_args(args)
        if args.command == "run-deconv" and cfg.problem != "gaussian_deconv":
            raise ConfigError("problem: run-deconv needs problem = gaussian_deconv")
        if args.command == "run-vector" and cfg.problem != "grid_matrix":
            raise ConfigError("problem: run-vector needs problem = grid_matrix")
        if args.command == "compare-fista":
            return compare_fista(cfg)
        return run_experiment(cfg, args.command)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
