"""Command-line interface: ``mvcm <command> [options]``."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from . import io
from .coefficients import estimate_coefficients, fit_auto
from .fpca import run_fpca
from .inference import all_bands, wild_bootstrap_test
from .kernels import get_kernel
from .simulation import (SimulationDesign, generate_dataset, power_long_format, run_coverage_study,
                         run_power_study)
from .smoothing import smooth_auto, smooth_individuals

logger = logging.getLogger("mvcm")

PIPELINE_COMMANDS = ("fit", "smooth", "fpca", "test", "band")
STAGE_OUTPUTS = {
    "fit": ["estimates.json"],
    "smooth": ["estimates.json", "eta.csv"],
    "fpca": ["estimates.json", "eta.csv", "fpca.json", "fpca.csv"],
    "test": ["estimates.json", "eta.csv", "fpca.json", "fpca.csv", "test.json"],
    "band": ["estimates.json", "bands.csv"],
}


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass
class RunConfig:
    """Flat run configuration; loaded from a JSON object and overridden by flags."""

    responses: str | None = None
    covariates: str | None = None
    out: str = "mvcm-out"
    kernel: str = "epanechnikov"
    h1: str | float = "auto"
    h2: str | float = "auto"
    eval_points: int | None = None
    seed: int = 0
    g_reps: int = 500
    alpha: list = field(default_factory=lambda: [0.05])
    hypothesis: str | None = None
    multipliers: str = "curve"
    n_components: int | None = None
    energy: float = 0.99
    # simulation
    reps: int = 100
    n: int = 200
    M: int = 50
    c: float = 0.0
    c_values: list = field(default_factory=lambda: [0.0, 0.1, 0.2, 0.3, 0.4])
    n_values: list = field(default_factory=lambda: [100, 200])
    M_values: list = field(default_factory=lambda: [25, 50, 75])
    grid: str = "uniform"
    n_jobs: int = 1
    config: str | None = None

    def validate(self, command: str) -> None:
        get_kernel(self.kernel)
        for name in ("h1", "h2"):
            v = getattr(self, name)
            if v != "auto":
                hs = np.atleast_1d(np.asarray(v, dtype=float))
                if not np.all(hs > 0):
                    raise ValueError(f"{name} must be 'auto' or positive, got {v}")
        if self.g_reps < 1:
            raise ValueError("g-reps must be positive")
        if not all(0.0 < a < 1.0 for a in self.alpha):
            raise ValueError(f"alpha values must be in (0, 1), got {self.alpha}")
        if self.eval_points is not None and self.eval_points < 2:
            raise ValueError("eval-points must be at least 2")
        if not 0.0 < self.energy <= 1.0:
            raise ValueError("energy must be in (0, 1]")
        if self.n_components is not None and self.n_components < 1:
            raise ValueError("n-components must be positive")
        if command in PIPELINE_COMMANDS + ("ingest",) and not (self.responses and self.covariates):
            raise ValueError("--responses and --covariates are required")
        if command == "test" and not self.hypothesis:
            raise ValueError("--hypothesis is required for 'test'")
        if command.startswith("simulate") and self.reps < 1:
            raise ValueError("reps must be positive")
        if self.multipliers not in ("curve", "split"):
            raise ValueError(f"multipliers must be 'curve' or 'split', got {self.multipliers!r}")
        if self.n_jobs < 1:
            raise ValueError("n-jobs must be positive")

    def payload(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.payload(), sort_keys=True).encode()).hexdigest()


def _floats(text: str) -> list:
    return [float(v) for v in str(text).split(",") if v.strip()]


def _ints(text: str) -> list:
    return [int(v) for v in str(text).split(",") if v.strip()]


def _bandwidth(text: str):
    if text == "auto":
        return "auto"
    vals = _floats(text)
    return vals[0] if len(vals) == 1 else vals


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of settings (flags override it)")
    common.add_argument("--responses", help="long-format responses CSV")
    common.add_argument("--covariates", help="covariates CSV")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--kernel", choices=["epanechnikov", "biweight", "triangular"])
    common.add_argument("--g-reps", dest="g_reps", type=int, help="bootstrap replications G")
    common.add_argument("--alpha", type=_floats, help="level(s), comma separated")
    common.add_argument("--h1", type=_bandwidth, help="coefficient bandwidth(s) or 'auto'")
    common.add_argument("--h2", type=_bandwidth, help="curve-smoothing bandwidth(s) or 'auto'")
    common.add_argument("--eval-points", dest="eval_points", type=int,
                        help="equispaced evaluation points on [0,1] (default: data grid)")
    common.add_argument("--hypothesis", help="JSON hypothesis file with C and b0")
    common.add_argument("--multipliers", choices=["curve", "split"],
                        help="bootstrap multipliers per curve, or per curve and grid point")
    common.add_argument("--n-components", dest="n_components", type=int)
    common.add_argument("--energy", type=float)
    common.add_argument("--reps", type=int)
    common.add_argument("--n", type=int)
    common.add_argument("--M", type=int)
    common.add_argument("--c", type=float)
    common.add_argument("--c-values", dest="c_values", type=_floats)
    common.add_argument("--n-values", dest="n_values", type=_ints)
    common.add_argument("--M-values", dest="M_values", type=_ints)
    common.add_argument("--grid", choices=["uniform", "equispaced"])
    common.add_argument("--n-jobs", dest="n_jobs", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="mvcm", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "ingest": "validate input CSVs and write a dataset summary",
        "generate": "write a synthetic dataset from the bivariate simulation design",
        "fit": "estimate coefficient functions",
        "smooth": "fit, then smooth individual curves",
        "fpca": "fit, smooth, then functional PCA",
        "test": "full pipeline plus the wild bootstrap global test",
        "band": "fit plus simultaneous confidence bands",
        "simulate-power": "Monte Carlo rejection rates of the global test",
        "simulate-coverage": "Monte Carlo coverage of the confidence bands",
    }
    for name, text in helps.items():
        sub.add_parser(name, parents=[common], help=text)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    names = {f.name for f in fields(RunConfig)}
    if args.config:
        raw = json.loads(Path(args.config).read_text())
        if not isinstance(raw, dict):
            raise ValueError("config file must hold a JSON object")
        for key, value in raw.items():
            key = key.replace("-", "_")
            if key not in names:
                raise ValueError(f"unknown config key {key!r}")
            setattr(cfg, key, value)
    for key in names:
        value = getattr(args, key, None)
        if value is not None:
            setattr(cfg, key, value)
    if not isinstance(cfg.alpha, list):
        cfg.alpha = [float(cfg.alpha)]
    return cfg


class OutputDir:
    """Tracks written files and records them in ``manifest.json``."""

    def __init__(self, cfg: RunConfig, command: str):
        self.root = Path(cfg.out)
        self.root.mkdir(parents=True, exist_ok=True)
        self.cfg = cfg
        self.command = command
        self.files: list = []

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.root / name

    def manifest(self, status: str, error: str | None = None, extra: dict | None = None) -> None:
        inputs = {}
        for key in ("responses", "covariates", "hypothesis", "config"):
            p = getattr(self.cfg, key, None)
            if p and Path(p).exists():
                inputs[key] = {"path": str(p), "sha256": io.sha256_file(p)}
        outputs = {name: io.sha256_file(self.root / name) for name in self.files if (self.root / name).exists()}
        body = {
            "command": self.command,
            "status": status,
            "versions": {"mvcm": __version__, "numpy": np.__version__, "python": sys.version.split()[0]},
            "seed": self.cfg.seed,
            "config": self.cfg.payload(),
            "config_sha256": self.cfg.digest(),
            "inputs": inputs,
            "outputs": outputs,
        }
        if error:
            body["error"] = error
        if extra:
            body.update(extra)
        # one entry per command so runs sharing a directory keep their records
        path = self.root / "manifest.json"
        runs = {}
        if path.exists():
            try:
                runs = json.loads(path.read_text()).get("runs", {})
            except (json.JSONDecodeError, AttributeError):
                runs = {}
        runs[self.command] = body
        io.dump_json({"runs": runs}, path)


def _eval_points(cfg: RunConfig):
    return None if cfg.eval_points is None else np.linspace(0.0, 1.0, cfg.eval_points)


def _stage(name):
    def wrap(fn):
        def inner(*a, **kw):
            try:
                return fn(*a, **kw)
            except StageError:
                raise
            except Exception as exc:  # surfaced with the owning stage
                raise StageError(name, f"{type(exc).__name__}: {exc}") from exc
        return inner
    return wrap


@_stage("ingest")
def _load(cfg: RunConfig):
    return io.ingest(cfg.responses, cfg.covariates, return_ids=True)


@_stage("fit")
def _fit(cfg, data):
    kernel = get_kernel(cfg.kernel)
    if cfg.h1 == "auto":
        return fit_auto(data, _eval_points(cfg), kernel)
    return estimate_coefficients(data, cfg.h1, _eval_points(cfg), kernel)


@_stage("smooth")
def _smooth(cfg, data, fit):
    if cfg.h2 == "auto":
        return smooth_auto(data, fit)
    return smooth_individuals(data, fit, cfg.h2)


@_stage("fpca")
def _fpca(cfg, curves, p):
    return run_fpca(curves, p, cfg.n_components, cfg.energy)


@_stage("test")
def _test(cfg, data, fit, curves, cov):
    hyp = io.read_hypothesis(cfg.hypothesis, fit.eval_points)
    return hyp, wild_bootstrap_test(data, fit, curves, cov, hyp, G=cfg.g_reps, seed=cfg.seed,
                                    multipliers=cfg.multipliers)


@_stage("band")
def _band(cfg, data, fit):
    return all_bands(data, fit, cfg.alpha, G=cfg.g_reps, seed=cfg.seed)


def run_pipeline(cfg: RunConfig, command: str) -> Path:
    """Run the stages ``command`` needs and persist their outputs under ``cfg.out``."""
    cfg.validate(command)
    out = OutputDir(cfg, command)
    try:
        data, sids, labels = _load(cfg)
        if command == "ingest":
            io.dump_json({"n": data.n, "J": data.J, "M": data.M, "p": data.p, "grid": data.grid.tolist(),
                          "subjects": sids, "responses": labels}, out.path("dataset.json"))
            out.manifest("complete")
            return out.root
        fit = _fit(cfg, data)
        io.dump_json(io.estimates_payload(fit), out.path("estimates.json"))
        if command == "band":
            bands = _band(cfg, data, fit)
            io.write_bands_csv(bands, out.path("bands.csv"), labels)
        if command in ("smooth", "fpca", "test"):
            curves = _smooth(cfg, data, fit)
            io.write_eta_csv(curves, out.path("eta.csv"), sids, labels)
        if command in ("fpca", "test"):
            result = _fpca(cfg, curves, data.p)
            io.dump_json(io.fpca_payload(result, curves), out.path("fpca.json"))
            io.write_fpca_csv(result, out.path("fpca.csv"))
        if command == "test":
            hyp, test = _test(cfg, data, fit, curves, result.covariance)
            io.dump_json(io.global_test_payload(test, hyp), out.path("test.json"))
    except StageError as exc:
        out.manifest("incomplete", str(exc))
        raise
    out.manifest("complete")
    return out.root


def simulate(cfg: RunConfig, command: str) -> Path:
    cfg.validate(command)
    out = OutputDir(cfg, command)
    design = SimulationDesign(n=cfg.n, M=cfg.M, c=cfg.c, grid=cfg.grid)
    try:
        if command == "simulate-power":
            result = run_power_study(design, cfg.c_values, cfg.n_values, cfg.alpha, cfg.reps,
                                     G=cfg.g_reps, seed=cfg.seed, n_jobs=cfg.n_jobs)
            result.to_csv(out.path("power.csv"))
            long = power_long_format(result)
            io.write_rows_csv(long, out.path("power_long.csv"))
        else:
            result = run_coverage_study(design, cfg.n, cfg.M_values, cfg.alpha, cfg.reps,
                                        G=cfg.g_reps, seed=cfg.seed, n_jobs=cfg.n_jobs)
            result.to_csv(out.path("coverage.csv"))
    except Exception as exc:
        out.manifest("incomplete", f"[{command}] {type(exc).__name__}: {exc}")
        raise StageError(command, str(exc)) from exc
    out.manifest("complete", extra={"aborted_replicates": result.aborted,
                                    "wall_clock_seconds": round(result.wall_clock, 3)})
    return out.root


def generate(cfg: RunConfig) -> Path:
    design = SimulationDesign(n=cfg.n, M=cfg.M, c=cfg.c, grid=cfg.grid)
    data = generate_dataset(design, cfg.seed)
    out = OutputDir(cfg, "generate")
    io.emit(data, out.path("responses.csv"), out.path("covariates.csv"))
    out.manifest("complete")
    return out.root


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "generate":
            root = generate(cfg)
        elif args.command.startswith("simulate"):
            root = simulate(cfg, args.command)
        else:
            root = run_pipeline(cfg, args.command)
    except StageError as exc:
        print(f"mvcm: error {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"mvcm: error [config] {exc}", file=sys.stderr)
        return 2
    print(root)
    return 0


if __name__ == "__main__":
    sys.exit(main())
