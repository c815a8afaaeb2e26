"""Command-line interface wiring configuration, data, pipeline, and outputs.

Subcommands: ``run`` (full five-stage estimation on a panel CSV),
``simulate`` (write a synthetic panel plus its oracle sidecar),
``benchmark`` (Monte Carlo comparison of the residualized estimator against
the TWFE baseline), and ``diagnose`` (human-readable summary of a prior
run's robustness reports).

Exit codes are stable: 0 success, 2 configuration error, 3 data error,
4 estimation error. Failures also emit a machine-readable JSON error line
on stderr.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import scipy

from . import __version__
from ._util import THREADS_ENV_VAR, resolve_threads
from .aggregate import DiagnosticsReport, write_event_curve_csv
from .errors import (
    ConfigError,
    DataError,
    EstimationError,
    InvalidConfigError,
    LearnerError,
    MissingArtifactsError,
    SdidmlError,
)
from .learners import LearnerSpec
from .panel import read_panel_csv, write_panel_csv
from .pipeline import (
    AGGREGATION_SCHEMES,
    PipelineConfig,
    default_g_learner,
    default_m_learner,
    run_pipeline,
)
from .simulate import DGPConfig, SCENARIO_NAMES, generate, monte_carlo, scenario

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_ESTIMATION = 4

_RUN_CONFIG_KEYS = {
    "input_path", "output_dir", "g_learner", "m_learner", "K", "clip_eps",
    "control_rule", "anticipation", "estimator", "aggregation", "bootstrap",
    "ci_level", "seed", "placebo_shift", "threads", "allow_no_crossfit",
}


@dataclass
class RunConfig:
    """Resolved ``run`` settings; serialized verbatim into every results file."""

    input_path: Optional[str] = None
    output_dir: Optional[str] = None
    g_learner: LearnerSpec = field(default_factory=default_g_learner)
    m_learner: LearnerSpec = field(default_factory=default_m_learner)
    n_folds: int = 5
    clip_eps: float = 0.01
    control_rule: str = "never_treated"
    anticipation: int = 0
    estimator: str = "contrast"
    aggregation: tuple[str, ...] = AGGREGATION_SCHEMES
    bootstrap_reps: int = 199
    bootstrap_mode: str = "full"
    ci_level: float = 0.95
    seed: int = 0
    placebo_shift: Optional[int] = None
    threads: Optional[int] = None
    allow_no_crossfit: bool = False

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - _RUN_CONFIG_KEYS
        if unknown:
            raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
        cfg = cls()
        if "input_path" in d:
            cfg.input_path = str(d["input_path"])
        if "output_dir" in d:
            cfg.output_dir = str(d["output_dir"])
        if "g_learner" in d:
            cfg.g_learner = LearnerSpec.from_dict(d["g_learner"])
        if "m_learner" in d:
            cfg.m_learner = LearnerSpec.from_dict(d["m_learner"])
        if "K" in d:
            cfg.n_folds = int(d["K"])
        for key in ("clip_eps", "ci_level"):
            if key in d:
                setattr(cfg, key, float(d[key]))
        for key in ("control_rule", "estimator"):
            if key in d:
                setattr(cfg, key, str(d[key]))
        if "anticipation" in d:
            cfg.anticipation = int(d["anticipation"])
        if "aggregation" in d:
            cfg.aggregation = tuple(str(s) for s in d["aggregation"])
        if "bootstrap" in d:
            boot = d["bootstrap"]
            if not isinstance(boot, dict):
                raise ConfigError("'bootstrap' must be an object like {\"B\": 199, \"mode\": \"full\"}")
            unknown = set(boot) - {"B", "mode"}
            if unknown:
                raise ConfigError(f"unknown bootstrap key(s): {sorted(unknown)}")
            if "B" in boot:
                cfg.bootstrap_reps = int(boot["B"])
            if "mode" in boot:
                cfg.bootstrap_mode = str(boot["mode"])
        if "seed" in d:
            cfg.seed = int(d["seed"])
        if "placebo_shift" in d and d["placebo_shift"] is not None:
            cfg.placebo_shift = int(d["placebo_shift"])
        if "threads" in d and d["threads"] is not None:
            cfg.threads = int(d["threads"])
        if "allow_no_crossfit" in d:
            cfg.allow_no_crossfit = bool(d["allow_no_crossfit"])
        return cfg

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config JSON must be an object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return {
            "input_path": self.input_path,
            "output_dir": self.output_dir,
            "g_learner": self.g_learner.to_dict(),
            "m_learner": self.m_learner.to_dict(),
            "K": self.n_folds,
            "clip_eps": self.clip_eps,
            "control_rule": self.control_rule,
            "anticipation": self.anticipation,
            "estimator": self.estimator,
            "aggregation": list(self.aggregation),
            "bootstrap": {"B": self.bootstrap_reps, "mode": self.bootstrap_mode},
            "ci_level": self.ci_level,
            "seed": self.seed,
            "placebo_shift": self.placebo_shift,
            "threads": self.threads,
            "allow_no_crossfit": self.allow_no_crossfit,
        }

    def pipeline_config(self) -> PipelineConfig:
        return PipelineConfig(
            g_learner=self.g_learner, m_learner=self.m_learner,
            n_folds=self.n_folds, clip_eps=self.clip_eps,
            control_rule=self.control_rule, anticipation=self.anticipation,
            estimator=self.estimator, aggregation=self.aggregation,
            bootstrap_reps=self.bootstrap_reps,
            bootstrap_mode=self.bootstrap_mode,
            ci_level=self.ci_level, seed=self.seed)


def _json_safe(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


def _write_json(path, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _versions() -> dict:
    return {"sdidml": __version__, "numpy": np.__version__,
            "scipy": scipy.__version__, "rng": "pcg64"}


def _resolve_scenario_or_config(token: str) -> DGPConfig:
    if token.endswith(".json"):
        try:
            with open(token, encoding="utf-8") as fh:
                return DGPConfig.from_dict(json.load(fh))
        except OSError as exc:
            raise ConfigError(f"cannot read DGP config {token}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{token} is not valid JSON: {exc}") from None
    return scenario(token)


# -- run ------------------------------------------------------------------------


def cmd_run(args: argparse.Namespace) -> int:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    if args.input is not None:
        cfg.input_path = args.input
    if args.output is not None:
        cfg.output_dir = args.output
    if args.seed is not None:
        cfg.seed = args.seed
    if args.threads is not None:
        cfg.threads = args.threads
    if args.allow_no_crossfit:
        cfg.allow_no_crossfit = True
    if cfg.input_path is None:
        raise ConfigError("no input CSV given; set input_path in the config "
                          "or pass --input")
    if cfg.output_dir is None:
        raise ConfigError("no output directory given; set output_dir in the "
                          "config or pass --output")
    if cfg.n_folds == 1 and not cfg.allow_no_crossfit:
        raise ConfigError(
            "K=1 trains and predicts on the same sample, which defeats "
            "cross-fitting and is meant for diagnostics only; pass "
            "--allow-no-crossfit to run it anyway")
    threads = resolve_threads(cfg.threads)
    pcfg = cfg.pipeline_config()

    panel = read_panel_csv(cfg.input_path)
    result = run_pipeline(panel, pcfg, placebo_shift=cfg.placebo_shift,
                          threads=threads)

    outdir = Path(cfg.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    res = result.results
    diagnostics = DiagnosticsReport(pretrend=result.pretrend,
                                    placebo=result.placebo,
                                    overlap=result.overlap)
    payload = {
        "overall": {"att": res.overall_att, "se": _json_safe(res.overall_se),
                    "ci_low": _json_safe(res.overall_ci_low),
                    "ci_high": _json_safe(res.overall_ci_high),
                    "ci_level": res.ci_level},
        "event_curve": [{"e": e, "att": p.att, "se": _json_safe(p.se),
                         "ci_low": _json_safe(p.ci_low),
                         "ci_high": _json_safe(p.ci_high)}
                        for e, p in sorted(res.event_curve.items())],
        "groups": [{"g": g, "att": p.att, "se": _json_safe(p.se),
                    "ci_low": _json_safe(p.ci_low),
                    "ci_high": _json_safe(p.ci_high)}
                   for g, p in sorted(res.group_atts.items())],
        "group_time": result.artifacts.effects.to_json_dict(),
        "weights": {f"{g},{t}": w
                    for (g, t), w in sorted(res.weights_used.items())},
        "bootstrap": None if result.inference is None else {
            "B": result.inference.n_reps,
            "mode": result.inference.mode,
            "approximate": result.inference.mode == "fixed_nuisance",
            "n_failed": result.inference.n_failed,
            "seed": result.inference.seed},
        "diagnostics": diagnostics.to_json_dict(),
        "folds": dict(sorted(result.artifacts.fits.folds.fold_of_unit.items())),
        "n_clipped": result.artifacts.fits.n_clipped,
        "config_echo": cfg.to_dict(),
        "versions": _versions(),
    }
    _write_json(outdir / "results.json", payload)
    result.artifacts.effects.write_csv(outdir / "group_time.csv")
    write_event_curve_csv(res, outdir / "event_curve.csv")
    _write_json(outdir / "diagnostics.json", diagnostics.to_json_dict())

    ci = ""
    if res.overall_ci_low is not None:
        ci = f"  [{res.overall_ci_low:.4f}, {res.overall_ci_high:.4f}] at {res.ci_level:.0%}"
    print(f"overall ATT = {res.overall_att:.6f}{ci}")
    print(f"wrote results to {outdir}")
    return EXIT_OK


# -- simulate ---------------------------------------------------------------------


def cmd_simulate(args: argparse.Namespace) -> int:
    cfg = _resolve_scenario_or_config(args.scenario)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    oracle = generate(cfg)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    write_panel_csv(oracle.panel, outdir / "panel.csv")
    payload = {
        "generator": oracle.generator,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "true_overall_att": _json_safe(oracle.true_overall_att),
        "true_att": [{"g": g, "t": t, "value": v}
                     for (g, t), v in sorted(oracle.true_att.items())],
        "true_event_curve": {str(e): v
                             for e, v in sorted(oracle.true_event_curve.items())},
        "subgroup_of_unit": dict(sorted(oracle.subgroup_of_unit.items())),
        "versions": _versions(),
    }
    _write_json(outdir / "oracle.json", payload)
    print(f"wrote panel.csv and oracle.json to {outdir}")
    return EXIT_OK


# -- benchmark --------------------------------------------------------------------


def cmd_benchmark(args: argparse.Namespace) -> int:
    if args.reps < 1:
        raise ConfigError("--reps must be >= 1")
    dgp = _resolve_scenario_or_config(args.scenario)
    threads = resolve_threads(args.threads)
    pipe = PipelineConfig(bootstrap_reps=args.bootstrap_reps,
                          bootstrap_mode=args.bootstrap_mode, seed=args.seed)
    results = {
        method: monte_carlo(dgp, pipe, args.reps, args.seed, method=method,
                            threads=threads)
        for method in ("sdidml", "twfe")
    }
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    payload = {
        "scenario": args.scenario,
        "reps": args.reps,
        "seed": args.seed,
        "bootstrap": {"B": args.bootstrap_reps, "mode": args.bootstrap_mode,
                      "approximate": args.bootstrap_mode == "fixed_nuisance"},
        "methods": {m: r.to_json_dict() for m, r in results.items()},
        "versions": _versions(),
    }
    _write_json(outdir / "comparison.json", payload)
    with open(outdir / "comparison.csv", "w", encoding="utf-8", newline="") as fh:
        fh.write("method,bias,rmse,coverage\n")
        for m, r in results.items():
            cov = "" if r.coverage is None else repr(r.coverage)
            fh.write(f"{m},{r.bias!r},{r.rmse!r},{cov}\n")
    for m, r in results.items():
        cov = "n/a" if r.coverage is None else f"{r.coverage:.3f}"
        print(f"{m:8s} bias={r.bias:+.4f}  rmse={r.rmse:.4f}  coverage={cov}")
    print(f"wrote comparison to {outdir}")
    return EXIT_OK


# -- diagnose ---------------------------------------------------------------------


def cmd_diagnose(args: argparse.Namespace) -> int:
    results_dir = Path(args.results_dir)
    diag_path = results_dir / "diagnostics.json"
    res_path = results_dir / "results.json"
    if not diag_path.exists() or not res_path.exists():
        raise MissingArtifactsError(
            f"{results_dir} lacks results.json/diagnostics.json from a prior run")
    with open(diag_path, encoding="utf-8") as fh:
        diag = json.load(fh)
    with open(res_path, encoding="utf-8") as fh:
        res = json.load(fh)

    overall = res.get("overall", {})
    att = overall.get("att")
    lo, hi = overall.get("ci_low"), overall.get("ci_high")
    ci = f" [{lo:.4f}, {hi:.4f}]" if lo is not None and hi is not None else ""
    print(f"overall ATT: {att:.6f}{ci}")

    pre = diag.get("pretrend")
    if pre is None:
        print("pretrend:  SKIPPED (no pre-treatment cells or no bootstrap)")
    else:
        flag = "PASS" if pre["p_value"] >= 0.05 else "FAIL"
        print(f"pretrend:  {flag} (statistic={pre['statistic']:.3f}, "
              f"dof={pre['dof']}, p={pre['p_value']:.4f})")

    plc = diag.get("placebo")
    if plc is None:
        print("placebo:   SKIPPED (no placebo_shift configured)")
    else:
        lo, hi = plc.get("ci_low"), plc.get("ci_high")
        if lo is None or hi is None:
            print(f"placebo:   pseudo ATT={plc['pseudo_att']:+.4f} (no CI)")
        else:
            flag = "PASS" if lo <= 0.0 <= hi else "WARN"
            print(f"placebo:   {flag} (pseudo ATT={plc['pseudo_att']:+.4f}, "
                  f"CI [{lo:.4f}, {hi:.4f}])")

    ov = diag["overlap"]
    flag = "WARN" if ov["weak_overlap"] else "PASS"
    print(f"overlap:   {flag} (share outside [0.05,0.95]={ov['share_outside_05_95']:.3f}, "
          f"clipped={ov['n_clipped']}/{ov['n_obs']})")
    return EXIT_OK


# -- entry point ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sdidml",
        description="Staggered DID estimation with machine-learned "
                    "residualization, plus synthetic-panel validation tools.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="estimate on a panel CSV")
    run.add_argument("--config", help="run-config JSON path")
    run.add_argument("--input", help="panel CSV path (overrides config)")
    run.add_argument("--output", help="output directory (overrides config)")
    run.add_argument("--seed", type=int, help="override the config seed")
    run.add_argument("--threads", type=int,
                     help=f"max concurrency (default ${THREADS_ENV_VAR} or 1)")
    run.add_argument("--allow-no-crossfit", action="store_true",
                     help="permit the K=1 diagnostic mode")
    run.set_defaults(func=cmd_run)

    sim = sub.add_parser("simulate", help="write a synthetic panel + oracle")
    sim.add_argument("scenario",
                     help=f"scenario name ({', '.join(SCENARIO_NAMES)} or "
                          f"S1..S5) or a DGP-config JSON path")
    sim.add_argument("--seed", type=int, help="override the scenario seed")
    sim.add_argument("--out", required=True, help="output directory")
    sim.set_defaults(func=cmd_simulate)

    bench = sub.add_parser("benchmark",
                           help="Monte Carlo comparison vs the TWFE baseline")
    bench.add_argument("scenario", help="scenario name or DGP-config JSON path")
    bench.add_argument("--reps", type=int, required=True)
    bench.add_argument("--seed", type=int, default=0)
    bench.add_argument("--out", required=True, help="output directory")
    bench.add_argument("--bootstrap-reps", type=int, default=199)
    bench.add_argument("--bootstrap-mode", default="fixed_nuisance",
                       choices=("full", "fixed_nuisance"))
    bench.add_argument("--threads", type=int)
    bench.set_defaults(func=cmd_benchmark)

    diag = sub.add_parser("diagnose", help="summarize a prior run's diagnostics")
    diag.add_argument("results_dir")
    diag.set_defaults(func=cmd_diagnose)
    return parser


def _fail(code: int, kind: str, exc: Exception) -> int:
    print(json.dumps({"error": {"code": code, "type": kind,
                                "message": str(exc)}}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, type(exc).__name__, exc)
    except DataError as exc:
        return _fail(EXIT_DATA, type(exc).__name__, exc)
    except (EstimationError, LearnerError, SdidmlError) as exc:
        return _fail(EXIT_ESTIMATION, type(exc).__name__, exc)


if __name__ == "__main__":
    sys.exit(main())
