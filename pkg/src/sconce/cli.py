"""Run configuration, pipeline orchestration, report persistence and the
command-line entry point.  This is the only module that touches the
filesystem.

Subcommands build on each other:

  check     hypothesis scan and constants only
  simulate  + Monte Carlo derivative audit per (t, x)
  density   + kernel density estimate and positivity check
  sandwich  + mixture-coupling envelope parameters, envelope and tail checks
  all       everything above

Exit codes: 0 all verdicts pass (or not applicable), 1 any verdict fails,
2 configuration error, 3 divergence rate beyond tolerance.  report.json is
written for exit codes 0 and 1 (and best effort otherwise); density.csv
and samples.csv are written for the stages that produce them.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from . import density as density_mod
from . import malliavin
from .errors import ConfigError, SconceError
from .paths import TimeGrid
from .scenario import (
    DriftKind,
    DriftSpec,
    InitialConditionKind,
    InitialConditionSpec,
    Window,
    check_hypotheses,
    constants,
)

STAGES = ("check", "simulate", "density", "sandwich", "all")

#: divergent-path fraction above which a run aborts with exit code 3
DIVERGENCE_TOLERANCE = 0.01

_DEFAULTS = {
    "scenario": {
        "window": {"x_lo": -2.0, "x_hi": 2.0, "n_scan": 401},
        "T": 1.0,
    },
    "simulation": {"n_steps": 1000, "t_eval": [1.0], "x_eval": [0.0], "t0": 0.1},
    "montecarlo": {
        "n_paths": 10_000,
        "n_prime": 1000,
        "seed": 0,
        "theta_nodes": [0.1, 0.5, 1.0, 2.0, 4.0],
    },
    "kde": {"bandwidth": "auto", "z_nodes": 512},
    "outputs": {"directory": "out", "formats": ["json", "csv"]},
    "audit": {"second_order_paths": 8},
}

_KNOWN_KEYS = {
    "": {"scenario", "simulation", "montecarlo", "kde", "outputs", "audit"},
    "scenario": {"drift", "ic", "window", "T"},
    "scenario.drift": {"kind", "a", "c", "kappa", "coefficients"},
    "scenario.ic": {"kind", "delta", "offset", "slope"},
    "scenario.window": {"x_lo", "x_hi", "n_scan"},
    "simulation": {"n_steps", "t_eval", "x_eval", "t0"},
    "montecarlo": {"n_paths", "n_prime", "seed", "theta_nodes"},
    "kde": {"bandwidth", "z_nodes"},
    "outputs": {"directory", "formats"},
    "audit": {"second_order_paths"},
}


@dataclass
class RunConfig:
    """Validated, defaults-filled run configuration."""

    drift: DriftSpec
    ic: InitialConditionSpec
    window: Window
    horizon: float
    n_steps: int
    t_eval: tuple
    x_eval: tuple
    t0: float
    n_paths: int
    n_prime: int
    seed: int
    theta_nodes: tuple
    bandwidth: object
    z_nodes: int
    out_dir: str
    formats: tuple
    second_order_paths: int

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(self.horizon, self.n_steps)

    def echo(self) -> dict:
        """Effective configuration; a run is replayable from this echo."""
        return {
            "scenario": {
                "drift": self.drift.to_dict(),
                "ic": self.ic.to_dict(),
                "window": self.window.to_dict(),
                "T": self.horizon,
            },
            "simulation": {
                "n_steps": self.n_steps,
                "t_eval": list(self.t_eval),
                "x_eval": list(self.x_eval),
                "t0": self.t0,
            },
            "montecarlo": {
                "n_paths": self.n_paths,
                "n_prime": self.n_prime,
                "seed": self.seed,
                "theta_nodes": list(self.theta_nodes),
            },
            "kde": {"bandwidth": self.bandwidth, "z_nodes": self.z_nodes},
            "outputs": {"directory": self.out_dir, "formats": list(self.formats)},
            "audit": {"second_order_paths": self.second_order_paths},
        }


def _check_unknown(raw: dict, section: str, errors: list):
    known = _KNOWN_KEYS[section]
    for key in raw:
        if key not in known:
            where = section or "top level"
            errors.append(f"unknown field {key!r} in {where}")


def _merged(raw: dict, section: str) -> dict:
    out = dict(_DEFAULTS.get(section, {}))
    out.update(raw or {})
    return out


def parse_config(text: str) -> RunConfig:
    """Parse and validate a JSON configuration, collecting every error."""
    errors: list[str] = []
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"invalid JSON: {exc}"]) from exc
    if not isinstance(raw, dict):
        raise ConfigError(["top-level configuration must be a JSON object"])
    _check_unknown(raw, "", errors)

    scen = _merged(raw.get("scenario", {}), "scenario")
    _check_unknown(raw.get("scenario", {}) or {}, "scenario", errors)
    sim = _merged(raw.get("simulation", {}), "simulation")
    _check_unknown(raw.get("simulation", {}) or {}, "simulation", errors)
    mc = _merged(raw.get("montecarlo", {}), "montecarlo")
    _check_unknown(raw.get("montecarlo", {}) or {}, "montecarlo", errors)
    kde_cfg = _merged(raw.get("kde", {}), "kde")
    _check_unknown(raw.get("kde", {}) or {}, "kde", errors)
    outputs = _merged(raw.get("outputs", {}), "outputs")
    _check_unknown(raw.get("outputs", {}) or {}, "outputs", errors)
    audit = _merged(raw.get("audit", {}), "audit")
    _check_unknown(raw.get("audit", {}) or {}, "audit", errors)

    drift = ic = window = None
    drift_raw = scen.get("drift")
    if not isinstance(drift_raw, dict) or "kind" not in drift_raw:
        errors.append("scenario.drift must be an object with a 'kind'")
    else:
        _check_unknown(drift_raw, "scenario.drift", errors)
        try:
            kind = DriftKind(drift_raw["kind"])
            drift = DriftSpec(
                kind,
                a=float(drift_raw.get("a", 0.0)),
                c=float(drift_raw.get("c", 0.0)),
                kappa=float(drift_raw.get("kappa", 0.0)),
                coefficients=tuple(drift_raw["coefficients"])
                if "coefficients" in drift_raw
                else None,
            )
        except (ValueError, TypeError) as exc:
            errors.append(f"scenario.drift: {exc}")
    ic_raw = scen.get("ic")
    if not isinstance(ic_raw, dict) or "kind" not in ic_raw:
        errors.append("scenario.ic must be an object with a 'kind'")
    else:
        _check_unknown(ic_raw, "scenario.ic", errors)
        try:
            kind = InitialConditionKind(ic_raw["kind"])
            ic = InitialConditionSpec(
                kind,
                delta=float(ic_raw.get("delta", 0.0)),
                offset=float(ic_raw.get("offset", 0.0)),
                slope=float(ic_raw.get("slope", 0.0)),
            )
        except (ValueError, TypeError) as exc:
            errors.append(f"scenario.ic: {exc}")
    win_raw = scen.get("window")
    try:
        window = Window(
            x_lo=float(win_raw["x_lo"]),
            x_hi=float(win_raw["x_hi"]),
            n_scan=int(win_raw.get("n_scan", 401)),
        )
    except (ValueError, TypeError, KeyError) as exc:
        errors.append(f"scenario.window: {exc!r}")

    horizon = float(scen.get("T", 1.0))
    if not horizon > 0:
        errors.append("scenario.T must be positive")

    n_steps = int(sim["n_steps"])
    if n_steps < 10:
        errors.append("simulation.n_steps must be >= 10")
    t_eval = tuple(float(t) for t in sim["t_eval"])
    x_eval = tuple(float(v) for v in sim["x_eval"])
    t0 = float(sim["t0"])
    if not t_eval:
        errors.append("simulation.t_eval must be nonempty")
    for t in t_eval:
        if t > horizon:
            errors.append(f"t_eval must be <= T: got t={t:g} with T={horizon:g}")
        if t <= 0:
            errors.append(f"t_eval entries must be positive: got {t:g}")
    if not x_eval:
        errors.append("simulation.x_eval must be nonempty")
    if not t0 > 0:
        errors.append("simulation.t0 must be positive")
    elif t_eval and min(t_eval) < t0:
        errors.append(
            f"sandwich runs need 0 < t0 <= min(t_eval): t0={t0:g}, min(t_eval)={min(t_eval):g}"
            " (density lower bounds only hold at times bounded away from zero)"
        )

    n_paths = int(mc["n_paths"])
    if n_paths < 1:
        errors.append("montecarlo.n_paths must be >= 1")
    n_prime = int(mc["n_prime"])
    if n_prime < 1:
        errors.append("montecarlo.n_prime must be >= 1")
    seed = int(mc["seed"])
    theta_nodes = tuple(float(v) for v in mc["theta_nodes"])
    if any(v < 0 for v in theta_nodes):
        errors.append("montecarlo.theta_nodes must be >= 0")

    bandwidth = kde_cfg["bandwidth"]
    if bandwidth != "auto":
        try:
            bandwidth = float(bandwidth)
            if not bandwidth > 0:
                errors.append("kde.bandwidth must be 'auto' or a positive number")
        except (TypeError, ValueError):
            errors.append("kde.bandwidth must be 'auto' or a positive number")
    z_nodes = int(kde_cfg["z_nodes"])
    if z_nodes < 8:
        errors.append("kde.z_nodes must be >= 8")

    second_order_paths = int(audit["second_order_paths"])
    if second_order_paths < 0:
        errors.append("audit.second_order_paths must be >= 0")

    if not errors and window is not None:
        grid = TimeGrid(horizon, n_steps)
        for t in t_eval:
            try:
                grid.index_of(t)
            except ValueError:
                errors.append(f"t_eval entry {t:g} is not a node of the time grid")

    if errors:
        raise ConfigError(errors)
    return RunConfig(
        drift=drift,
        ic=ic,
        window=window,
        horizon=horizon,
        n_steps=n_steps,
        t_eval=t_eval,
        x_eval=x_eval,
        t0=t0,
        n_paths=n_paths,
        n_prime=n_prime,
        seed=seed,
        theta_nodes=theta_nodes,
        bandwidth=bandwidth,
        z_nodes=z_nodes,
        out_dir=str(outputs["directory"]),
        formats=tuple(outputs["formats"]),
        second_order_paths=second_order_paths,
    )


@dataclass
class RunReport:
    """Everything one run produced, JSON-serializable."""

    stage: str
    seed: int
    config_echo: dict
    hypotheses: dict | None = None
    constants: dict = field(default_factory=dict)
    malliavin_audit: dict = field(default_factory=dict)
    bouleau_hirsch: dict = field(default_factory=dict)
    density_info: dict = field(default_factory=dict)
    sandwich: dict = field(default_factory=dict)
    envelope: dict = field(default_factory=dict)
    tail: dict = field(default_factory=dict)
    exclusions: dict = field(default_factory=dict)
    verdicts: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    def add_verdict(self, name: str, status: str, reason: str):
        assert status in ("pass", "fail", "not-applicable")
        self.verdicts[name] = {"status": status, "reason": reason}

    @property
    def any_fail(self) -> bool:
        return any(v["status"] == "fail" for v in self.verdicts.values())

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "seed": self.seed,
            "config": self.config_echo,
            "hypotheses": self.hypotheses,
            "constants": self.constants,
            "malliavin_audit": self.malliavin_audit,
            "bouleau_hirsch": self.bouleau_hirsch,
            "density": self.density_info,
            "sandwich": self.sandwich,
            "envelope": self.envelope,
            "tail": self.tail,
            "exclusions": self.exclusions,
            "verdicts": self.verdicts,
            "timings": self.timings,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=True)


def _pair_key(t: float, x: float) -> str:
    return f"t={t:g},x={x:g}"


def run(config: RunConfig, stage: str = "all", *, threads: int = 1) -> tuple[RunReport, int]:
    """Execute the pipeline up to `stage`, write artifacts, return (report, exit code)."""
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    want = STAGES.index(stage) if stage != "all" else len(STAGES) - 1
    report = RunReport(stage=stage, seed=config.seed, config_echo=config.echo())
    grid = config.grid
    os.makedirs(config.out_dir, exist_ok=True)
    divergence_abort = False

    t_start = time.perf_counter()
    hyp = check_hypotheses(config.drift, config.ic, config.window, config.horizon)
    report.hypotheses = hyp.to_dict()
    consts_by_t = {}
    for t in config.t_eval:
        consts_by_t[t] = constants(hyp, config.horizon, t)
        report.constants[f"t={t:g}"] = consts_by_t[t].to_dict()
    report.timings["check"] = time.perf_counter() - t_start

    if want >= 1:  # simulate: derivative audit
        t_stage = time.perf_counter()
        for t in config.t_eval:
            for x in config.x_eval:
                audit = malliavin.audit_bounds(
                    config.drift,
                    config.ic,
                    consts_by_t[t],
                    grid,
                    t,
                    x,
                    seed=config.seed,
                    n_paths=config.n_paths,
                    threads=threads,
                    second_order_paths=config.second_order_paths,
                )
                key = _pair_key(t, x)
                report.malliavin_audit[key] = audit.to_dict()
                div_frac = audit.n_diverged / audit.n_paths
                if div_frac > DIVERGENCE_TOLERANCE:
                    divergence_abort = True
                report.add_verdict(
                    f"malliavin_bounds[{key}]",
                    "pass" if audit.all_checks_pass else "fail",
                    f"{audit.n_in_window}/{audit.n_paths} in-window paths, "
                    f"failures={ {k: v for k, v in audit.check_failures.items() if v} or 'none'}",
                )
        report.timings["simulate"] = time.perf_counter() - t_stage

    samples_by_pair = {}
    density_by_pair = {}
    if want >= 2:  # density: KDE + positivity
        t_stage = time.perf_counter()
        for t in config.t_eval:
            for x in config.x_eval:
                key = _pair_key(t, x)
                samples = density_mod.sample_solution(
                    config.drift,
                    config.ic,
                    grid,
                    t,
                    x,
                    config.n_paths,
                    config.seed,
                    window=config.window,
                    threads=threads,
                )
                samples_by_pair[(t, x)] = samples
                excl = samples.exclusion_fraction
                report.exclusions[key] = {
                    "n": samples.n,
                    "n_valid": samples.n_valid,
                    "n_diverged": samples.n_diverged,
                    "fraction": excl,
                }
                if samples.n_diverged / samples.n > DIVERGENCE_TOLERANCE:
                    divergence_abort = True
                report.add_verdict(
                    f"exclusion_rate[{key}]",
                    "pass" if excl <= density_mod.EXCLUSION_TOLERANCE else "fail",
                    f"excluded {excl:.2%} of paths (tolerance "
                    f"{density_mod.EXCLUSION_TOLERANCE:.0%}); above it the "
                    "truncated density is biased",
                )
                est = density_mod.kde(samples, config.bandwidth, config.z_nodes)
                density_by_pair[(t, x)] = est
                report.density_info[key] = {
                    "bandwidth": est.bandwidth,
                    "n_used": est.n,
                    "mass": est.mass,
                    "z_lo": float(est.z[0]),
                    "z_hi": float(est.z[-1]),
                }
                bh = density_mod.bouleau_hirsch_check(samples, consts_by_t[t])
                report.bouleau_hirsch[key] = bh.to_dict()
                report.add_verdict(
                    f"bouleau_hirsch[{key}]",
                    "pass" if bh.positive else "fail",
                    f"min ||Du||^2 = {bh.min_norm_sq:g} over {bh.n_valid} valid paths",
                )
                if bh.meets_c5 is not None:
                    report.add_verdict(
                        f"derivative_norm_lower_bound[{key}]",
                        "pass" if bh.meets_c5 else "fail",
                        f"min ||Du||^2 = {bh.min_norm_sq:g} vs c5 = {bh.c5:g}",
                    )
        report.timings["density"] = time.perf_counter() - t_stage

    if want >= 3:  # sandwich + envelope + tail
        t_stage = time.perf_counter()
        for t in config.t_eval:
            for x in config.x_eval:
                key = _pair_key(t, x)
                consts = consts_by_t[t]
                samples = samples_by_pair[(t, x)]
                est = density_by_pair[(t, x)]
                bounds = density_mod.sandwich(
                    config.drift,
                    config.ic,
                    grid,
                    t,
                    x,
                    consts=consts,
                    n_paths=config.n_paths,
                    n_prime=config.n_prime,
                    seed=config.seed,
                    t0=config.t0,
                    theta_nodes=config.theta_nodes,
                    samples=samples,
                    threads=threads,
                )
                report.sandwich[key] = bounds.to_dict()
                hyp_ok = hyp.cc11 and hyp.cc22
                if hyp_ok:
                    report.add_verdict(
                        f"coupling_positivity[{key}]",
                        "pass" if bounds.nonpositive_inner_count == 0 else "fail",
                        f"{bounds.nonpositive_inner_count} nonpositive inner products "
                        f"of {bounds.n_pairs_valid} valid pairs",
                    )
                sd = float(np.std(samples.valid_values()))
                env = density_mod.envelope_check(
                    est, bounds, bounds.m - 2.0 * sd, bounds.m + 2.0 * sd
                )
                report.envelope[key] = env.to_dict()
                report.add_verdict(
                    f"envelope[{key}]",
                    "pass" if env.passed else "fail",
                    f"{env.n_violations} violations over {env.n_checked} nodes "
                    "(empirical gammas, 3 SE guard)",
                )
                excl = samples.exclusion_fraction
                if not hyp_ok:
                    report.add_verdict(
                        f"analytic_bracket[{key}]",
                        "not-applicable",
                        "analytic gamma bounds need the concavity and positivity hypotheses",
                    )
                elif excl > density_mod.EXCLUSION_TOLERANCE:
                    bracket = (
                        bounds.gamma_sq_min_analytic <= bounds.gamma_sq_min
                        and bounds.gamma_sq_max_analytic >= bounds.gamma_sq_max
                    )
                    report.add_verdict(
                        f"analytic_bracket[{key}]",
                        "not-applicable",
                        f"window exits {excl:.2%} > 1%; bracket over in-window pairs "
                        f"{'holds' if bracket else 'fails'} "
                        f"([{bounds.gamma_sq_min_analytic:g}, {bounds.gamma_sq_max_analytic:g}] vs "
                        f"[{bounds.gamma_sq_min:g}, {bounds.gamma_sq_max:g}])",
                    )
                else:
                    bracket = (
                        bounds.gamma_sq_min_analytic <= bounds.gamma_sq_min
                        and bounds.gamma_sq_max_analytic >= bounds.gamma_sq_max
                    )
                    report.add_verdict(
                        f"analytic_bracket[{key}]",
                        "pass" if bracket else "fail",
                        f"[{bounds.gamma_sq_min_analytic:g}, {bounds.gamma_sq_max_analytic:g}] vs "
                        f"empirical [{bounds.gamma_sq_min:g}, {bounds.gamma_sq_max:g}]",
                    )
                tail = density_mod.tail_check(est, p=4, q=0.95)
                report.tail[key] = tail.to_dict()
                report.add_verdict(
                    f"tail_decay[{key}]",
                    "pass" if tail.passed else "fail",
                    f"|z|^4 rho decreasing beyond the 95% quantile "
                    f"(right from {tail.z_right:g}, left from {tail.z_left:g})",
                )
        report.timings["sandwich"] = time.perf_counter() - t_stage

    # artifact files: canonical names for the first (t, x) pair, suffixed
    # files for any further pairs
    if "csv" in config.formats and samples_by_pair:
        for i, ((t, x), samples) in enumerate(samples_by_pair.items()):
            suffix = "" if i == 0 else f"_t{t:g}_x{x:g}"
            with open(os.path.join(config.out_dir, f"samples{suffix}.csv"), "w") as f:
                density_mod.write_samples_csv(samples, f)
            est = density_by_pair.get((t, x))
            if est is not None:
                key = _pair_key(t, x)
                bounds_dict = report.sandwich.get(key)
                bounds_obj = None
                if bounds_dict is not None:
                    bounds_obj = _bounds_from_dict(bounds_dict)
                with open(os.path.join(config.out_dir, f"density{suffix}.csv"), "w") as f:
                    density_mod.write_density_csv(est, bounds_obj, f)

    exit_code = 0
    if report.any_fail:
        exit_code = 1
    if divergence_abort:
        exit_code = 3
    if "json" in config.formats:
        with open(os.path.join(config.out_dir, "report.json"), "w") as f:
            f.write(report.to_json())
            f.write("\n")
    return report, exit_code


def _bounds_from_dict(d: dict) -> density_mod.SandwichBounds:
    return density_mod.SandwichBounds(
        t=d["t"],
        x=d["x"],
        m=d["m"],
        abs_dev=d["abs_dev"],
        gamma_sq_min=d["gamma_sq_min"],
        gamma_sq_max=d["gamma_sq_max"],
        gamma_sq_q01=d["gamma_sq_q01"],
        gamma_sq_q99=d["gamma_sq_q99"],
        gamma_sq_min_analytic=d["gamma_sq_min_analytic"],
        gamma_sq_max_analytic=d["gamma_sq_max_analytic"],
        theta_nodes=tuple(d["theta_nodes"]),
        n_pairs_per_theta=d["n_pairs_per_theta"],
        n_pairs_valid=d["n_pairs_valid"],
        n_pairs_total=d["n_pairs_total"],
        nonpositive_inner_count=d["nonpositive_inner_count"],
        per_theta=tuple(d["per_theta"]),
    )


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="sconce",
        description="Simulate the stochastic continuity equation along its "
        "characteristics and verify the derivative and density bounds.",
    )
    sub = parser.add_subparsers(dest="stage", required=True)
    for name in STAGES:
        p = sub.add_parser(name, help=f"run the pipeline through the {name!r} stage")
        p.add_argument("--config", required=True, help="path to the JSON run configuration")
        p.add_argument("--seed", type=int, default=None, help="override montecarlo.seed")
        p.add_argument(
            "--threads",
            type=int,
            default=os.cpu_count() or 1,
            help="worker threads for the Monte Carlo stages",
        )
        p.add_argument("--out", default=None, help="override outputs.directory")
    args = parser.parse_args(argv)

    try:
        with open(args.config) as f:
            config = parse_config(f.read())
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        for msg in exc.messages:
            print(f"config error: {msg}", file=sys.stderr)
        return 2

    if args.seed is not None:
        config.seed = args.seed
    if args.out is not None:
        config.out_dir = args.out

    try:
        report, code = run(config, args.stage, threads=max(1, args.threads))
    except SconceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    n_fail = sum(1 for v in report.verdicts.values() if v["status"] == "fail")
    n_pass = sum(1 for v in report.verdicts.values() if v["status"] == "pass")
    n_na = sum(1 for v in report.verdicts.values() if v["status"] == "not-applicable")
    print(
        f"{args.stage}: {n_pass} pass, {n_fail} fail, {n_na} not-applicable; "
        f"report written to {os.path.join(config.out_dir, 'report.json')}"
    )
    for name, v in sorted(report.verdicts.items()):
        print(f"  [{v['status']:>14}] {name}: {v['reason']}")
    return code


if __name__ == "__main__":
    sys.exit(main())
