"""Command-line front end: flat-key configs, experiment commands, CSV output.

Commands::

    safefilter simulate --config cfg.txt [--out DIR]
    safefilter sweep    --config cfg.txt [--out DIR]
    safefilter verify   --config cfg.txt [--out DIR]

Configs are flat ``key = value`` lines (``#`` starts a comment). Unknown keys
are rejected; missing keys take the documented defaults (see README for the
schema). All numbers are serialized with 17 significant digits so CSV output
round-trips losslessly; any non-finite value fails the run. Exit codes:
0 success, 1 error, 2 safety-bound violation (simulate only). The env var
``SAFETY_FILTER_THREADS`` caps sweep parallelism (default: serial).
"""

from __future__ import annotations

import argparse
import concurrent.futures
import math
import os
import sys
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .acc import (
    DEFAULT_X0,
    AccParams,
    LeadProfile,
    SweepCell,
    acc_barrier,
    acc_clf,
    acc_controller,
    acc_perturbation,
    acc_system,
    run_tradeoff_sweep,
    simulate_acc,
)
from .core import (
    Box,
    ConfigurationError,
    ControlLyapunovSpec,
    ZeroingBarrier,
    lie_derivatives,
)
from .qp import (
    P1Instance,
    P2Instance,
    WeightedObjective,
    solve_p1,
    solve_p2,
    solve_weighted,
)
from .sim import (
    IssLevel,
    check_vc_decrease,
    estimate_lipschitz,
    iss_epsilon,
    simulate,
)

__all__ = [
    "ConfigError",
    "Scenario",
    "RunConfig",
    "load_config",
    "cmd_simulate",
    "cmd_sweep",
    "cmd_verify",
    "main",
]

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_SAFETY = 2


class ConfigError(ValueError):
    """Malformed configuration file or invalid key value."""


class Scenario(Enum):
    NOMINAL = "nominal"
    PERTURBED = "perturbed"
    SWEEP = "sweep"
    CUSTOM = "custom"


# key -> (kind, default); kinds: float, int, bool, str, list
_SCHEMA: dict = {
    "scenario": ("str", "nominal"),
    "acc.m": ("float", 1650.0),
    "acc.f0": ("float", 0.1),
    "acc.f1": ("float", 5.0),
    "acc.f2": ("float", 0.25),
    "acc.grav": ("float", 9.81),
    "acc.v_d": ("float", 22.0),
    "acc.tau_des": ("float", 1.8),
    "acc.kappa": ("float", 5.0),
    "acc.c": ("float", 1.0),
    "acc.p_sc": ("float", 100.0),
    "acc.theta_amp": ("float", 0.1),
    "acc.theta_period": ("float", 20.0),
    "acc.x0": ("list", [20.0, 18.0, 80.0]),
    "acc.lead_times": ("list", [0.0, 15.0, 20.0]),
    "acc.lead_accels": ("list", [0.0, -1.0, 0.0]),
    "sim.dt": ("float", 1e-3),
    "sim.t_final": ("float", 60.0),
    "sim.safety_tol": ("float", 1e-6),
    "sweep.kappa": ("list", [float(k) for k in range(1, 11)]),
    "sweep.theta": ("list", [0.1, 0.2, 0.3, 0.4]),
    "sweep.dt": ("float", 2e-3),
    "output.dir": ("str", "."),
    "output.emit_plots_script": ("bool", False),
    "seed": ("int", 0),
    "verify.corpus": ("int", 1000),
    "verify.lipschitz_pairs": ("int", 2000),
}


@dataclass(frozen=True)
class RunConfig:
    scenario: Scenario
    acc_params: AccParams
    x0: tuple
    dt: float
    t_final: float
    safety_tol: float
    sweep_kappa: tuple
    sweep_theta: tuple
    sweep_dt: float
    out_dir: str
    emit_plots_script: bool
    seed: int
    verify_corpus: int
    verify_pairs: int


def _parse_value(kind: str, token: str, key: str, lineno: int):
    token = token.strip()
    try:
        if kind == "float":
            return float(token)
        if kind == "int":
            return int(token)
        if kind == "bool":
            low = token.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(token)
        if kind == "list":
            if not (token.startswith("[") and token.endswith("]")):
                raise ValueError(token)
            inner = token[1:-1].strip()
            if not inner:
                return []
            return [float(part) for part in inner.split(",")]
        return token
    except ValueError:
        raise ConfigError(
            f"line {lineno}: cannot parse value {token!r} for key {key!r} "
            f"(expected {kind})"
        ) from None


def load_config(path) -> RunConfig:
    """Parse a flat-key config file; missing keys take documented defaults."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    values = {key: default for key, (_, default) in _SCHEMA.items()}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, token = line.partition("=")
        key = key.strip()
        if key not in _SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        kind, _ = _SCHEMA[key]
        values[key] = _parse_value(kind, token, key, lineno)
    return _build_config(values)


def default_config() -> RunConfig:
    return _build_config({key: default for key, (_, default) in _SCHEMA.items()})


def _build_config(values: dict) -> RunConfig:
    try:
        scenario = Scenario(values["scenario"])
    except ValueError:
        raise ConfigError(
            f"scenario must be one of "
            f"{[s.value for s in Scenario]}, got {values['scenario']!r}"
        ) from None

    dt = values["sim.dt"]
    if not 0.0 < dt <= 0.1:
        raise ConfigError(f"sim.dt must be in (0, 0.1], got {dt}")
    t_final = values["sim.t_final"]
    if t_final > 3600.0:
        raise ConfigError(f"sim.t_final must be <= 3600, got {t_final}")
    if t_final < dt:
        raise ConfigError(f"sim.t_final must be >= sim.dt, got {t_final}")
    sweep_dt = values["sweep.dt"]
    if not 0.0 < sweep_dt <= 0.1:
        raise ConfigError(f"sweep.dt must be in (0, 0.1], got {sweep_dt}")
    if scenario is Scenario.SWEEP and (
        not values["sweep.kappa"] or not values["sweep.theta"]
    ):
        raise ConfigError("sweep.kappa and sweep.theta must be nonempty grids")
    x0 = values["acc.x0"]
    if len(x0) != 3:
        raise ConfigError(f"acc.x0 must have 3 entries, got {len(x0)}")

    try:
        profile = LeadProfile(
            tuple(values["acc.lead_times"]), tuple(values["acc.lead_accels"])
        )
        params = AccParams(
            m=values["acc.m"],
            f0=values["acc.f0"],
            f1=values["acc.f1"],
            f2=values["acc.f2"],
            grav=values["acc.grav"],
            v_d=values["acc.v_d"],
            tau_des=values["acc.tau_des"],
            kappa=values["acc.kappa"],
            c=values["acc.c"],
            p_sc=values["acc.p_sc"],
            lead_profile=profile,
            theta_amp=values["acc.theta_amp"],
            theta_period=values["acc.theta_period"],
        )
    except ConfigurationError as exc:
        raise ConfigError(str(exc)) from None

    return RunConfig(
        scenario=scenario,
        acc_params=params,
        x0=tuple(x0),
        dt=dt,
        t_final=t_final,
        safety_tol=values["sim.safety_tol"],
        sweep_kappa=tuple(values["sweep.kappa"]),
        sweep_theta=tuple(values["sweep.theta"]),
        sweep_dt=sweep_dt,
        out_dir=values["output.dir"],
        emit_plots_script=values["output.emit_plots_script"],
        seed=values["seed"],
        verify_corpus=values["verify.corpus"],
        verify_pairs=values["verify.lipschitz_pairs"],
    )


def _fmt(x: float) -> str:
    x = float(x)
    if not math.isfinite(x):
        raise ValueError(f"refusing to serialize non-finite value {x!r}")
    return format(x, ".17g")


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(cell if isinstance(cell, str) else _fmt(cell) for cell in row))
    path.write_text("\n".join(lines) + "\n")


_PLOT_SCRIPT = """\
#!/usr/bin/env python3
\"\"\"Plot trajectory.csv produced by `safefilter simulate`.\"\"\"
import csv
import sys

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

path = sys.argv[1] if len(sys.argv) > 1 else "trajectory.csv"
cols = {}
with open(path) as fh:
    reader = csv.DictReader(fh)
    for row in reader:
        for key, val in row.items():
            cols.setdefault(key, []).append(float(val))

fig, axes = plt.subplots(3, 1, figsize=(7, 9), sharex=True)
axes[0].plot(cols["t"], cols["v_l"], label="lead")
axes[0].plot(cols["t"], cols["v_f"], label="follower")
axes[0].set_ylabel("speed [m/s]")
axes[0].legend()
axes[1].plot(cols["t"], cols["h"])
axes[1].axhline(0.0, color="k", linestyle=":")
axes[1].set_ylabel("headway margin h [m]")
axes[2].plot(cols["t"], cols["u"])
axes[2].set_ylabel("input u [N]")
axes[2].set_xlabel("t [s]")
fig.tight_layout()
fig.savefig("trajectory.png", dpi=150)
print("wrote trajectory.png")
"""


def _effective_amp(config: RunConfig) -> float:
    if config.scenario is Scenario.NOMINAL:
        return 0.0
    return config.acc_params.theta_amp


def _generic_controller(params: AccParams, barrier: ZeroingBarrier,
                        clf: ControlLyapunovSpec):
    # Same weighted QP as acc_controller, but with rows rebuilt from an
    # arbitrary barrier via Lie derivatives (diagnostic path).
    system = acc_system(params)
    base = WeightedObjective(
        np.array([[2.0 / params.m**2, 0.0], [0.0, 2.0 * params.p_sc]]),
        np.zeros(2),
    )

    def control(x):
        from .acc import drag_force

        fr = drag_force(params, x[1])
        lf_h, lg_h = lie_derivatives(barrier, system, x)
        grad_v = clf.gradient(x)
        f = system.drift_at(x)
        lf_v = float(grad_v @ f)
        lg_v = grad_v @ system.control_matrix_at(x)
        c_v = clf.rate_c * clf.value(x)
        a_clf = np.append(lg_v, -1.0)
        b_clf = -lf_v - c_v
        a_zcbf = np.append(-lg_h, 0.0)
        b_zcbf = lf_h + barrier.alpha(barrier.value(x))
        result = solve_weighted(
            base.with_linear_term(np.array([-2.0 * fr / params.m**2, 0.0])),
            [(a_clf, b_clf), (a_zcbf, b_zcbf)],
        )
        return result.minimizer[:1], float(result.minimizer[1]), result

    return control


def cmd_simulate(
    config: RunConfig,
    barrier_override: Optional[Callable[[AccParams], ZeroingBarrier]] = None,
) -> int:
    """Run one closed-loop scenario; write trajectory.csv and summary.csv."""
    params = config.acc_params
    out = Path(config.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        amp = _effective_amp(config)
        perturbed = amp > 0.0
        if barrier_override is None:
            traj = simulate_acc(
                params, config.x0, config.t_final, config.dt, perturbed=perturbed
            )
        else:
            barrier = barrier_override(params)
            traj = simulate(
                acc_system(params),
                _generic_controller(params, barrier, acc_clf(params)),
                acc_perturbation(params, perturbed),
                np.asarray(config.x0, dtype=float),
                config.t_final,
                config.dt,
                barrier=barrier,
                clf=acc_clf(params),
            )

        gamma_max = iss_epsilon(params.kappa, params.grav, amp)
        min_h = float(np.min(traj.h_values))
        min_u_over_mg = float(np.min(traj.inputs[:, 0])) / (params.m * params.grav)

        _write_csv(
            out / "trajectory.csv",
            ["t", "v_l", "v_f", "D", "u", "delta", "h", "V", "V_C", "kkt_residual"],
            (
                (
                    traj.times[i], traj.states[i, 0], traj.states[i, 1],
                    traj.states[i, 2], traj.inputs[i, 0], traj.deltas[i],
                    traj.h_values[i], traj.v_values[i], traj.vc_values[i],
                    traj.kkt_residuals[i],
                )
                for i in range(len(traj))
            ),
        )
        _write_csv(
            out / "summary.csv",
            ["min_h", "gamma_max", "min_u_over_mg"],
            [(min_h, gamma_max, min_u_over_mg)],
        )
        if config.emit_plots_script:
            (out / "plot_trajectory.py").write_text(_PLOT_SCRIPT)

        if float(np.min(traj.states[:, 2])) < 0.0:
            print("warning: gap D went negative (collision)", file=sys.stderr)

        threshold = -gamma_max - config.safety_tol
        if min_h < threshold:
            first = int(np.argmax(traj.h_values < threshold))
            print(
                f"safety bound violated: min h = {min_h:.6g} < {threshold:.6g} "
                f"(first at t = {traj.times[first]:.6g} s)",
                file=sys.stderr,
            )
            return EXIT_SAFETY
        return EXIT_OK
    except (RuntimeError, ValueError, OSError) as exc:
        print(f"simulate failed: {exc}", file=sys.stderr)
        return EXIT_ERROR


def _sweep_workers() -> int:
    raw = os.environ.get("SAFETY_FILTER_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _sweep_cell(args) -> SweepCell:
    params, kap, bound, t_final, dt, x0 = args
    cells = run_tradeoff_sweep(params, [kap], [bound], t_final, dt, x0)
    return cells[0]


def cmd_sweep(config: RunConfig) -> int:
    """Run the gain/disturbance grid; write sweep.csv in grid order."""
    params = config.acc_params
    out = Path(config.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        if not config.sweep_kappa or not config.sweep_theta:
            raise ConfigError("sweep grids must be nonempty")
        jobs = [
            (params, kap, bound, config.t_final, config.sweep_dt, config.x0)
            for kap in config.sweep_kappa
            for bound in config.sweep_theta
        ]
        workers = _sweep_workers()
        if workers > 1:
            with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
                cells = list(pool.map(_sweep_cell, jobs))
        else:
            cells = [_sweep_cell(job) for job in jobs]

        all_ok = all(cell.status == "ok" for cell in cells)
        header = ["kappa", "theta_bound", "min_h", "gamma_max",
                  "gamma_plus_min_h", "min_u_over_mg"]
        if all_ok:
            rows = (
                (c.kappa, c.theta_bound, c.min_h, c.gamma_max,
                 c.gamma_plus_min_h, c.min_u_over_mg)
                for c in cells
            )
        else:
            header = header + ["status"]
            rows = (
                (c.kappa, c.theta_bound,
                 c.min_h if c.status == "ok" else "",
                 c.gamma_max,
                 c.gamma_plus_min_h if c.status == "ok" else "",
                 c.min_u_over_mg if c.status == "ok" else "",
                 c.status)
                for c in cells
            )
            for cell in cells:
                if cell.status != "ok":
                    print(
                        f"cell kappa={cell.kappa} bound={cell.theta_bound}: "
                        f"{cell.status}",
                        file=sys.stderr,
                    )
        _write_csv(out / "sweep.csv", header, rows)
        return EXIT_OK if all_ok else EXIT_ERROR
    except (RuntimeError, ValueError, OSError) as exc:
        print(f"sweep failed: {exc}", file=sys.stderr)
        return EXIT_ERROR


def _random_p1_instance(rng: np.random.Generator, m: int) -> P1Instance:
    lg_h = rng.normal(size=m)
    while float(lg_h @ lg_h) < 0.09:
        lg_h = rng.normal(size=m)
    return P1Instance(
        lf_h=2.0 * rng.normal(), lg_h=lg_h, alpha_h=2.0 * rng.normal()
    )


def _random_p2_instance(rng: np.random.Generator, m: int) -> P2Instance:
    lg_h = rng.normal(size=m)
    while float(lg_h @ lg_h) < 0.09:
        lg_h = rng.normal(size=m)
    return P2Instance(
        lf_v=2.0 * rng.normal(),
        lg_v=rng.normal(size=m),
        c_v=2.0 * abs(rng.normal()),
        lf_h=2.0 * rng.normal(),
        lg_h=lg_h,
        alpha_h=2.0 * rng.normal(),
    )


def _p2_oracle(inst: P2Instance):
    m = inst.lg_h.size
    y1 = np.append(inst.lg_v, -1.0)
    y2 = np.append(-inst.lg_h, 0.0)
    rows = [(y1, -inst.lf_v - inst.c_v), (y2, inst.lf_h + inst.alpha_h)]
    return solve_weighted(
        WeightedObjective(2.0 * np.eye(m + 1), np.zeros(m + 1)), rows
    )


@dataclass
class _Check:
    name: str
    worst: float
    passed: bool


def cmd_verify(config: RunConfig, p1_solver=solve_p1, p2_solver=solve_p2) -> int:
    """Run the property suites and write verify.csv (one row per check).

    The solver arguments exist so tests can inject a broken solver and watch
    the oracle-equivalence check catch it.
    """
    out = Path(config.out_dir)
    if config.verify_corpus < 100:
        print(
            f"verify.corpus must be >= 100, got {config.verify_corpus}",
            file=sys.stderr,
        )
        return EXIT_ERROR
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"verify failed: {exc}", file=sys.stderr)
        return EXIT_ERROR

    rng = np.random.default_rng(config.seed)
    checks: list[_Check] = []

    def run_check(name: str, fn) -> None:
        try:
            worst, passed = fn()
        except Exception as exc:  # keep remaining checks running
            print(f"check {name} errored: {exc}", file=sys.stderr)
            worst, passed = math.inf, False
        checks.append(_Check(name, worst, passed))

    def p1_checks():
        worst_diff = 0.0
        worst_resid = 0.0
        for _ in range(config.verify_corpus):
            inst = _random_p1_instance(rng, int(rng.integers(1, 4)))
            res = p1_solver(inst)
            oracle = solve_weighted(
                WeightedObjective(2.0 * np.eye(inst.lg_h.size),
                                  np.zeros(inst.lg_h.size)),
                [(-inst.lg_h, inst.lf_h + inst.alpha_h)],
            )
            worst_diff = max(
                worst_diff,
                float(np.max(np.abs(res.minimizer - oracle.minimizer))),
            )
            constraint = (
                float(inst.lg_h @ res.minimizer) + inst.lf_h + inst.alpha_h
            )
            worst_resid = max(worst_resid, -constraint)
        return max(worst_diff, worst_resid), (
            worst_diff <= 1e-10 and worst_resid <= 1e-12
        )

    run_check("p1_vs_oracle", p1_checks)

    def p2_checks():
        worst = 0.0
        worst_mult = 0.0
        worst_kkt = 0.0
        for _ in range(config.verify_corpus):
            inst = _random_p2_instance(rng, int(rng.integers(1, 4)))
            res = p2_solver(inst)
            oracle = _p2_oracle(inst)
            worst = max(
                worst, float(np.max(np.abs(res.minimizer - oracle.minimizer)))
            )
            worst_mult = max(worst_mult, float(np.max(res.multipliers)))
            worst_kkt = max(worst_kkt, res.kkt_residual)
        checks.append(
            _Check("p2_multiplier_sign", worst_mult, worst_mult <= 1e-12)
        )
        checks.append(_Check("p2_kkt_residual", worst_kkt, worst_kkt <= 1e-8))
        return worst, worst <= 1e-8

    run_check("p2_vs_oracle", p2_checks)

    def lipschitz_check():
        from .acc import acc_control_vector_fn

        box = Box(np.array([10.0, 10.0, 5.0]), np.array([30.0, 30.0, 100.0]))
        fn = acc_control_vector_fn(config.acc_params)
        base = estimate_lipschitz(fn, box, config.verify_pairs, seed=config.seed)
        fine = estimate_lipschitz(
            fn, box, 10 * config.verify_pairs, seed=config.seed
        )
        if base.max_quotient <= 0.0 or not math.isfinite(fine.max_quotient):
            return math.inf, False
        ratio = fine.max_quotient / base.max_quotient
        return ratio, ratio <= 2.0

    run_check("lipschitz_refinement", lipschitz_check)

    def vc_check():
        params = config.acc_params
        gamma = iss_epsilon(params.kappa, params.grav, params.theta_amp)
        level = IssLevel.from_gamma(
            lambda z: iss_epsilon(params.kappa, params.grav, z), params.theta_amp
        )
        local_rng = np.random.default_rng(config.seed + 1)
        samples = []
        for _ in range(1000):
            v_l = local_rng.uniform(10.0, 30.0)
            v_f = local_rng.uniform(10.0, 30.0)
            h_target = -gamma - 0.01 - local_rng.uniform(0.0, 2.0)
            samples.append(
                np.array([v_l, v_f, params.tau_des * v_f + h_target])
            )
        report = check_vc_decrease(
            acc_system(params),
            acc_controller(params),
            acc_perturbation(params, perturbed=True),
            acc_barrier(params),
            level,
            samples,
        )
        return report.max_derivative, report.holds

    run_check("vc_decrease", vc_check)

    _write_csv(
        out / "verify.csv",
        ["check", "worst_residual", "status"],
        ((c.name, c.worst, "pass" if c.passed else "fail") for c in checks),
    )
    for c in checks:
        state = "pass" if c.passed else "FAIL"
        print(f"{c.name}: worst={c.worst:.6g} [{state}]")
    return EXIT_OK if all(c.passed for c in checks) else EXIT_ERROR


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="safefilter",
        description="Barrier-function safety filter experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("simulate", "sweep", "verify"):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="flat-key config file")
        p.add_argument("--out", default=None, help="output directory override")
    args = parser.parse_args(argv)

    try:
        config = default_config() if args.config is None else load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    if args.out is not None:
        config = replace(config, out_dir=args.out)

    if args.command == "simulate":
        return cmd_simulate(config)
    if args.command == "sweep":
        return cmd_sweep(config)
    return cmd_verify(config)


if __name__ == "__main__":
    sys.exit(main())
