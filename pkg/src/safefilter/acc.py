"""Adaptive cruise control case study.

Point-mass longitudinal model: state ``x = (v_l, v_f, D)`` with lead speed,
following speed and gap. The follower tracks a desired speed while a
time-headway barrier ``h = D - tau_des * v_f`` keeps the gap safe. The
controller solves, pointwise in x, a weighted QP over ``(u, delta)`` whose
hard constraint is the barrier inequality and whose soft (relaxed)
constraint is the speed-tracking decrease condition. Road grade enters as a
bounded sinusoidal disturbance on the follower acceleration; the lead car's
acceleration profile is a known time-varying term carried in the same
additive time field.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .core import (
    ConfigurationError,
    ControlAffineSystem,
    ControlLyapunovSpec,
    ExtendedClassK,
    ZeroingBarrier,
)
from .qp import QPResult, WeightedObjective, solve_weighted
from .sim import Perturbation, Trajectory, iss_epsilon, simulate

__all__ = [
    "LeadProfile",
    "AccParams",
    "AccState",
    "AccQpData",
    "SweepCell",
    "DEFAULT_X0",
    "default_lead_profile",
    "drag_force",
    "road_grade",
    "acc_dynamics",
    "acc_system",
    "acc_perturbation",
    "acc_barrier",
    "acc_clf",
    "acc_qp_matrices",
    "acc_controller",
    "acc_control_vector_fn",
    "simulate_acc",
    "run_tradeoff_sweep",
]

DEFAULT_X0 = (20.0, 18.0, 80.0)


@dataclass(frozen=True)
class LeadProfile:
    """Piecewise-constant lead acceleration: ``accels[i]`` on [times[i], times[i+1])."""

    times: tuple
    accels: tuple

    def __post_init__(self) -> None:
        times = tuple(float(t) for t in self.times)
        accels = tuple(float(a) for a in self.accels)
        if len(times) != len(accels) or not times:
            raise ConfigurationError("lead profile needs equal, nonempty times/accels")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ConfigurationError("lead profile times must be strictly increasing")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "accels", accels)

    def __call__(self, t: float) -> float:
        a = self.accels[0]
        for t_i, a_i in zip(self.times, self.accels):
            if t < t_i:
                break
            a = a_i
        return a

    @property
    def max_abs(self) -> float:
        return max(abs(a) for a in self.accels)


def default_lead_profile() -> LeadProfile:
    """Cruise, brake for five seconds, cruise again.

    Exercises both the speed-tracking phase and the safety-braking phase in a
    single run.
    """
    return LeadProfile((0.0, 15.0, 20.0), (0.0, -1.0, 0.0))


@dataclass(frozen=True)
class AccParams:
    """Vehicle, certificate and scenario constants.

    ``m`` [kg] and drag coefficients ``f0`` [N], ``f1`` [N s/m], ``f2``
    [N s^2/m^2] define the follower; ``v_d`` [m/s] is the desired speed,
    ``tau_des`` [s] the time headway, ``kappa`` [1/s] the barrier gain, ``c``
    [1/s] the tracking decay rate and ``p_sc`` the relaxation weight.
    ``theta_amp`` and ``theta_period`` [s] shape the road-grade disturbance
    ``theta_amp * cos(2 pi t / theta_period)``.
    """

    m: float = 1650.0
    f0: float = 0.1
    f1: float = 5.0
    f2: float = 0.25
    grav: float = 9.81
    v_d: float = 22.0
    tau_des: float = 1.8
    kappa: float = 5.0
    c: float = 1.0
    p_sc: float = 100.0
    lead_profile: LeadProfile = field(default_factory=default_lead_profile)
    theta_amp: float = 0.1
    theta_period: float = 20.0

    def __post_init__(self) -> None:
        if self.m <= 0:
            raise ConfigurationError(f"m must be > 0, got {self.m}")
        if min(self.f0, self.f1, self.f2) < 0:
            raise ConfigurationError("drag coefficients must be >= 0")
        if self.tau_des <= 0:
            raise ConfigurationError(f"tau_des must be > 0, got {self.tau_des}")
        if self.kappa <= 0:
            raise ConfigurationError(f"kappa must be > 0, got {self.kappa}")
        if self.c <= 0:
            raise ConfigurationError(f"c must be > 0, got {self.c}")
        if self.p_sc <= 0:
            raise ConfigurationError(f"p_sc must be > 0, got {self.p_sc}")
        if self.grav <= 0:
            raise ConfigurationError(f"grav must be > 0, got {self.grav}")
        if self.theta_amp < 0:
            raise ConfigurationError(f"theta_amp must be >= 0, got {self.theta_amp}")
        if self.theta_period <= 0:
            raise ConfigurationError(
                f"theta_period must be > 0, got {self.theta_period}"
            )


@dataclass(frozen=True)
class AccState:
    """Lead speed, follower speed, gap. Negative gap means safety was violated."""

    v_l: float
    v_f: float
    D: float

    def as_array(self) -> np.ndarray:
        return np.array([self.v_l, self.v_f, self.D])

    @classmethod
    def from_array(cls, x: np.ndarray) -> "AccState":
        v_l, v_f, d = np.asarray(x, dtype=float).reshape(3)
        return cls(float(v_l), float(v_f), float(d))

    @property
    def negative_gap(self) -> bool:
        return self.D < 0.0


def _as_state_array(x) -> np.ndarray:
    if isinstance(x, AccState):
        return x.as_array()
    return np.asarray(x, dtype=float).reshape(3)


def drag_force(params: AccParams, v_f: float) -> float:
    """Aerodynamic and rolling drag ``f0 + f1 v + f2 v^2`` [N]."""
    return params.f0 + v_f * (params.f1 + params.f2 * v_f)


def road_grade(params: AccParams, t: float) -> float:
    return params.theta_amp * math.cos(2.0 * math.pi * t / params.theta_period)


def acc_dynamics(
    params: AccParams, x, u: float, t: float, perturbed: bool
) -> np.ndarray:
    """Full state velocity, including lead acceleration and (optionally) grade."""
    v_l, v_f, _ = _as_state_array(x)
    fr = drag_force(params, v_f)
    dv_f = (float(u) - fr) / params.m
    if perturbed:
        dv_f += params.grav * road_grade(params, t)
    return np.array([params.lead_profile(t), dv_f, v_l - v_f])


def acc_system(params: AccParams) -> ControlAffineSystem:
    """Nominal control-affine model the certificates and QP are built on.

    The drift holds the state-dependent part (drag and gap closure); the lead
    acceleration and grade disturbance are time-only terms and live in the
    perturbation field (see ``acc_perturbation``). Neither enters the barrier
    or tracking constraint rows, because h and V do not depend on v_l.
    """
    m = params.m
    f0, f1, f2 = params.f0, params.f1, params.f2
    b_column = np.array([[0.0], [1.0 / m], [0.0]])

    def drift(x: np.ndarray) -> np.ndarray:
        v_l = x[0]
        v_f = x[1]
        return np.array([0.0, -(f0 + v_f * (f1 + f2 * v_f)) / m, v_l - v_f])

    def control_matrix(x: np.ndarray) -> np.ndarray:
        return b_column

    return ControlAffineSystem(3, 1, drift, control_matrix)


def acc_perturbation(params: AccParams, perturbed: bool) -> Perturbation:
    """Time field carrying the lead acceleration and, if perturbed, the grade.

    The declared sup-norm bound covers both terms; the uncertainty channel is
    the follower-acceleration slot with scalar bound ``grav * theta_amp``,
    which is what the worst-case decrease analysis uses.
    """
    profile = params.lead_profile
    grade_gain = params.grav * params.theta_amp if perturbed else 0.0
    two_pi_over_period = 2.0 * math.pi / params.theta_period

    def g2(t: float) -> np.ndarray:
        return np.array(
            [profile(t), grade_gain * math.cos(two_pi_over_period * t), 0.0]
        )

    bound = math.hypot(profile.max_abs, grade_gain)
    return Perturbation.non_vanishing(
        g2, bound, channel=np.array([0.0, 1.0, 0.0]), channel_bound=grade_gain
    )


def acc_barrier(params: AccParams) -> ZeroingBarrier:
    """Time-headway barrier ``h = D - tau_des * v_f`` with linear alpha."""
    tau = params.tau_des
    grad = np.array([0.0, -tau, 1.0])
    return ZeroingBarrier(
        h=lambda x: x[2] - tau * x[1],
        grad_h=lambda x: grad,
        alpha=ExtendedClassK.linear(params.kappa),
    )


def acc_clf(params: AccParams) -> ControlLyapunovSpec:
    """Speed-tracking certificate ``V = (v_f - v_d)^2``."""
    v_d = params.v_d
    return ControlLyapunovSpec(
        V=lambda x: (x[1] - v_d) ** 2,
        grad_V=lambda x: np.array([0.0, 2.0 * (x[1] - v_d), 0.0]),
        rate_c=params.c,
    )


@dataclass(frozen=True)
class AccQpData:
    """Objective and constraint rows of the pointwise QP at one state.

    Constraints read ``A @ (u, delta) <= b``. Both rows are derived directly
    from the certificate inequalities applied to the nominal dynamics
    (the barrier inequality is a lower bound on h's derivative, so its "<="
    row is the negated admissibility inequality).
    """

    H: np.ndarray
    F: np.ndarray
    A_clf: np.ndarray
    b_clf: float
    A_zcbf: np.ndarray
    b_zcbf: float


def acc_qp_matrices(params: AccParams, x) -> AccQpData:
    x = _as_state_array(x)
    v_l, v_f, d = x
    m = params.m
    tau = params.tau_des
    fr = drag_force(params, v_f)
    e_v = v_f - params.v_d
    h = d - tau * v_f

    H = np.array([[2.0 / m**2, 0.0], [0.0, 2.0 * params.p_sc]])
    F = np.array([-2.0 * fr / m**2, 0.0])
    a_clf = np.array([2.0 * e_v / m, -1.0])
    b_clf = 2.0 * e_v * fr / m - params.c * e_v * e_v
    a_zcbf = np.array([tau / m, 0.0])
    b_zcbf = tau * fr / m + (v_l - v_f) + params.kappa * h
    return AccQpData(H, F, a_clf, b_clf, a_zcbf, b_zcbf)


def acc_controller(params: AccParams) -> Callable:
    """Pointwise QP feedback; returns a closure usable by ``sim.simulate``.

    Per state, assembles the QP data and solves the weighted program; the
    returned triple is ``(u, delta, qp_result)``. Total on all of the state
    space because the barrier row's input coefficient is the constant
    ``tau_des / m != 0``.
    """
    base = WeightedObjective(
        np.array([[2.0 / params.m**2, 0.0], [0.0, 2.0 * params.p_sc]]),
        np.zeros(2),
    )

    def control(x: np.ndarray):
        data = acc_qp_matrices(params, x)
        result = solve_weighted(
            base.with_linear_term(data.F),
            [(data.A_clf, data.b_clf), (data.A_zcbf, data.b_zcbf)],
        )
        return result.minimizer[:1], float(result.minimizer[1]), result

    return control


def acc_control_vector_fn(params: AccParams) -> Callable[[np.ndarray], np.ndarray]:
    """The controller as a plain state -> (u, delta) map, for Lipschitz probing."""
    control = acc_controller(params)

    def fn(x: np.ndarray) -> np.ndarray:
        return control(x)[2].minimizer

    return fn


def simulate_acc(
    params: AccParams,
    x0=DEFAULT_X0,
    t_final: float = 60.0,
    dt: float = 1e-3,
    perturbed: bool = True,
) -> Trajectory:
    """Closed-loop run of the cruise-control scenario."""
    return simulate(
        acc_system(params),
        acc_controller(params),
        acc_perturbation(params, perturbed),
        _as_state_array(x0),
        t_final,
        dt,
        barrier=acc_barrier(params),
        clf=acc_clf(params),
    )


@dataclass(frozen=True)
class SweepCell:
    kappa: float
    theta_bound: float
    min_h: float
    gamma_max: float
    gamma_plus_min_h: float
    min_u_over_mg: float
    status: str = "ok"


def run_tradeoff_sweep(
    params: AccParams,
    kappa_grid: Sequence[float],
    theta_bounds: Sequence[float],
    t_final: float,
    dt: float,
    x0=DEFAULT_X0,
) -> list[SweepCell]:
    """Grid of runs over barrier gain and disturbance amplitude.

    Each cell simulates the perturbed scenario and records the worst headway
    margin, the predicted inflation gamma_max, their sum (positive means the
    run stayed inside the inflated safe set) and the peak braking effort as a
    fraction of m*g. Failing cells are recorded with an error status and the
    sweep continues.
    """
    if not kappa_grid or not theta_bounds:
        raise ConfigurationError("sweep grids must be nonempty")
    cells = []
    mg = params.m * params.grav
    for kap in kappa_grid:
        for bound in theta_bounds:
            gamma = iss_epsilon(kap, params.grav, bound)
            cell_params = replace(params, kappa=kap, theta_amp=bound)
            try:
                traj = simulate_acc(cell_params, x0, t_final, dt, perturbed=True)
                min_h = float(np.min(traj.h_values))
                min_u = float(np.min(traj.inputs[:, 0]))
                cells.append(
                    SweepCell(kap, bound, min_h, gamma, gamma + min_h, min_u / mg)
                )
            except (RuntimeError, ConfigurationError) as exc:
                cells.append(
                    SweepCell(
                        kap, bound, math.nan, gamma, math.nan, math.nan,
                        status=f"failed: {exc}",
                    )
                )
    return cells
