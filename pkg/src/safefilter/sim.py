"""Fixed-step closed-loop simulation and robustness checkers.

The integrator is classical fourth-order Runge-Kutta with sample-and-hold
control: the controller is evaluated once per step and the input is held
constant across the step, which is how a pointwise QP controller is actually
deployed. Distinct trajectories may be simulated concurrently; nothing here
shares mutable state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional, Sequence

import numpy as np

from .core import (
    Box,
    ConfigurationError,
    ControlAffineSystem,
    ControlLyapunovSpec,
    ZeroingBarrier,
    vc_value,
)
from .qp import QPResult

__all__ = [
    "DivergenceError",
    "PerturbationBoundError",
    "SimulationAborted",
    "PerturbationKind",
    "Perturbation",
    "Trajectory",
    "IssLevel",
    "InvarianceReport",
    "DecreaseReport",
    "LipschitzEstimate",
    "iss_epsilon",
    "simulate",
    "check_forward_invariance",
    "check_vc_decrease",
    "estimate_lipschitz",
]

Controller = Callable[[np.ndarray], tuple[np.ndarray, float, Optional[QPResult]]]


class DivergenceError(RuntimeError):
    """State became non-finite during integration."""

    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


class PerturbationBoundError(RuntimeError):
    """A non-vanishing perturbation exceeded its declared sup-norm bound."""


class SimulationAborted(RuntimeError):
    """Controller failed mid-trajectory; carries the partial trajectory."""

    def __init__(self, message: str, step: int, partial: "Trajectory"):
        super().__init__(message)
        self.step = step
        self.partial = partial


class PerturbationKind(Enum):
    NONE = "none"
    VANISHING = "vanishing"
    NON_VANISHING = "non_vanishing"


@dataclass(frozen=True)
class Perturbation:
    """Additive disturbance on the state velocity.

    Vanishing perturbations are state fields that shrink near the safe set;
    non-vanishing ones are time fields with a declared sup-norm bound, checked
    at every field evaluation during simulation. ``channel`` optionally names
    the direction of the uncertain part together with a bound on its scalar
    magnitude, which the worst-case decrease check exploits; without it the
    check falls back to the conservative Euclidean bound.
    """

    kind: PerturbationKind
    state_field: Optional[Callable[[np.ndarray], np.ndarray]] = None
    time_field: Optional[Callable[[float], np.ndarray]] = None
    bound: float = 0.0
    channel: Optional[np.ndarray] = None
    channel_bound: float = 0.0

    @classmethod
    def none(cls) -> "Perturbation":
        return cls(PerturbationKind.NONE)

    @classmethod
    def vanishing(cls, field_fn: Callable[[np.ndarray], np.ndarray]) -> "Perturbation":
        return cls(PerturbationKind.VANISHING, state_field=field_fn)

    @classmethod
    def non_vanishing(
        cls,
        field_fn: Callable[[float], np.ndarray],
        bound: float,
        channel: Optional[np.ndarray] = None,
        channel_bound: Optional[float] = None,
    ) -> "Perturbation":
        if bound < 0:
            raise ConfigurationError(f"bound must be >= 0, got {bound}")
        ch = None if channel is None else np.asarray(channel, dtype=float).reshape(-1)
        cb = bound if channel_bound is None else float(channel_bound)
        return cls(
            PerturbationKind.NON_VANISHING,
            time_field=field_fn,
            bound=float(bound),
            channel=ch,
            channel_bound=cb,
        )


@dataclass
class Trajectory:
    """Uniformly sampled record of a closed-loop run.

    All arrays share the same length and ``times[i] = i * dt`` exactly. Inputs,
    relaxations and KKT residuals at index i are the controller outputs at
    ``states[i]``. Certificate columns are NaN when the corresponding
    certificate was not supplied to ``simulate``.
    """

    dt: float
    times: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    deltas: np.ndarray
    h_values: np.ndarray
    v_values: np.ndarray
    vc_values: np.ndarray
    kkt_residuals: np.ndarray

    def __len__(self) -> int:
        return self.times.size


@dataclass(frozen=True)
class IssLevel:
    """Relaxed-safe-set level induced by a disturbance bound.

    ``epsilon = gamma_fn(disturbance_bound)`` is the inflation of the safe set
    that remains attractive under disturbances of that size.
    """

    gamma_fn: Callable[[float], float]
    disturbance_bound: float
    epsilon: float

    @classmethod
    def from_gamma(
        cls, gamma_fn: Callable[[float], float], disturbance_bound: float
    ) -> "IssLevel":
        if disturbance_bound < 0:
            raise ConfigurationError(
                f"disturbance_bound must be >= 0, got {disturbance_bound}"
            )
        return cls(gamma_fn, disturbance_bound, float(gamma_fn(disturbance_bound)))


def iss_epsilon(kappa: float, grav: float, disturbance_bound: float) -> float:
    """Safe-set inflation for the cruise-control disturbance gain.

    Evaluates ``1.8 * grav * disturbance_bound / kappa``, the class-K gain of
    the headway barrier under a road-grade disturbance of the given amplitude.
    """
    if kappa <= 0:
        raise ConfigurationError(f"kappa must be > 0, got {kappa}")
    if grav <= 0:
        raise ConfigurationError(f"grav must be > 0, got {grav}")
    if disturbance_bound < 0:
        raise ConfigurationError(
            f"disturbance_bound must be >= 0, got {disturbance_bound}"
        )
    return 1.8 * grav * disturbance_bound / kappa


def _perturbation_field(pert: Perturbation, n: int):
    """Bind the perturbation into a (t, x) -> velocity closure for the loop."""
    if pert.kind is PerturbationKind.NONE:
        zero = np.zeros(n)
        return lambda t, x: zero
    if pert.kind is PerturbationKind.VANISHING:
        state_field = pert.state_field
        return lambda t, x: np.asarray(state_field(x), dtype=float)
    time_field = pert.time_field
    bound = pert.bound
    bound_sq = (bound + 1e-9) ** 2

    def field(t: float, x: np.ndarray) -> np.ndarray:
        g2 = time_field(t)
        if float(g2 @ g2) > bound_sq:
            raise PerturbationBoundError(
                f"perturbation norm {float(np.linalg.norm(g2))} exceeds "
                f"declared bound {bound} at t={t}"
            )
        return g2

    return field


def simulate(
    system: ControlAffineSystem,
    controller: Controller,
    perturbation: Perturbation,
    x0: np.ndarray,
    t_final: float,
    dt: float,
    barrier: Optional[ZeroingBarrier] = None,
    clf: Optional[ControlLyapunovSpec] = None,
) -> Trajectory:
    """Integrate the closed loop and record the trajectory.

    The controller maps a state to ``(u, delta, qp_result)``; ``qp_result``
    may be None for open-loop inputs, in which case the recorded KKT residual
    is 0. Raises ``SimulationAborted`` (carrying the partial trajectory) if
    the controller fails mid-run and ``DivergenceError`` if the state becomes
    non-finite.
    """
    if dt <= 0:
        raise ConfigurationError(f"dt must be > 0, got {dt}")
    if t_final < dt:
        raise ConfigurationError(f"t_final must be >= dt, got {t_final} < {dt}")
    n = system.state_dim
    m = system.input_dim
    n_steps = int(round(t_final / dt))
    drift = system.drift
    gmat = system.control_matrix

    times = np.arange(n_steps + 1) * dt
    states = np.empty((n_steps + 1, n))
    inputs = np.empty((n_steps + 1, m))
    deltas = np.empty(n_steps + 1)
    kkts = np.empty(n_steps + 1)

    x = np.asarray(x0, dtype=float).copy()
    if x.shape != (n,):
        raise ConfigurationError(f"x0 has shape {x.shape}, expected ({n},)")

    pert_at = _perturbation_field(perturbation, n)
    half = 0.5 * dt
    sixth = dt / 6.0
    for k in range(n_steps + 1):
        states[k] = x
        try:
            u, delta, result = controller(x)
        except (RuntimeError, ConfigurationError) as exc:
            partial = _finalize(
                dt, times[:k], states[:k], inputs[:k], deltas[:k], kkts[:k],
                barrier, clf,
            )
            raise SimulationAborted(
                f"controller failed at step {k} (t={times[k]}): {exc}", k, partial
            ) from exc
        u = np.asarray(u, dtype=float).reshape(-1)
        inputs[k] = u
        deltas[k] = delta
        kkts[k] = 0.0 if result is None else result.kkt_residual
        if k == n_steps:
            break

        t = times[k]
        k1 = drift(x) + gmat(x) @ u + pert_at(t, x)
        x2 = x + half * k1
        k2 = drift(x2) + gmat(x2) @ u + pert_at(t + half, x2)
        x3 = x + half * k2
        k3 = drift(x3) + gmat(x3) @ u + pert_at(t + half, x3)
        x4 = x + dt * k3
        k4 = drift(x4) + gmat(x4) @ u + pert_at(t + dt, x4)
        x = x + sixth * (k1 + 2.0 * (k2 + k3) + k4)
        # sum is non-finite whenever any component is (inf - inf gives nan)
        if not math.isfinite(float(x.sum())):
            raise DivergenceError(
                f"state became non-finite at step {k + 1} (t={t + dt})", k + 1
            )

    return _finalize(dt, times, states, inputs, deltas, kkts, barrier, clf)


def _finalize(dt, times, states, inputs, deltas, kkts, barrier, clf) -> Trajectory:
    n_rows = times.size
    if barrier is not None:
        h_vals = np.array([barrier.value(s) for s in states])
        vc_vals = np.maximum(0.0, -h_vals)
    else:
        h_vals = np.full(n_rows, np.nan)
        vc_vals = np.full(n_rows, np.nan)
    if clf is not None:
        v_vals = np.array([clf.value(s) for s in states])
    else:
        v_vals = np.full(n_rows, np.nan)
    return Trajectory(dt, times, states, inputs, deltas, h_vals, v_vals, vc_vals, kkts)


@dataclass(frozen=True)
class InvarianceReport:
    holds: bool
    min_h: float
    first_violation_time: Optional[float]


def check_forward_invariance(
    traj: Trajectory, epsilon: float = 0.0, tol: float = 0.0
) -> InvarianceReport:
    """Whether the recorded run stayed in the relaxed safe set {h >= -epsilon}."""
    if len(traj) == 0:
        raise ConfigurationError("trajectory is empty")
    h = traj.h_values
    min_h = float(np.min(h))
    threshold = -epsilon - tol
    if min_h >= threshold:
        return InvarianceReport(True, min_h, None)
    first = int(np.argmax(h < threshold))
    return InvarianceReport(False, min_h, float(traj.times[first]))


@dataclass(frozen=True)
class DecreaseReport:
    n_checked: int
    n_skipped: int
    max_derivative: float
    violations: list = field(default_factory=list)

    @property
    def holds(self) -> bool:
        return self.n_checked > 0 and not self.violations


def check_vc_decrease(
    system: ControlAffineSystem,
    controller: Controller,
    perturbation: Perturbation,
    barrier: ZeroingBarrier,
    level: IssLevel,
    sample_states: Sequence[np.ndarray],
) -> DecreaseReport:
    """Check that V_C strictly decreases outside the inflated safe set.

    At each sample outside {h >= -level.epsilon}, evaluates the directional
    derivative of V_C along the closed-loop field under the worst-case
    disturbance admitted by the perturbation's declared bound, and reports any
    sample where it fails to be negative. Samples inside the set are skipped
    (V_C is locally zero there).
    """
    n = system.state_dim
    n_checked = 0
    n_skipped = 0
    worst = -np.inf
    violations = []
    for x in sample_states:
        x = np.asarray(x, dtype=float)
        if barrier.value(x) >= -level.epsilon:
            n_skipped += 1
            continue
        u, _, _ = controller(x)
        u = np.asarray(u, dtype=float).reshape(-1)
        grad_vc = -barrier.gradient(x)  # V_C = -h outside the safe set
        base = float(grad_vc @ (system.drift_at(x) + system.control_matrix_at(x) @ u))
        if perturbation.kind is PerturbationKind.NONE:
            extra = 0.0
        elif perturbation.kind is PerturbationKind.VANISHING:
            extra = float(grad_vc @ np.asarray(perturbation.state_field(x), float))
        elif perturbation.channel is not None:
            extra = abs(float(grad_vc @ perturbation.channel)) * perturbation.channel_bound
        else:
            extra = float(np.linalg.norm(grad_vc)) * perturbation.bound
        derivative = base + extra
        n_checked += 1
        worst = max(worst, derivative)
        if derivative >= 0.0:
            violations.append((x, derivative))
    return DecreaseReport(n_checked, n_skipped, worst, violations)


@dataclass(frozen=True)
class LipschitzEstimate:
    max_quotient: float
    argmax_pair: Optional[tuple[np.ndarray, np.ndarray]]
    n_pairs: int
    n_failures: int


_NEIGHBOR_SCALES = (1e-2, 1e-3, 1e-4, 1e-5, 1e-6)


def estimate_lipschitz(
    control_fn: Callable[[np.ndarray], np.ndarray],
    box: Box,
    n_pairs: int,
    seed: int = 0,
) -> LipschitzEstimate:
    """Largest sampled difference quotient of a control law over a box.

    Half the pairs are independent uniform draws; the other half pair a
    uniform draw with a nearby point at scales from 1e-2 down to 1e-6, which
    probes local (not just global) variation. Solver failures at a sample are
    counted and excluded.
    """
    if n_pairs <= 0:
        raise ConfigurationError(f"n_pairs must be positive, got {n_pairs}")
    rng = np.random.default_rng(seed)
    max_q = 0.0
    argmax = None
    failures = 0
    evaluated = 0
    for i in range(n_pairs):
        a = box.sample(rng)[0]
        if i % 2 == 0:
            b = box.sample(rng)[0]
        else:
            scale = _NEIGHBOR_SCALES[(i // 2) % len(_NEIGHBOR_SCALES)]
            direction = rng.standard_normal(box.dim)
            norm = float(np.linalg.norm(direction))
            if norm == 0.0:
                continue
            b = box.clip(a + (scale / norm) * direction)
        dist = float(np.linalg.norm(a - b))
        if dist == 0.0:
            continue
        try:
            ua = np.asarray(control_fn(a), dtype=float).reshape(-1)
            ub = np.asarray(control_fn(b), dtype=float).reshape(-1)
        except RuntimeError:
            failures += 1
            continue
        evaluated += 1
        q = float(np.linalg.norm(ua - ub)) / dist
        if q > max_q:
            max_q = q
            argmax = (a, b)
    return LipschitzEstimate(max_q, argmax, evaluated, failures)
