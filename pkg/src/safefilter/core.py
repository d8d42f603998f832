"""Domain types for control-affine systems and barrier/Lyapunov certificates.

Everything here is an immutable value object built from plain callables over
numpy arrays, and every operation is a pure function of its arguments, so
concurrent use needs no locking. Gradients are supplied analytically by model
authors; ``finite_difference_gradient`` exists as a testing cross-check only.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "ConfigurationError",
    "ControlAffineSystem",
    "ClassKForm",
    "ExtendedClassK",
    "ZeroingBarrier",
    "ControlLyapunovSpec",
    "SafeSetFamily",
    "Box",
    "lie_derivatives",
    "zbf_residual",
    "zcbf_residual",
    "zcbf_admissible",
    "vc_value",
    "finite_difference_gradient",
]


class ConfigurationError(ValueError):
    """Inconsistent dimensions or invalid parameters."""


StateFn = Callable[[np.ndarray], np.ndarray]
ScalarFn = Callable[[np.ndarray], float]


@dataclass(frozen=True)
class ControlAffineSystem:
    """System of the form ``xdot = drift(x) + control_matrix(x) @ u``.

    ``drift`` maps a state vector of length ``state_dim`` to a state velocity;
    ``control_matrix`` maps it to a ``(state_dim, input_dim)`` matrix.
    """

    state_dim: int
    input_dim: int
    drift: StateFn
    control_matrix: StateFn

    def __post_init__(self) -> None:
        if self.state_dim <= 0 or self.input_dim <= 0:
            raise ConfigurationError(
                f"dimensions must be positive, got state_dim={self.state_dim}, "
                f"input_dim={self.input_dim}"
            )

    def drift_at(self, x: np.ndarray) -> np.ndarray:
        """Evaluate the drift field with shape checking."""
        f = np.asarray(self.drift(np.asarray(x, dtype=float)), dtype=float)
        if f.shape != (self.state_dim,):
            raise ConfigurationError(
                f"drift returned shape {f.shape}, expected ({self.state_dim},)"
            )
        return f

    def control_matrix_at(self, x: np.ndarray) -> np.ndarray:
        """Evaluate the control matrix with shape checking."""
        g = np.asarray(self.control_matrix(np.asarray(x, dtype=float)), dtype=float)
        if g.shape != (self.state_dim, self.input_dim):
            raise ConfigurationError(
                f"control matrix returned shape {g.shape}, expected "
                f"({self.state_dim}, {self.input_dim})"
            )
        return g


class ClassKForm(Enum):
    LINEAR = "linear"
    CUBIC = "cubic"
    CUSTOM = "custom"


@dataclass(frozen=True)
class ExtendedClassK:
    """Strictly increasing function through the origin, defined around 0.

    Negative arguments are permitted (the "extended" part). Monotonicity of a
    custom function is the caller's responsibility; ``is_strictly_increasing_on``
    checks it on a sampled grid.
    """

    evaluate: Callable[[float], float]
    form: ClassKForm = ClassKForm.CUSTOM
    gain: Optional[float] = None

    @classmethod
    def linear(cls, gain: float) -> "ExtendedClassK":
        if gain <= 0:
            raise ConfigurationError(f"linear class-K gain must be > 0, got {gain}")
        return cls(lambda r: gain * r, ClassKForm.LINEAR, gain)

    @classmethod
    def cubic(cls, gain: float) -> "ExtendedClassK":
        if gain <= 0:
            raise ConfigurationError(f"cubic class-K gain must be > 0, got {gain}")
        return cls(lambda r: gain * r * r * r, ClassKForm.CUBIC, gain)

    @classmethod
    def custom(cls, fn: Callable[[float], float]) -> "ExtendedClassK":
        return cls(fn, ClassKForm.CUSTOM, None)

    def __call__(self, r: float) -> float:
        return self.evaluate(r)

    def is_strictly_increasing_on(self, grid: Sequence[float]) -> bool:
        values = [self.evaluate(float(r)) for r in sorted(grid)]
        return all(a < b for a, b in zip(values, values[1:]))


@dataclass(frozen=True)
class ZeroingBarrier:
    """Scalar certificate h with safe set {h >= 0}, vanishing on the boundary.

    ``grad_h`` returns the row vector of partial derivatives; ``alpha`` is the
    extended class-K function used in the barrier inequality
    ``L_f h + L_g h u + alpha(h) >= 0``.
    """

    h: ScalarFn
    grad_h: StateFn
    alpha: ExtendedClassK

    def value(self, x: np.ndarray) -> float:
        return float(self.h(np.asarray(x, dtype=float)))

    def gradient(self, x: np.ndarray) -> np.ndarray:
        g = np.asarray(self.grad_h(np.asarray(x, dtype=float)), dtype=float)
        return g.reshape(-1)


@dataclass(frozen=True)
class ControlLyapunovSpec:
    """Nonnegative objective certificate V with decay-rate constant c.

    Encodes the stabilization inequality ``L_f V + L_g V u + c V < 0``.
    """

    V: ScalarFn
    grad_V: StateFn
    rate_c: float

    def __post_init__(self) -> None:
        if self.rate_c <= 0:
            raise ConfigurationError(f"rate_c must be > 0, got {self.rate_c}")

    def value(self, x: np.ndarray) -> float:
        return float(self.V(np.asarray(x, dtype=float)))

    def gradient(self, x: np.ndarray) -> np.ndarray:
        g = np.asarray(self.grad_V(np.asarray(x, dtype=float)), dtype=float)
        return g.reshape(-1)


@dataclass(frozen=True)
class SafeSetFamily:
    """Nested family of relaxed safe sets {x : h(x) >= -eps}, eps >= 0."""

    barrier: ZeroingBarrier
    epsilon: float = 0.0

    def __post_init__(self) -> None:
        if self.epsilon < 0:
            raise ConfigurationError(f"epsilon must be >= 0, got {self.epsilon}")

    def membership(self, x: np.ndarray, epsilon: Optional[float] = None) -> bool:
        eps = self.epsilon if epsilon is None else float(epsilon)
        if eps < 0:
            raise ConfigurationError(f"epsilon must be >= 0, got {eps}")
        return self.barrier.value(x) >= -eps


@dataclass(frozen=True)
class Box:
    """Axis-aligned box, the working representation of the state domain."""

    lows: np.ndarray
    highs: np.ndarray

    def __post_init__(self) -> None:
        lows = np.asarray(self.lows, dtype=float).reshape(-1)
        highs = np.asarray(self.highs, dtype=float).reshape(-1)
        if lows.shape != highs.shape or lows.size == 0:
            raise ConfigurationError("box bounds must be nonempty and congruent")
        if np.any(lows >= highs):
            raise ConfigurationError("box requires lows < highs componentwise")
        object.__setattr__(self, "lows", lows)
        object.__setattr__(self, "highs", highs)

    @property
    def dim(self) -> int:
        return self.lows.size

    def contains(self, x: np.ndarray) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lows) and np.all(x <= self.highs))

    def sample(self, rng: np.random.Generator, n: int = 1) -> np.ndarray:
        return rng.uniform(self.lows, self.highs, size=(n, self.dim))

    def clip(self, x: np.ndarray) -> np.ndarray:
        return np.clip(np.asarray(x, dtype=float), self.lows, self.highs)


def lie_derivatives(
    barrier: ZeroingBarrier, system: ControlAffineSystem, x: np.ndarray
) -> tuple[float, np.ndarray]:
    """Directional derivatives of h along the drift and control fields.

    Returns ``(Lf_h, Lg_h)`` where ``Lf_h = grad_h(x) @ drift(x)`` and
    ``Lg_h = grad_h(x) @ control_matrix(x)`` (a row of length ``input_dim``).
    """
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ConfigurationError(f"state must be finite, got {x}")
    grad = barrier.gradient(x)
    if grad.shape != (system.state_dim,):
        raise ConfigurationError(
            f"grad_h has shape {grad.shape}, expected ({system.state_dim},)"
        )
    f = system.drift_at(x)
    g = system.control_matrix_at(x)
    return float(grad @ f), grad @ g


def zbf_residual(
    barrier: ZeroingBarrier, system: ControlAffineSystem, x: np.ndarray
) -> float:
    """Value of ``L_f h(x) + alpha(h(x))`` for the uncontrolled system.

    Nonnegative exactly when the barrier inequality holds at x.
    """
    lf_h, _ = lie_derivatives(barrier, system, x)
    return lf_h + barrier.alpha(barrier.value(x))


def zcbf_residual(
    barrier: ZeroingBarrier,
    system: ControlAffineSystem,
    x: np.ndarray,
    u: np.ndarray,
) -> float:
    """Value of ``L_f h + L_g h u + alpha(h)`` at (x, u)."""
    lf_h, lg_h = lie_derivatives(barrier, system, x)
    u = np.asarray(u, dtype=float).reshape(-1)
    if u.shape != (system.input_dim,):
        raise ConfigurationError(
            f"input has shape {u.shape}, expected ({system.input_dim},)"
        )
    return lf_h + float(lg_h @ u) + barrier.alpha(barrier.value(x))


def zcbf_admissible(
    barrier: ZeroingBarrier,
    system: ControlAffineSystem,
    x: np.ndarray,
    u: np.ndarray,
    tol: float = 0.0,
) -> bool:
    """Whether u satisfies the barrier inequality at x (within tol)."""
    return zcbf_residual(barrier, system, x, u) >= -tol


def vc_value(barrier: ZeroingBarrier, x: np.ndarray) -> float:
    """Lyapunov value induced by the barrier: 0 inside the safe set, -h outside."""
    return max(0.0, -barrier.value(x))


def finite_difference_gradient(
    f: ScalarFn, x: np.ndarray, step: Optional[float] = None
) -> np.ndarray:
    """Central finite-difference gradient, for testing analytic gradients.

    Step defaults to ``1e-6 * (1 + |x_i|)`` per coordinate.
    """
    x = np.asarray(x, dtype=float)
    grad = np.empty_like(x)
    for i in range(x.size):
        h_i = step if step is not None else 1e-6 * (1.0 + abs(x[i]))
        xp = x.copy()
        xm = x.copy()
        xp[i] += h_i
        xm[i] -= h_i
        grad[i] = (float(f(xp)) - float(f(xm))) / (2.0 * h_i)
    return grad
