"""Closed-form and enumeration solvers for small min-norm quadratic programs.

Two problem families are covered. The barrier-only program minimizes ``u'u``
subject to the single barrier inequality and has a two-branch closed form
(``solve_p1``). The combined program minimizes ``u'u + delta**2`` over the
augmented variable ``(u, delta)`` subject to a relaxed stabilization
constraint and a hard barrier constraint; its closed form goes through the
2x2 Gram matrix of the constraint normals (``solve_p2``). Both are
cross-checkable against ``solve_weighted``, an exact active-set enumeration
for strictly convex objectives with at most two inequality constraints.

Sign conventions. ``solve_p1`` and ``solve_p2`` report multipliers lambda <= 0
such that the minimizer equals ``sum(lambda_i * y_i)`` over the constraint
normals in "<=" form. ``solve_weighted`` reports standard nonnegative KKT
multipliers for constraints ``a @ z <= b``, which is also the convention
``kkt_verify`` scores.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .core import ConfigurationError

__all__ = [
    "RelativeDegreeError",
    "InfeasibleError",
    "SolverConsistencyError",
    "Branch",
    "QPResult",
    "P1Instance",
    "P2Instance",
    "WeightedObjective",
    "MIN_LG_H_NORM",
    "KKT_TOL",
    "solve_p1",
    "solve_p2",
    "solve_weighted",
    "kkt_verify",
]

# Below this norm of Lg_h, solving is refused rather than regularized: the
# closed forms require the barrier to have relative degree one.
MIN_LG_H_NORM = 1e-10

# Maximum acceptable KKT residual for any result this module emits.
KKT_TOL = 1e-8

_ACCEPT_TOL = 1e-9


class RelativeDegreeError(RuntimeError):
    """Lg_h (numerically) zero where a closed form needs it nonzero."""


class InfeasibleError(RuntimeError):
    """The constraint set is empty (antiparallel normals, empty slab)."""


class SolverConsistencyError(RuntimeError):
    """A closed-form result failed its KKT check; carries both answers."""

    def __init__(self, message: str, closed_form: np.ndarray, oracle: np.ndarray):
        super().__init__(message)
        self.closed_form = closed_form
        self.oracle = oracle


class Branch(Enum):
    INACTIVE = "inactive"
    CBF_ACTIVE = "cbf_active"
    CLF_ACTIVE = "clf_active"
    BOTH_ACTIVE = "both_active"


@dataclass(frozen=True)
class QPResult:
    """Minimizer plus optimality evidence.

    ``minimizer`` is u for the barrier-only program and (u, delta) for the
    combined one. ``multipliers`` follow the convention of the producing
    solver (see module docstring). ``kkt_residual`` is the max-norm residual
    over stationarity, primal feasibility, complementary slackness and
    multiplier sign, always <= KKT_TOL.
    """

    minimizer: np.ndarray
    multipliers: np.ndarray
    branch: Branch
    kkt_residual: float


@dataclass(frozen=True)
class P1Instance:
    """Data of the barrier-only program at one state: Lf_h, Lg_h, alpha(h)."""

    lf_h: float
    lg_h: np.ndarray
    alpha_h: float

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "lg_h", np.asarray(self.lg_h, dtype=float).reshape(-1)
        )


@dataclass(frozen=True)
class P2Instance:
    """Data of the combined program at one state.

    ``c_v`` is the product c * V(x) appearing in the stabilization constraint
    ``Lg_V u + Lf_V + c_v - delta <= 0``.
    """

    lf_v: float
    lg_v: np.ndarray
    c_v: float
    lf_h: float
    lg_h: np.ndarray
    alpha_h: float

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "lg_v", np.asarray(self.lg_v, dtype=float).reshape(-1)
        )
        object.__setattr__(
            self, "lg_h", np.asarray(self.lg_h, dtype=float).reshape(-1)
        )
        if self.lg_v.shape != self.lg_h.shape:
            raise ConfigurationError(
                f"lg_v and lg_h must have equal length, got "
                f"{self.lg_v.shape} and {self.lg_h.shape}"
            )


class WeightedObjective:
    """Strictly convex quadratic objective ``0.5 z'Hz + F'z``.

    H must be symmetric (within 1e-12) and positive definite, checked by an
    attempted Cholesky factorization at construction. The inverse of H is
    cached; the solver applies it analytically, which keeps KKT residuals at
    rounding level even when H mixes very different scales.
    """

    __slots__ = ("H", "F", "H_inv")

    def __init__(self, H: np.ndarray, F: np.ndarray):
        H = np.asarray(H, dtype=float)
        F = np.asarray(F, dtype=float).reshape(-1)
        if H.ndim != 2 or H.shape[0] != H.shape[1]:
            raise ConfigurationError(f"H must be square, got shape {H.shape}")
        if H.shape[0] != F.size:
            raise ConfigurationError(f"F has length {F.size}, expected {H.shape[0]}")
        if np.max(np.abs(H - H.T)) > 1e-12:
            raise ConfigurationError("H must be symmetric within 1e-12")
        try:
            np.linalg.cholesky(H)
        except np.linalg.LinAlgError:
            raise ConfigurationError("H must be positive definite") from None
        self.H = H
        self.F = F
        self.H_inv = np.linalg.inv(H)

    def with_linear_term(self, F: np.ndarray) -> "WeightedObjective":
        """Cheap variant sharing the already-validated H."""
        obj = WeightedObjective.__new__(WeightedObjective)
        obj.H = self.H
        obj.H_inv = self.H_inv
        obj.F = np.asarray(F, dtype=float).reshape(-1)
        return obj

    @property
    def dim(self) -> int:
        return self.H.shape[0]


def _omega(r: float) -> float:
    """min(r, 0), the clamp used by the closed-form branch formulas."""
    return r if r <= 0.0 else 0.0


def kkt_verify(
    H: np.ndarray,
    F: np.ndarray,
    constraints: Sequence[tuple[np.ndarray, float]],
    candidate: np.ndarray,
    multipliers: Sequence[float],
) -> float:
    """Score a candidate solution of ``min 0.5 z'Hz + F'z s.t. a_i z <= b_i``.

    Returns the max over the stationarity residual (inf-norm), constraint
    violations, complementary-slackness products, and negative parts of the
    (standard-convention, nonnegative) multipliers. Zero means exact KKT point.
    """
    z = np.asarray(candidate, dtype=float).reshape(-1)
    H = np.asarray(H, dtype=float)
    F = np.asarray(F, dtype=float).reshape(-1)
    if len(multipliers) != len(constraints):
        raise ConfigurationError(
            f"{len(multipliers)} multipliers for {len(constraints)} constraints"
        )
    stationarity = H @ z + F
    worst = 0.0
    for (a, b), mu in zip(constraints, multipliers):
        a = np.asarray(a, dtype=float).reshape(-1)
        mu = float(mu)
        if mu != 0.0:
            stationarity = stationarity + mu * a
        slack = float(a @ z) - float(b)
        if slack > worst:  # primal violation
            worst = slack
        comp = abs(mu * slack)  # complementary slackness
        if comp > worst:
            worst = comp
        if -mu > worst:  # sign violation
            worst = -mu
    if z.size:
        s_max = float(np.abs(stationarity).max())
        if s_max > worst:
            worst = s_max
    return worst


_SUBSETS = ((), (0,), (1,), (0, 1))


def solve_weighted(
    objective: WeightedObjective,
    constraints: Sequence[tuple[np.ndarray, float]],
) -> QPResult:
    """Exact minimizer of a strictly convex QP with at most two constraints.

    Enumerates active subsets, solving each equality-constrained KKT system
    through the Schur complement in the H-inverse metric, and accepts the
    (unique, by strict convexity) candidate that is primal feasible with
    nonnegative multipliers. Constraints are ``(a, b)`` pairs meaning
    ``a @ z <= b``. Branch naming follows the caller ordering convention
    (stabilization row first, barrier row second); a single constraint is
    treated as a barrier row.

    Raises ``InfeasibleError`` for an empty constraint set intersection and
    skips subsets whose reduced system is singular (dependent normals).
    """
    H, F, h_inv = objective.H, objective.F, objective.H_inv
    n = objective.dim
    rows = []
    for a, b in constraints:
        a = np.asarray(a, dtype=float).reshape(-1)
        if a.shape != (n,):
            raise ConfigurationError(
                f"constraint normal has shape {a.shape}, expected ({n},)"
            )
        if not np.any(a):
            raise ConfigurationError("constraint normal must be nonzero")
        rows.append((a, float(b)))
    k = len(rows)
    if k > 2:
        raise ConfigurationError(f"at most 2 constraints supported, got {k}")

    h_f = h_inv @ F
    w = [h_inv @ a for a, _ in rows]  # H^-1 a_i
    result = None
    for subset in _SUBSETS:
        if any(i >= k for i in subset):
            continue
        s = len(subset)
        if s == 0:
            z = -h_f
            mu_active = ()
        elif s == 1:
            i = subset[0]
            a_i, b_i = rows[i]
            m00 = float(a_i @ w[i])
            if m00 <= 0.0:
                continue
            mu = -(b_i + float(a_i @ h_f)) / m00
            z = -h_f - mu * w[i]
            mu_active = (mu,)
        else:
            (a0, b0), (a1, b1) = rows
            m00 = float(a0 @ w[0])
            m01 = float(a0 @ w[1])
            m11 = float(a1 @ w[1])
            det = m00 * m11 - m01 * m01
            if det <= 1e-12 * m00 * m11:
                continue  # dependent normals: singular active set, skip
            v0 = -(b0 + float(a0 @ h_f))
            v1 = -(b1 + float(a1 @ h_f))
            mu0 = (m11 * v0 - m01 * v1) / det
            mu1 = (m00 * v1 - m01 * v0) / det
            z = -h_f - mu0 * w[0] - mu1 * w[1]
            mu_active = (mu0, mu1)

        scale = 1.0 + float(np.abs(z).max())
        if any(mu < -_ACCEPT_TOL * scale for mu in mu_active):
            continue
        feasible = True
        for i, (a_i, b_i) in enumerate(rows):
            if i in subset:
                continue
            if float(a_i @ z) > b_i + _ACCEPT_TOL * (scale + abs(b_i)):
                feasible = False
                break
        if not feasible:
            continue

        multipliers = np.zeros(k)
        for j, i in enumerate(subset):
            multipliers[i] = max(0.0, mu_active[j])
        residual = kkt_verify(H, F, rows, z, multipliers)
        result = QPResult(z, multipliers, _branch_of(subset, k), residual)
        break

    if result is None:
        _raise_no_candidate(rows)
    return result


def _branch_of(subset: tuple[int, ...], n_constraints: int) -> Branch:
    if not subset:
        return Branch.INACTIVE
    if n_constraints == 1:
        return Branch.CBF_ACTIVE
    if subset == (0,):
        return Branch.CLF_ACTIVE
    if subset == (1,):
        return Branch.CBF_ACTIVE
    return Branch.BOTH_ACTIVE


def _raise_no_candidate(rows) -> None:
    if len(rows) == 2:
        (a1, b1), (a2, b2) = rows
        n1 = float(np.linalg.norm(a1))
        n2 = float(np.linalg.norm(a2))
        cos = float(a1 @ a2) / (n1 * n2)
        if cos < -1.0 + 1e-12:
            # a2 = -c a1 with c > 0: constraints read a1 z <= b1, a1 z >= -b2/c
            c = n2 / n1
            if -b2 / c > b1 + 1e-12:
                raise InfeasibleError(
                    f"antiparallel constraints with empty slab: "
                    f"need {-b2 / c} <= a1 z <= {b1}"
                )
    raise SolverConsistencyError(
        "active-set enumeration found no KKT point for a feasible program",
        np.array([]),
        np.array([]),
    )


def solve_p1(inst: P1Instance) -> QPResult:
    """Minimum-norm input meeting the barrier inequality at one state.

    Closed form: u* = 0 if ``Lf_h + alpha_h > 0`` (constraint slack at the
    origin), else ``u* = -(Lf_h + alpha_h) Lg_h' / (Lg_h Lg_h')``. The reported
    multiplier is lambda <= 0 with ``u* = lambda * (-Lg_h')``.
    """
    lg = inst.lg_h
    gram = float(lg @ lg)
    if gram < MIN_LG_H_NORM**2:
        raise RelativeDegreeError(
            f"Lg_h={lg} is numerically zero (norm < {MIN_LG_H_NORM}); "
            "the barrier does not have relative degree one here"
        )
    p = inst.lf_h + inst.alpha_h
    lam = _omega(p) / gram
    u = lam * (-lg)
    branch = Branch.INACTIVE if lam == 0.0 else Branch.CBF_ACTIVE
    residual = kkt_verify(
        2.0 * np.eye(lg.size),
        np.zeros(lg.size),
        [(-lg, p)],
        u,
        [-2.0 * lam],
    )
    return QPResult(u, np.array([lam]), branch, residual)


def solve_p2(inst: P2Instance) -> QPResult:
    """Minimum-norm (u, delta) meeting the barrier and relaxed CLF constraints.

    The program is ``min |u|^2 + delta^2`` subject to
    ``Lg_V u + Lf_V + c_v - delta <= 0`` and ``Lg_h u + Lf_h + alpha_h >= 0``.
    In "<=" form the normals and offsets are ``y1 = (Lg_V, -1), p1 = -Lf_V - c_v``
    and ``y2 = (-Lg_h, 0), p2 = Lf_h + alpha_h``. With the Gram matrix
    ``G = [[<y1,y1>, <y1,y2>], [<y2,y1>, <y2,y2>]]`` the multipliers are, in
    order of evaluation (earlier branch wins at exact boundary ties):

    * if   ``G12*omega(p2) - G22*p1 < 0``:  lambda = (0, omega(p2)/G22)
    * elif ``G12*omega(p1) - G11*p2 < 0``:  lambda = (omega(p1)/G11, 0)
    * else: lambda = (omega(G22*p1 - G12*p2), omega(G11*p2 - G12*p1)) / det G

    with ``omega(r) = min(r, 0)``, and the minimizer is
    ``lambda1 * y1 + lambda2 * y2``. Every result is KKT-verified; a residual
    above KKT_TOL raises ``SolverConsistencyError`` carrying the closed-form
    and enumeration answers.
    """
    lg_h = inst.lg_h
    gram_h = float(lg_h @ lg_h)
    if gram_h < MIN_LG_H_NORM**2:
        raise RelativeDegreeError(
            f"Lg_h={lg_h} is numerically zero (norm < {MIN_LG_H_NORM}); "
            "the barrier does not have relative degree one here"
        )
    m = lg_h.size
    y1 = np.append(inst.lg_v, -1.0)
    y2 = np.append(-lg_h, 0.0)
    p1 = -inst.lf_v - inst.c_v
    p2 = inst.lf_h + inst.alpha_h

    g11 = float(y1 @ y1)
    g12 = float(y1 @ y2)
    g22 = gram_h
    det = g11 * g22 - g12 * g12

    if g12 * _omega(p2) - g22 * p1 < 0.0:
        lam1, lam2 = 0.0, _omega(p2) / g22
    elif g12 * _omega(p1) - g11 * p2 < 0.0:
        lam1, lam2 = _omega(p1) / g11, 0.0
    else:
        lam1 = _omega(g22 * p1 - g12 * p2) / det
        lam2 = _omega(g11 * p2 - g12 * p1) / det

    z = lam1 * y1 + lam2 * y2
    multipliers = np.array([lam1, lam2])

    if lam1 < 0.0 and lam2 < 0.0:
        branch = Branch.BOTH_ACTIVE
    elif lam1 < 0.0:
        branch = Branch.CLF_ACTIVE
    elif lam2 < 0.0:
        branch = Branch.CBF_ACTIVE
    else:
        branch = Branch.INACTIVE

    rows = [(y1, p1), (y2, p2)]
    residual = kkt_verify(
        2.0 * np.eye(m + 1),
        np.zeros(m + 1),
        rows,
        z,
        [-2.0 * lam1, -2.0 * lam2],
    )
    if residual > KKT_TOL:
        oracle = solve_weighted(
            WeightedObjective(2.0 * np.eye(m + 1), np.zeros(m + 1)), rows
        )
        raise SolverConsistencyError(
            f"closed-form branch result failed the KKT check "
            f"(residual {residual:.3e} > {KKT_TOL:.0e})",
            z,
            oracle.minimizer,
        )
    return QPResult(z, multipliers, branch, residual)
