"""Affine symmetric-matrix maps and a small dense strict-feasibility solver.

A map ``M(x) = M0 + sum_j x_j Mj`` is strictly feasible when some ``x`` makes
``M(x)`` negative definite. Strictness is realised as a margin: ``x`` is
accepted only if ``-lambda_max(M(x)) >= margin_tol``.

:func:`solve_feasibility` maximises that margin with a primal log-barrier
path-following method on the epigraph ``t*I - M(x) > 0``, restricted to a
Euclidean ball ``||x|| < radius`` so that the problem stays bounded. Every
``Feasible`` answer is re-checked with :func:`negdef_margin` before returning.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.linalg import solve_triangular

from .errors import BlockNotNegativeDefinite, DimensionMismatch, NumericalFailure

MARGIN_TOL = 1e-7
POS_TOL = 1e-8
SYM_TOL = 1e-12


def symmetric(m, tol=SYM_TOL) -> np.ndarray:
    """Check ``m`` is symmetric to ``tol`` (relative to its scale), then symmetrise."""
    m = np.atleast_2d(np.asarray(m, dtype=float))
    if m.shape[0] != m.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {m.shape}")
    asym = np.abs(m - m.T).max() if m.size else 0.0
    if asym > tol * max(1.0, np.abs(m).max()):
        raise ValueError(f"matrix not symmetric (max asymmetry {asym:.3e})")
    return 0.5 * (m + m.T)


def negdef_margin(m) -> float:
    """``-lambda_max(m)``; positive iff ``m`` is negative definite."""
    m = np.atleast_2d(np.asarray(m, dtype=float))
    if m.size == 0:
        return np.inf
    try:
        return float(-np.linalg.eigvalsh(0.5 * (m + m.T))[-1])
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure(f"eigenvalue computation did not converge: {exc}") from exc


def schur_reduce(m, keep) -> np.ndarray:
    """Eliminate the trailing block of ``[[A, B], [B', D]]``.

    ``keep`` is the size of the leading block ``A``. Returns
    ``A - B D^{-1} B'``; raises if ``D`` is not negative definite.
    """
    m = symmetric(m, tol=1e-9)
    a, b, d = m[:keep, :keep], m[:keep, keep:], m[keep:, keep:]
    if d.size == 0:
        return a
    if negdef_margin(d) <= 0:
        raise BlockNotNegativeDefinite("eliminated block is not negative definite")
    return a - b @ np.linalg.solve(d, b.T)


@dataclass(frozen=True)
class VariableGroup:
    """A named slice of the decision vector.

    ``kind`` is ``"symmetric"`` (upper-triangle entries of a square matrix),
    ``"matrix"`` (row-major entries) or ``"vector"``.
    """

    name: str
    kind: str
    shape: tuple
    start: int
    positive_definite: bool = False

    @property
    def size(self):
        if self.kind == "symmetric":
            n = self.shape[0]
            return n * (n + 1) // 2
        return int(np.prod(self.shape))

    @property
    def stop(self):
        return self.start + self.size

    def pack(self, value) -> np.ndarray:
        value = np.asarray(value, dtype=float)
        if self.kind == "symmetric":
            return value[np.triu_indices(self.shape[0])]
        return value.reshape(-1)

    def unpack(self, x) -> np.ndarray:
        chunk = np.asarray(x[self.start:self.stop], dtype=float)
        if self.kind == "symmetric":
            n = self.shape[0]
            out = np.zeros((n, n))
            out[np.triu_indices(n)] = chunk
            return out + np.triu(out, 1).T
        return chunk.reshape(self.shape)

    def labels(self):
        if self.kind == "symmetric":
            rows, cols = np.triu_indices(self.shape[0])
            return [f"{self.name}[{r},{c}]" for r, c in zip(rows, cols)]
        if self.kind == "matrix":
            return [f"{self.name}[{r},{c}]" for r in range(self.shape[0]) for c in range(self.shape[1])]
        return [f"{self.name}[{k + 1}]" for k in range(self.size)]


class VariableLayout:
    """Builder for the decision vector: declares groups in order."""

    def __init__(self):
        self.groups: dict[str, VariableGroup] = {}
        self._positive: list[bool] = []

    @property
    def size(self):
        return len(self._positive)

    def symmetric(self, name, n, positive_definite=False):
        return self._add(VariableGroup(name, "symmetric", (n, n), self.size, positive_definite), False)

    def matrix(self, name, rows, cols):
        return self._add(VariableGroup(name, "matrix", (rows, cols), self.size), False)

    def vector(self, name, length, positive=False):
        return self._add(VariableGroup(name, "vector", (length,), self.size), positive)

    def _add(self, group, positive):
        if group.name in self.groups:
            raise ValueError(f"duplicate variable group {group.name!r}")
        self.groups[group.name] = group
        self._positive.extend([positive] * group.size)
        return group

    def unpack(self, x):
        return {name: g.unpack(x) for name, g in self.groups.items()}

    def pack(self, values: Mapping[str, np.ndarray]):
        x = np.zeros(self.size)
        for name, g in self.groups.items():
            x[g.start:g.stop] = g.pack(values[name])
        return x

    @property
    def positive(self):
        return tuple(self._positive)

    @property
    def labels(self):
        return tuple(lbl for g in self.groups.values() for lbl in g.labels())


@dataclass(frozen=True)
class AffineLmi:
    """``M(x) = constant + sum_j x[j] * coefficients[j]``, required ``< 0``."""

    constant: np.ndarray
    coefficients: np.ndarray
    labels: tuple = ()
    positive: tuple = ()
    groups: Mapping[str, VariableGroup] = field(default_factory=dict)
    # (start, stop) of diagonal blocks, for per-block margins
    blocks: tuple = ()

    def __post_init__(self):
        m0 = symmetric(self.constant)
        coeffs = np.asarray(self.coefficients, dtype=float)
        if coeffs.ndim != 3 or coeffs.shape[1:] != m0.shape:
            raise DimensionMismatch(
                f"coefficient blocks have shape {coeffs.shape}, constant is {m0.shape}"
            )
        coeffs = np.stack([symmetric(c) for c in coeffs]) if len(coeffs) else coeffs
        v = coeffs.shape[0]
        object.__setattr__(self, "constant", m0)
        object.__setattr__(self, "coefficients", coeffs)
        if not self.labels:
            object.__setattr__(self, "labels", tuple(f"x[{j + 1}]" for j in range(v)))
        if not self.positive:
            object.__setattr__(self, "positive", (False,) * v)
        if len(self.labels) != v or len(self.positive) != v:
            raise DimensionMismatch("labels/positive flags do not match variable count")

    @classmethod
    def from_callable(cls, fn: Callable[[np.ndarray], np.ndarray], layout: VariableLayout, blocks=()):
        """Build the map by probing an affine matrix-valued function.

        ``fn`` must be affine in ``x``; its value at 0 gives the constant
        term and the differences at unit vectors give the coefficients.
        """
        v = layout.size
        m0 = np.asarray(fn(np.zeros(v)), dtype=float)
        coeffs = np.empty((v,) + m0.shape)
        for j in range(v):
            e = np.zeros(v)
            e[j] = 1.0
            coeffs[j] = np.asarray(fn(e), dtype=float) - m0
        return cls(m0, coeffs, layout.labels, layout.positive, dict(layout.groups), tuple(blocks))

    @property
    def variable_count(self):
        return self.coefficients.shape[0]

    @property
    def dim(self):
        return self.constant.shape[0]

    def __call__(self, x):
        return eval_lmi(self, x)

    def unpack(self, x):
        return {name: g.unpack(x) for name, g in self.groups.items()}

    def block_margins(self, x):
        value = eval_lmi(self, x)
        return [negdef_margin(value[a:b, a:b]) for a, b in self.blocks]


def eval_lmi(lmi: AffineLmi, x) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape[0] != lmi.variable_count:
        raise DimensionMismatch(f"expected {lmi.variable_count} variables, got {x.shape[0]}")
    if x.shape[0] == 0:
        return lmi.constant.copy()
    value = lmi.constant + np.tensordot(x, lmi.coefficients, axes=1)
    return 0.5 * (value + value.T)


class Status(str, enum.Enum):
    FEASIBLE = "Feasible"
    INFEASIBLE = "Infeasible"
    INDETERMINATE = "Indeterminate"


@dataclass(frozen=True)
class FeasibilityResult:
    status: Status
    x: np.ndarray
    margin: float
    iterations: int
    diagnostics: dict

    @property
    def feasible(self):
        return self.status is Status.FEASIBLE


def _augment(lmi: AffineLmi):
    """Append a 1x1 block ``-x_j`` for every positivity-flagged variable."""
    pos = [j for j, flag in enumerate(lmi.positive) if flag]
    m, v = lmi.dim, lmi.variable_count
    size = m + len(pos)
    c0 = np.zeros((size, size))
    c0[:m, :m] = lmi.constant
    cs = np.zeros((v, size, size))
    cs[:, :m, :m] = lmi.coefficients
    for k, j in enumerate(pos):
        cs[j, m + k, m + k] = -1.0
    return c0, cs


def _barrier_parts(c0, cs, x, t, radius):
    """Cholesky-scaled derivative matrices, or None outside the domain."""
    s = t * np.eye(c0.shape[0]) - c0 - np.tensordot(x, cs, axes=1)
    slack = radius**2 - x @ x
    if slack <= 0:
        return None
    try:
        chol = np.linalg.cholesky(0.5 * (s + s.T))
    except np.linalg.LinAlgError:
        return None
    return chol, slack


def _barrier_value(c0, cs, x, t, radius, weight):
    parts = _barrier_parts(c0, cs, x, t, radius)
    if parts is None:
        return np.inf
    chol, slack = parts
    return weight * t - 2.0 * np.log(np.diag(chol)).sum() - np.log(slack)


def _newton_system(c0, cs, x, t, radius, weight):
    chol, slack = _barrier_parts(c0, cs, x, t, radius)
    m = c0.shape[0]
    linv = solve_triangular(chol, np.eye(m), lower=True)
    # d S / d x_j = -C_j, d S / d t = I
    derivs = np.concatenate([-cs, np.eye(m)[None]], axis=0)
    scaled = linv @ derivs @ linv.T
    flat = scaled.reshape(scaled.shape[0], -1)
    grad = -np.einsum("kii->k", scaled)
    hess = flat @ flat.T
    v = x.shape[0]
    grad[:v] += 2.0 * x / slack
    hess[:v, :v] += 2.0 * np.eye(v) / slack + 4.0 * np.outer(x, x) / slack**2
    grad[v] += weight
    return grad, hess


def solve_feasibility(
    lmi: AffineLmi,
    margin_tol: float = MARGIN_TOL,
    *,
    pos_tol: float = POS_TOL,
    radius: float = 1e5,
    gap_tol: float = 1e-9,
    max_newton: int = 2000,
    barrier_growth: float = 10.0,
) -> FeasibilityResult:
    """Find ``x`` with ``M(x) <= -margin_tol * I`` by margin maximisation.

    Returns ``Infeasible`` when the barrier duality bound proves the best
    achievable margin inside the ball is below ``margin_tol``, and
    ``Indeterminate`` when the Newton budget runs out first.
    """
    if margin_tol <= 0:
        raise ValueError("margin_tol must be positive")
    c0, cs = _augment(lmi)
    v, size = lmi.variable_count, c0.shape[0]
    nu = size + 1  # barrier parameter: log det of size `size` plus the ball

    x = np.zeros(v)
    t = max(0.0, -negdef_margin(c0)) + 1.0
    weight = 1.0
    newton_steps, outer = 0, 0
    history = []

    while True:
        # centering
        while True:
            if newton_steps >= max_newton:
                return _finish(lmi, x, Status.INDETERMINATE, newton_steps, margin_tol, pos_tol,
                               {"reason": "newton budget exhausted", "weight": weight,
                                "gap": nu / weight, "radius": radius, "history": history})
            grad, hess = _newton_system(c0, cs, x, t, radius, weight)
            try:
                step = -np.linalg.solve(hess, grad)
            except np.linalg.LinAlgError:
                step = -np.linalg.lstsq(hess, grad, rcond=None)[0]
            decrement = -grad @ step
            newton_steps += 1
            if decrement / 2.0 <= 1e-10:
                break
            f0 = _barrier_value(c0, cs, x, t, radius, weight)
            tau = 1.0
            while tau > 1e-14:
                f1 = _barrier_value(c0, cs, x + tau * step[:v], t + tau * step[v], radius, weight)
                if f1 <= f0 - 0.25 * tau * decrement:
                    break
                tau *= 0.5
            else:
                break
            x, t = x + tau * step[:v], t + tau * step[v]

        outer += 1
        gap = nu / weight
        history.append((weight, t))
        # t is within `gap` of the optimal max-eigenvalue inside the ball
        best_margin_bound = -(t - gap)
        if best_margin_bound < margin_tol:
            return _finish(lmi, x, Status.INFEASIBLE, newton_steps, margin_tol, pos_tol,
                           {"reason": "barrier bound: achievable margin below tolerance",
                            "margin_upper_bound": best_margin_bound, "gap": gap,
                            "radius": radius, "outer": outer})
        if gap <= gap_tol * max(1.0, abs(t)):
            return _finish(lmi, x, Status.FEASIBLE, newton_steps, margin_tol, pos_tol,
                           {"gap": gap, "radius": radius, "outer": outer,
                            "ball_slack": radius**2 - x @ x})
        weight *= barrier_growth


def _finish(lmi, x, status, iterations, margin_tol, pos_tol, diagnostics):
    margin = negdef_margin(eval_lmi(lmi, x))
    if status is Status.FEASIBLE:
        problems = []
        if margin < margin_tol:
            problems.append(f"margin {margin:.3e} below {margin_tol:.1e}")
        low = [lbl for lbl, flag, xi in zip(lmi.labels, lmi.positive, x) if flag and xi < pos_tol]
        if low:
            problems.append(f"positivity violated for {low}")
        for g in lmi.groups.values():
            if g.positive_definite and negdef_margin(-g.unpack(x)) < pos_tol:
                problems.append(f"{g.name} not positive definite")
        if problems:
            status = Status.INDETERMINATE
            diagnostics = dict(diagnostics, reason="; ".join(problems))
    assert status is not Status.FEASIBLE or margin >= margin_tol
    return FeasibilityResult(status, x, margin, iterations, diagnostics)


def block_diag_sym(blocks: Sequence[np.ndarray]) -> np.ndarray:
    """Block-diagonal stack that tolerates empty blocks."""
    blocks = [np.atleast_2d(np.asarray(b, dtype=float)) for b in blocks if np.size(b)]
    size = sum(b.shape[0] for b in blocks)
    out = np.zeros((size, size))
    k = 0
    for b in blocks:
        out[k:k + b.shape[0], k:k + b.shape[0]] = b
        k += b.shape[0]
    return out
