"""Closed-loop simulation of the leader-follower network.

The integrated state is the physical one: leader ``x0``, agents ``x_i``,
one filter state per ordered neighbour pair (stateful couplings only) and
the running cost. Errors ``e_i = x0 - x_i`` are recomputed from samples.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import trapezoid

from .coupling import LtiFilter, MemorylessGain, admissibility, energy_ledger
from .errors import DimensionMismatch, HorizonWarning, NumericalBlowup, UnsupportedOperator
from .network import SpectralData, build_laplacian
from .synthesis import NetworkSpec, SynthesisCertificate, spectral_data

BLOWUP_GUARD = 1e100
TAIL_TOL = 1e-4


@dataclass(frozen=True)
class SimConfig:
    t_final: float
    dt: float
    x0_init: np.ndarray
    agent_init: np.ndarray
    coupling: MemorylessGain | LtiFilter
    record_stride: int = 1

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.t_final >= self.dt:
            raise ValueError("t_final must be at least dt")
        if int(self.record_stride) < 1:
            raise ValueError("record_stride must be a positive integer")
        object.__setattr__(self, "x0_init", np.asarray(self.x0_init, dtype=float).reshape(-1))
        object.__setattr__(self, "agent_init", np.atleast_2d(np.asarray(self.agent_init, dtype=float)))
        object.__setattr__(self, "record_stride", int(self.record_stride))

    @property
    def steps(self):
        return int(round(self.t_final / self.dt))

    @property
    def e0(self):
        return self.x0_init[None, :] - self.agent_init


@dataclass(frozen=True)
class SimulationResult:
    t: np.ndarray
    leader: np.ndarray       # (T, n)
    agents: np.ndarray       # (T, N, n)
    controls: np.ndarray     # (T, N, m_in)
    running_cost: np.ndarray  # (T,)
    K: np.ndarray
    coupling: MemorylessGain | LtiFilter
    pairs: np.ndarray        # (P, 2) ordered neighbour pairs (i, j), 0-based
    coupling_inputs: np.ndarray   # (T, P, n): x_j - x_i
    coupling_outputs: np.ndarray  # (T, P, n_w)
    iqc_ledgers: tuple = field(default=())

    @property
    def errors(self):
        return self.leader[:, None, :] - self.agents

    @property
    def dt(self):
        return float(self.t[1] - self.t[0])

    @property
    def final_cost(self):
        return float(self.running_cost[-1])

    @property
    def error_norm(self):
        return np.linalg.norm(self.errors.reshape(len(self.t), -1), axis=1)

    @property
    def iqc_passed(self):
        return all(ledger.passed for ledger in self.iqc_ledgers)

    def epsilon(self, spectral: SpectralData):
        return transform_errors(self, spectral)


def _ordered_pairs(graph):
    pairs = []
    for i, j in graph.sorted_edges():
        pairs += [(i - 1, j - 1), (j - 1, i - 1)]
    return np.array(sorted(pairs), dtype=int).reshape(-1, 2)


def rk4_propagator(M, h):
    """One classical RK4 step for ``z' = M z`` as a matrix.

    For a linear autonomous system the four RK4 stages are linear in the
    current state, so the step collapses to
    ``I + hM + (hM)^2/2 + (hM)^3/6 + (hM)^4/24``. Also returns the stage
    maps ``S_k`` (stage state ``= S_k z``) used to integrate quadratic rates.
    """
    eye = np.eye(M.shape[0])
    hm = h * M
    s1 = eye
    s2 = eye + 0.5 * hm @ s1
    s3 = eye + 0.5 * hm @ s2
    s4 = eye + hm @ s3
    step = eye + hm @ (s1 + 2 * s2 + 2 * s3 + s4) / 6.0
    return step, (s1, s2, s3, s4)


class _ClosedLoop:
    """Linear closed-loop dynamics ``z' = M z`` with quadratic cost rate ``z' W z``.

    ``z`` stacks the leader, the agents and the filter states of every
    ordered neighbour pair.
    """

    def __init__(self, spec: NetworkSpec, K, coupling):
        self.spec = spec
        self.K = K
        self.coupling = coupling
        n, N = spec.n, spec.N
        adj = spec.graph.adjacency()
        self.adj, self.deg = adj, adj.sum(axis=1)
        self.g = np.asarray(spec.pinning.gains, dtype=float)
        self.lg = build_laplacian(spec.graph) + spec.pinning.matrix()
        self.pairs = _ordered_pairs(spec.graph)
        P = len(self.pairs)
        self.source = np.zeros((N, P))
        if P:
            self.source[self.pairs[:, 0], np.arange(P)] = 1.0
        self.nf = coupling.order if isinstance(coupling, LtiFilter) else 0
        self.sizes = (n, N * n, P * self.nf)
        self.offsets = np.cumsum((0,) + self.sizes)
        self.dim = int(self.offsets[-1])
        basis = np.eye(self.dim)
        self.M = np.column_stack([self.rate(b) for b in basis]) if self.dim else np.zeros((0, 0))
        err = np.column_stack([self.errors_of(b).ravel() for b in basis])
        ctl = np.column_stack([self.control(*self.split(b)[:2]).ravel() for b in basis])
        self.W = (err.T @ np.kron(self.lg, spec.Q) @ err
                  + ctl.T @ np.kron(np.eye(N), spec.R) @ ctl)

    def split(self, z):
        n, N, P = self.spec.n, self.spec.N, len(self.pairs)
        o = self.offsets
        return (z[o[0]:o[1]], z[o[1]:o[2]].reshape(N, n), z[o[2]:o[3]].reshape(P, self.nf))

    def errors_of(self, z):
        x0, X, _ = self.split(z)
        return x0[None, :] - X

    def control(self, x0, X):
        rel = self.adj @ X - self.deg[:, None] * X
        return -(rel + self.g[:, None] * (x0[None, :] - X)) @ self.K.T

    def coupling_signals(self, X, Z):
        y = X[self.pairs[:, 1]] - X[self.pairs[:, 0]] if len(self.pairs) else np.zeros((0, X.shape[1]))
        if isinstance(self.coupling, MemorylessGain):
            return y, y @ self.coupling.gain.T
        c = self.coupling
        return y, Z @ c.C.T + y @ c.D.T

    def rate(self, z):
        spec = self.spec
        x0, X, Z = self.split(z)
        U = self.control(x0, X)
        y, w = self.coupling_signals(X, Z)
        dX = X @ spec.A.T + U @ spec.B1.T + (self.source @ w) @ spec.B2.T
        dZ = Z @ self.coupling.A.T + y @ self.coupling.B.T if self.nf else Z
        return np.concatenate([spec.A @ x0, dX.ravel(), dZ.ravel()])


def simulate(spec: NetworkSpec, K, cfg: SimConfig) -> SimulationResult:
    """Fixed-step classical RK4 integration of leader, agents and running cost.

    The running cost is carried as an extra state whose rate is the cost
    integrand; it does not feed back, so its RK4 increment is the weighted
    sum of the integrand at the four stage states.
    """
    n, N = spec.n, spec.N
    K = np.atleast_2d(np.asarray(K, dtype=float))
    if K.shape != (spec.m_in, n):
        raise DimensionMismatch(f"K is {K.shape}, expected {(spec.m_in, n)}")
    if cfg.x0_init.shape != (n,) or cfg.agent_init.shape != (N, n):
        raise DimensionMismatch(f"initial states must be ({n},) and ({N}, {n})")
    op = cfg.coupling
    if op.input_dim != n or op.output_dim != spec.n_w:
        raise DimensionMismatch(f"coupling maps R^{op.input_dim} -> R^{op.output_dim}, "
                                f"need R^{n} -> R^{spec.n_w}")

    loop = _ClosedLoop(spec, K, op)
    steps, stride, h = cfg.steps, cfg.record_stride, cfg.dt
    step, stages = rk4_propagator(loop.M, h)
    cost_form = h / 6.0 * sum(w * s.T @ loop.W @ s for w, s in zip((1, 2, 2, 1), stages))

    z = np.concatenate([cfg.x0_init, cfg.agent_init.ravel(), np.zeros(loop.sizes[2])])
    J = 0.0
    states, costs = [z], [J]
    for k in range(1, steps + 1):
        J += z @ cost_form @ z
        z = step @ z
        if k % stride == 0:
            if not np.all(np.isfinite(z)) or np.abs(z).max() > BLOWUP_GUARD:
                raise NumericalBlowup(f"state diverged by t = {k * h:.6g} s", k * h)
            states.append(z)
            costs.append(J)
    Z = np.array(states)
    if not np.all(np.isfinite(Z)) or np.abs(Z).max() > BLOWUP_GUARD:
        raise NumericalBlowup(f"state diverged by t = {steps * h:.6g} s", steps * h)

    T = len(Z)
    o = loop.offsets
    leader = Z[:, o[0]:o[1]]
    agents = Z[:, o[1]:o[2]].reshape(T, N, n)
    filt = Z[:, o[2]:o[3]].reshape(T, len(loop.pairs), loop.nf)
    rel = np.einsum("ij,tjk->tik", loop.adj, agents) - loop.deg[None, :, None] * agents
    controls = -(rel + loop.g[None, :, None] * (leader[:, None, :] - agents)) @ K.T
    pairs = loop.pairs
    if len(pairs):
        y_all = agents[:, pairs[:, 1]] - agents[:, pairs[:, 0]]
    else:
        y_all = np.zeros((T, 0, n))
    if isinstance(op, MemorylessGain):
        w_all = y_all @ op.gain.T
    else:
        w_all = filt @ op.C.T + y_all @ op.D.T

    t = np.arange(T) * h * stride
    ledgers = tuple(energy_ledger(y_all[:, p], w_all[:, p], h * stride, 0.0)
                    for p in range(len(pairs))) if T > 1 else ()
    return SimulationResult(t, leader, agents, controls, np.array(costs), K, op,
                            pairs, y_all, w_all, ledgers)


def transform_errors(result: SimulationResult, spectral: SpectralData) -> np.ndarray:
    """Modal errors ``eps_i = sum_j T_ji e_j`` per sample, shape ``(T, N, n)``."""
    E = result.errors
    if spectral.T.shape[0] != E.shape[1]:
        raise DimensionMismatch(f"spectral data for {spectral.T.shape[0]} nodes, run has {E.shape[1]}")
    return np.einsum("ji,tjk->tik", spectral.T, E)


@dataclass(frozen=True)
class CostReport:
    J_direct: float
    J_stacked: float
    J_hat: float


def evaluate_cost(result: SimulationResult, spec: NetworkSpec, spectral: SpectralData | None = None):
    """Realised cost three ways: pairwise, stacked Kronecker form, modal form."""
    spectral = spectral if spectral is not None else spectral_data(spec)
    E, U, Q, R = result.errors, result.controls, spec.Q, spec.R
    g = spec.pinning.gains
    T = len(result.t)

    direct = np.zeros(T)
    for i in range(spec.N):
        for j in spec.graph.neighbors(i + 1):
            diff = E[:, i] - E[:, j - 1]
            direct += 0.5 * np.einsum("tk,kl,tl->t", diff, Q, diff)
        if g[i]:
            direct += g[i] * np.einsum("tk,kl,tl->t", E[:, i], Q, E[:, i])
        direct += np.einsum("tk,kl,tl->t", U[:, i], R, U[:, i])

    lg = build_laplacian(spec.graph) + spec.pinning.matrix()
    e_flat = E.reshape(T, -1)
    u_flat = U.reshape(T, -1)
    stacked = (np.einsum("ti,ij,tj->t", e_flat, np.kron(lg, Q), e_flat)
               + np.einsum("ti,ij,tj->t", u_flat, np.kron(np.eye(spec.N), R), u_flat))

    eps = transform_errors(result, spectral)
    u_hat = eps @ result.K.T
    lam = spectral.lambdas
    hat = (np.einsum("i,tik,kl,til->t", lam, eps, Q, eps)
           + np.einsum("i,tik,kl,til->t", lam**2, u_hat, R, u_hat))

    dx = result.dt
    return CostReport(float(trapezoid(direct, dx=dx)), float(trapezoid(stacked, dx=dx)),
                      float(trapezoid(hat, dx=dx)))


@dataclass(frozen=True)
class DecompositionResidual:
    absolute: np.ndarray   # per subsystem, max over the grid
    relative: np.ndarray   # absolute / max |rhs_i|
    overall: float         # max absolute over all subsystems / max rhs norm


def decomposition_residual(result: SimulationResult, spectral: SpectralData, spec: NetworkSpec, K=None):
    """Mismatch between forward-difference modal derivatives and the modal model.

    The modal model is
    ``eps_i' = A eps_i + lam_i B1 K eps_i + (f_ii - lam_i) B2 xi_i + sum_{j!=i} f_ij B2 xi_j``
    with ``xi_j = Gamma eps_j``. Only memoryless couplings are supported.
    """
    if not isinstance(result.coupling, MemorylessGain):
        raise UnsupportedOperator("decomposition residual is defined for memoryless couplings only")
    K = result.K if K is None else np.atleast_2d(np.asarray(K, dtype=float))
    eps = transform_errors(result, spectral)
    xi = eps @ result.coupling.gain.T
    lam, f = spectral.lambdas, spectral.f
    N = spec.N
    B2 = spec.B2

    rhs = (eps @ spec.A.T + lam[None, :, None] * (eps @ (spec.B1 @ K).T))
    mix = f - np.diag(lam)
    rhs = rhs + np.einsum("ij,tjk->tik", mix, xi @ B2.T)

    fd = np.diff(eps, axis=0) / result.dt
    res = np.linalg.norm(fd - rhs[:-1], axis=2)           # (T-1, N)
    scale_i = np.linalg.norm(rhs[:-1], axis=2).max(axis=0)
    absolute = res.max(axis=0)
    rel = np.where(scale_i > 0, absolute / np.where(scale_i > 0, scale_i, 1.0), 0.0)
    total_scale = np.linalg.norm(rhs[:-1].reshape(len(rhs) - 1, -1), axis=1).max() if N else 0.0
    overall = float(absolute.max() / total_scale) if total_scale > 0 else 0.0
    return DecompositionResidual(absolute, rel, overall)


@dataclass(frozen=True)
class BoundCheck:
    J_direct: float
    bound_total: float | None
    satisfied: bool | None
    tail_indicator: float
    coupling_admissible: bool
    notice: str = ""


def check_bound(result: SimulationResult, cert: SynthesisCertificate, spec: NetworkSpec) -> BoundCheck:
    """Compare the realised cost with the certified bound for this run's e(0).

    No verdict is given when the coupling lies outside the admissible class.
    A :class:`HorizonWarning` is issued if the error has not decayed enough
    for the truncated cost to be representative.
    """
    cost = evaluate_cost(result, spec)
    E = result.errors
    e_start = np.sum(E[0] ** 2)
    tail = float(np.sum(E[-1] ** 2) / e_start) if e_start > 0 else 0.0
    if tail > TAIL_TOL:
        warnings.warn(f"tail indicator {tail:.3e} > {TAIL_TOL:g}: horizon may understate J",
                      HorizonWarning, stacklevel=2)
    adm = admissibility(result.coupling)
    if not adm.admissible:
        return BoundCheck(cost.J_direct, None, None, tail, False,
                          f"coupling outside Xi_0 (gain bound {adm.gain_bound:.4g} > 1); no bound claimed")
    e0 = E[0]
    bound = cert.bound_constant + float(np.einsum("ij,ij->", e0, np.linalg.solve(cert.Y, e0.T).T))
    return BoundCheck(cost.J_direct, bound, bool(cost.J_direct <= bound), tail, True)
