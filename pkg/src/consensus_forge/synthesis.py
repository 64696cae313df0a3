"""Guaranteed-cost consensus gain synthesis.

Two routes are offered:

* ``"th1"``: N coupled LMIs, one per modal subsystem of the grounded
  Laplacian, solved jointly over shared ``Y``, ``F`` and per-subsystem
  multiplier inverses ``alpha_i = 1/pi_i``, ``beta_i = 1/theta_i``.
  Gain ``K = F Y^{-1}``.
* ``"th2"``: a single LMI built from the spectral extremes, with uniform
  multipliers. Gain ``K = -(lam_min / lam_max**2) R^{-1} B1' Y^{-1}``.

Both certify the worst-case tracking cost bound
``sum_i (pi_i + theta_i (N-1)) d + sum_i e_i(0)' Y^{-1} e_i(0)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import network
from .errors import (
    CertificateRejected,
    DegenerateNetwork,
    DimensionMismatch,
    Infeasible,
    LiftRejected,
    MissingInitialState,
    NotPositiveDefinite,
)
from .lmi import (
    MARGIN_TOL,
    AffineLmi,
    VariableLayout,
    block_diag_sym,
    negdef_margin,
    solve_feasibility,
    symmetric,
)
from .network import Graph, Pinning, SpectralData

METHODS = ("th1", "th2")
HURWITZ_TOL = 1e-6


def _as_matrix(value, name):
    m = np.atleast_2d(np.asarray(value, dtype=float))
    if m.ndim != 2:
        raise DimensionMismatch(f"{name} must be a matrix")
    return m


@dataclass(frozen=True)
class NetworkSpec:
    """One problem instance: agent model, weights, topology, IQC offset.

    ``e0`` (optional) holds the initial synchronisation errors as an
    ``(N, n)`` array, row ``i`` being ``x_0(0) - x_i(0)``.
    """

    A: np.ndarray
    B1: np.ndarray
    B2: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    graph: Graph
    pinning: Pinning
    d: float = 0.0
    e0: np.ndarray | None = None

    def __post_init__(self):
        A = _as_matrix(self.A, "A")
        n = A.shape[0]
        if A.shape != (n, n):
            raise DimensionMismatch(f"A must be square, got {A.shape}")
        B1 = _as_matrix(self.B1, "B1")
        B2 = _as_matrix(self.B2, "B2")
        if B1.shape[0] != n:
            raise DimensionMismatch(f"B1 has {B1.shape[0]} rows, expected {n}")
        if B2.shape[0] != n:
            raise DimensionMismatch(f"B2 has {B2.shape[0]} rows, expected {n}")
        Q = symmetric(_as_matrix(self.Q, "Q"), tol=1e-12)
        R = symmetric(_as_matrix(self.R, "R"), tol=1e-12)
        if Q.shape != (n, n):
            raise DimensionMismatch(f"Q is {Q.shape}, expected {(n, n)}")
        if R.shape != (B1.shape[1], B1.shape[1]):
            raise DimensionMismatch(f"R is {R.shape}, expected {(B1.shape[1],) * 2}")
        if np.linalg.eigvalsh(Q)[0] <= 0:
            raise ValueError("Q must be positive definite")
        if np.linalg.eigvalsh(R)[0] <= 0:
            raise ValueError("R must be positive definite")
        if self.pinning.node_count != self.graph.node_count:
            raise DimensionMismatch(
                f"pinning has {self.pinning.node_count} nodes, graph has {self.graph.node_count}"
            )
        if self.d < 0:
            raise ValueError("IQC offset d must be non-negative")
        e0 = self.e0
        if e0 is not None:
            e0 = np.asarray(e0, dtype=float).reshape(self.graph.node_count, n)
        for name, value in (("A", A), ("B1", B1), ("B2", B2), ("Q", Q), ("R", R), ("e0", e0)):
            object.__setattr__(self, name, value)
        object.__setattr__(self, "d", float(self.d))

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def m_in(self):
        return self.B1.shape[1]

    @property
    def n_w(self):
        return self.B2.shape[1]

    @property
    def N(self):
        return self.graph.node_count

    def with_e0(self, e0):
        return NetworkSpec(self.A, self.B1, self.B2, self.Q, self.R, self.graph, self.pinning, self.d, e0)


def sqrtm_psd(m):
    """Symmetric square root of a symmetric PSD matrix."""
    w, v = np.linalg.eigh(symmetric(m, tol=1e-10))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def spectral_data(spec: NetworkSpec) -> SpectralData:
    try:
        return network.analyze(spec.graph, spec.pinning)
    except NotPositiveDefinite as exc:
        raise DegenerateNetwork(str(exc)) from exc


def _arrow(head, column, diagonal):
    """Symmetric matrix with ``head`` at (0,0), ``column[k]`` below it and
    ``diagonal[k]`` on the diagonal; all other blocks zero."""
    pairs = [(c, d) for c, d in zip(column, diagonal) if np.size(d)]
    sizes = [head.shape[0]] + [d.shape[0] for _, d in pairs]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    out = np.zeros((offsets[-1], offsets[-1]))
    out[:sizes[0], :sizes[0]] = head
    for k, (c, d) in enumerate(pairs, start=1):
        a, b = offsets[k], offsets[k + 1]
        out[a:b, :sizes[0]] = c
        out[:sizes[0], a:b] = c.T
        out[a:b, a:b] = d
    return out


def th1_block(spec: NetworkSpec, spectral: SpectralData, i, Y, F, alpha, beta):
    """Subsystem ``i`` (0-based) matrix of the coupled LMI family.

    ``alpha`` and ``beta`` are length-N arrays of multiplier inverses.
    Block row/column sizes are ``[n, m_in, n, n, n(N-1)]``.
    """
    n, N = spec.n, spec.N
    lam = spectral.lambdas[i]
    p2, q2 = spectral.p[i] ** 2, spectral.q[i] ** 2
    B1, B2 = spec.B1, spec.B2
    z = (spec.A @ Y + Y @ spec.A.T + lam * (F.T @ B1.T + B1 @ F)
         + (alpha[i] * p2 + beta[i] * q2) * (B2 @ B2.T))
    q_half = sqrtm_psd(lam * spec.Q)
    others = [beta[j] for j in range(N) if j != i]
    return _arrow(
        z,
        [F, q_half @ Y, Y, np.tile(Y, (N - 1, 1))],
        [
            -np.linalg.inv(spec.R) / lam**2,
            -np.eye(n),
            -alpha[i] * np.eye(n),
            -np.kron(np.diag(others), np.eye(n)) if N > 1 else np.zeros((0, 0)),
        ],
    )


def th2_block(spec: NetworkSpec, spectral: SpectralData, Y, alpha, beta):
    """Single LMI built from lambda extremes and worst-case p^2, q^2."""
    n, N = spec.n, spec.N
    lo, hi = spectral.lambda_min, spectral.lambda_max
    B1, B2 = spec.B1, spec.B2
    z = (spec.A @ Y + Y @ spec.A.T - (lo**2 / hi**2) * (B1 @ np.linalg.solve(spec.R, B1.T))
         + (alpha * spectral.p_sq + beta * spectral.q_sq) * (B2 @ B2.T))
    column = [sqrtm_psd(hi * spec.Q) @ Y, Y]
    diagonal = [-np.eye(n), -alpha * np.eye(n)]
    if N > 1:
        column.append(Y)
        diagonal.append(-(beta / (N - 1)) * np.eye(n))
    return _arrow(z, column, diagonal)


def _ranges(sizes):
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
    return tuple((int(a), int(b)) for a, b in zip(offsets[:-1], offsets[1:]))


def th1_layout(spec: NetworkSpec):
    layout = VariableLayout()
    layout.symmetric("Y", spec.n, positive_definite=True)
    layout.matrix("F", spec.m_in, spec.n)
    layout.vector("alpha", spec.N, positive=True)
    layout.vector("beta", spec.N, positive=True)
    return layout


def th2_layout(spec: NetworkSpec):
    layout = VariableLayout()
    layout.symmetric("Y", spec.n, positive_definite=True)
    layout.vector("alpha", 1, positive=True)
    layout.vector("beta", 1, positive=True)
    return layout


def assemble_th1(spec: NetworkSpec, spectral: SpectralData | None = None) -> AffineLmi:
    """Joint stack of the N subsystem blocks plus a ``-Y`` block."""
    spectral = spectral if spectral is not None else spectral_data(spec)
    if spectral.N != spec.N:
        raise DimensionMismatch(f"spectral data for {spectral.N} nodes, spec has {spec.N}")
    layout = th1_layout(spec)

    def value(x):
        v = layout.unpack(x)
        blocks = [th1_block(spec, spectral, i, v["Y"], v["F"], v["alpha"], v["beta"])
                  for i in range(spec.N)]
        return block_diag_sym(blocks + [-v["Y"]])

    sub = spec.n + spec.m_in + 2 * spec.n + spec.n * (spec.N - 1)
    return AffineLmi.from_callable(value, layout, _ranges([sub] * spec.N + [spec.n]))


def assemble_th2(spec: NetworkSpec, spectral: SpectralData | None = None) -> AffineLmi:
    spectral = spectral if spectral is not None else spectral_data(spec)
    layout = th2_layout(spec)

    def value(x):
        v = layout.unpack(x)
        main = th2_block(spec, spectral, v["Y"], v["alpha"][0], v["beta"][0])
        return block_diag_sym([main, -v["Y"]])

    main_size = (4 if spec.N > 1 else 3) * spec.n
    return AffineLmi.from_callable(value, layout, _ranges([main_size, spec.n]))


def riccati_matrix(spec, spectral, Y, F, pis, thetas, i):
    """Left side of the subsystem-``i`` Riccati inequality (must be ``< 0``)."""
    Y = np.asarray(Y, dtype=float)
    F = np.atleast_2d(np.asarray(F, dtype=float))
    pis = np.asarray(pis, dtype=float)
    thetas = np.asarray(thetas, dtype=float)
    if Y.shape != (spec.n, spec.n) or F.shape != (spec.m_in, spec.n):
        raise DimensionMismatch(f"Y is {Y.shape}, F is {F.shape}")
    if pis.shape != (spec.N,) or thetas.shape != (spec.N,):
        raise DimensionMismatch("need one pi and one theta per subsystem")
    lam = spectral.lambdas[i]
    theta_bar = thetas.sum() - thetas[i]
    B1, B2 = spec.B1, spec.B2
    return (spec.A @ Y + Y @ spec.A.T
            + (spectral.p[i] ** 2 / pis[i] + spectral.q[i] ** 2 / thetas[i]) * (B2 @ B2.T)
            + Y @ (lam * spec.Q + (pis[i] + theta_bar) * np.eye(spec.n)) @ Y
            + lam**2 * F.T @ spec.R @ F
            + lam * (F.T @ B1.T + B1 @ F))


def verify_riccati(spec, spectral, Y, F, pis, thetas, i) -> float:
    return negdef_margin(riccati_matrix(spec, spectral, Y, F, pis, thetas, i))


def th2_gain_numerator(spec, spectral):
    """``F = -(lam_min / lam_max**2) R^{-1} B1'`` shared by the lift and the gain."""
    lo, hi = spectral.lambda_min, spectral.lambda_max
    return -(lo / hi**2) * np.linalg.solve(spec.R, spec.B1.T)


@dataclass(frozen=True)
class LiftedSolution:
    Y: np.ndarray
    F: np.ndarray
    pis: np.ndarray
    thetas: np.ndarray
    riccati_margins: np.ndarray


def lift_to_coupled(spec, spectral, Y, pi, theta) -> LiftedSolution:
    """Map a single-LMI solution onto the coupled family and check every subsystem.

    Raises :class:`LiftRejected` when some Riccati margin is not positive,
    which for a genuinely feasible input means the margin was too thin.
    """
    N = spec.N
    F = th2_gain_numerator(spec, spectral)
    pis, thetas = np.full(N, float(pi)), np.full(N, float(theta))
    margins = np.array([verify_riccati(spec, spectral, Y, F, pis, thetas, i) for i in range(N)])
    if np.any(margins <= 0):
        bad = [i for i in range(N) if margins[i] <= 0]
        raise LiftRejected(f"lifted Riccati margins non-positive for subsystems {bad}", margins)
    return LiftedSolution(np.asarray(Y, dtype=float), F, pis, thetas, margins)


@dataclass(frozen=True)
class Bounds:
    bound_constant: float
    bound_total: float | None

    @property
    def total(self):
        if self.bound_total is None:
            raise MissingInitialState("bound_total requires the initial errors e0")
        return self.bound_total


@dataclass(frozen=True)
class SynthesisCertificate:
    """Everything needed to re-check a synthesised gain.

    ``lmi_margins`` are the margins of the solved LMI blocks (N subsystem
    blocks for th1, the single block for th2). ``block_margins`` are the
    coupled-family block margins at the certificate point (for th2: at the
    lifted point) and ``riccati_margins`` the matching Riccati margins.
    """

    method: str
    K: np.ndarray
    Y: np.ndarray
    F: np.ndarray
    pis: np.ndarray
    thetas: np.ndarray
    lambdas: np.ndarray
    lmi_margins: np.ndarray
    block_margins: np.ndarray
    riccati_margins: np.ndarray
    closed_loop_abscissa: np.ndarray
    bound_constant: float
    bound_total: float | None
    margin_tol: float = MARGIN_TOL
    diagnostics: dict = field(default_factory=dict)


def closed_loop_abscissa(spec, spectral, K):
    """Largest real eigenvalue part of ``A + lambda_i B1 K`` for every i."""
    K = np.atleast_2d(np.asarray(K, dtype=float))
    return np.array([np.linalg.eigvals(spec.A + lam * spec.B1 @ K).real.max()
                     for lam in spectral.lambdas])


def compute_bound(cert: SynthesisCertificate, spec: NetworkSpec, e0=None) -> Bounds:
    N = spec.N
    if cert.method == "th2":
        constant = N * (cert.pis[0] + cert.thetas[0] * (N - 1)) * spec.d
    else:
        constant = float(np.sum(cert.pis + cert.thetas * (N - 1)) * spec.d)
    e0 = spec.e0 if e0 is None else np.asarray(e0, dtype=float).reshape(N, spec.n)
    if e0 is None:
        return Bounds(float(constant), None)
    quad = np.einsum("ij,ij->", e0, np.linalg.solve(cert.Y, e0.T).T)
    return Bounds(float(constant), float(constant + quad))


def th1_block_margins(spec, spectral, Y, F, pis, thetas):
    alpha, beta = 1.0 / np.asarray(pis), 1.0 / np.asarray(thetas)
    return np.array([negdef_margin(th1_block(spec, spectral, i, Y, F, alpha, beta))
                     for i in range(spec.N)])


def synthesize(spec: NetworkSpec, method: str = "th1", margin_tol: float = MARGIN_TOL,
               **solver_options) -> SynthesisCertificate:
    """Solve the chosen LMI, extract ``K`` and certify it.

    Raises :class:`DegenerateNetwork` for a singular grounded Laplacian,
    :class:`Infeasible` when the solver finds no point with the required
    margin, and :class:`CertificateRejected` if post-hoc checks fail.
    """
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}, got {method!r}")
    spectral = spectral_data(spec)
    N = spec.N
    lmi = assemble_th1(spec, spectral) if method == "th1" else assemble_th2(spec, spectral)
    result = solve_feasibility(lmi, margin_tol, **solver_options)
    if not result.feasible:
        raise Infeasible(f"{method} LMI {result.status.value}: "
                         f"{result.diagnostics.get('reason', '')}", result)
    v = lmi.unpack(result.x)
    Y = v["Y"]
    lmi_margins = np.array(lmi.block_margins(result.x)[:-1])

    if method == "th1":
        F = v["F"]
        pis, thetas = 1.0 / v["alpha"], 1.0 / v["beta"]
        K = np.linalg.solve(Y.T, F.T).T  # F Y^{-1}
        riccati = np.array([verify_riccati(spec, spectral, Y, F, pis, thetas, i) for i in range(N)])
    else:
        try:
            lifted = lift_to_coupled(spec, spectral, Y, 1.0 / v["alpha"][0], 1.0 / v["beta"][0])
        except LiftRejected as exc:
            raise CertificateRejected(str(exc)) from exc
        F, pis, thetas, riccati = lifted.F, lifted.pis, lifted.thetas, lifted.riccati_margins
        K = np.linalg.solve(Y.T, F.T).T

    if np.any(riccati < margin_tol):
        raise CertificateRejected(f"Riccati margins {riccati} below {margin_tol:g}")
    blocks = th1_block_margins(spec, spectral, Y, F, pis, thetas)
    if np.any(blocks <= 0):
        raise CertificateRejected(f"coupled LMI block margins {blocks} not positive")
    abscissa = closed_loop_abscissa(spec, spectral, K)
    if np.any(abscissa >= 0):
        raise CertificateRejected(f"closed loop not Hurwitz: abscissae {abscissa}")

    cert = SynthesisCertificate(
        method=method, K=K, Y=Y, F=F, pis=pis, thetas=thetas,
        lambdas=spectral.lambdas.copy(), lmi_margins=lmi_margins, block_margins=blocks,
        riccati_margins=riccati, closed_loop_abscissa=abscissa,
        bound_constant=0.0, bound_total=None, margin_tol=margin_tol,
        diagnostics={"solver_margin": result.margin, "iterations": result.iterations,
                     "gap": float(result.diagnostics.get("gap", np.nan))},
    )
    bounds = compute_bound(cert, spec)
    return replace(cert, bound_constant=bounds.bound_constant, bound_total=bounds.bound_total)


@dataclass(frozen=True)
class Check:
    name: str
    value: float
    passed: bool


@dataclass(frozen=True)
class VerificationReport:
    method: str
    checks: tuple
    lifted_margins: np.ndarray | None = None

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    @property
    def failures(self):
        return [c for c in self.checks if not c.passed]


def verify_certificate(cert: SynthesisCertificate, spec: NetworkSpec,
                       margin_tol: float | None = None) -> VerificationReport:
    """Recompute every margin of ``cert`` from its matrices; stored margins are ignored."""
    tol = cert.margin_tol if margin_tol is None else margin_tol
    spectral = spectral_data(spec)
    Y, F, K = np.asarray(cert.Y), np.atleast_2d(cert.F), np.atleast_2d(cert.K)
    checks = []

    asym = float(np.abs(Y - Y.T).max())
    checks.append(Check("Y symmetric", asym, asym <= 1e-12 * max(1.0, np.abs(Y).max())))
    y_min = float(np.linalg.eigvalsh(0.5 * (Y + Y.T))[0])
    checks.append(Check("Y positive definite (min eig)", y_min, y_min > 0))
    pis, thetas = np.asarray(cert.pis, dtype=float), np.asarray(cert.thetas, dtype=float)
    checks.append(Check("multipliers positive (min)", float(min(pis.min(), thetas.min())),
                        bool(pis.min() > 0 and thetas.min() > 0)))
    lam_err = float(np.abs(np.asarray(cert.lambdas) - spectral.lambdas).max())
    checks.append(Check("eigenvalues match network", lam_err, lam_err <= 1e-9))

    if cert.method == "th1":
        gain_err = float(np.linalg.norm(K @ Y - F))
        checks.append(Check("gain consistency |KY - F|", gain_err, gain_err <= 1e-8))
    else:
        ref = th2_gain_numerator(spec, spectral)
        gain_err = float(np.linalg.norm(K - np.linalg.solve(Y.T, ref.T).T))
        checks.append(Check("gain consistency |K - F Y^-1|", gain_err, gain_err <= 1e-8))
        alpha, beta = 1.0 / pis[0], 1.0 / thetas[0]
        single = negdef_margin(block_diag_sym([th2_block(spec, spectral, Y, alpha, beta), -Y]))
        checks.append(Check("single LMI margin", single, single >= tol))

    blocks = th1_block_margins(spec, spectral, Y, F, pis, thetas)
    riccati = np.array([verify_riccati(spec, spectral, Y, F, pis, thetas, i) for i in range(spec.N)])
    abscissa = closed_loop_abscissa(spec, spectral, K)
    for i in range(spec.N):
        checks.append(Check(f"subsystem {i + 1} LMI block margin", float(blocks[i]), blocks[i] > 0))
        checks.append(Check(f"subsystem {i + 1} Riccati margin", float(riccati[i]), riccati[i] >= tol))
        checks.append(Check(f"subsystem {i + 1} Hurwitz abscissa", float(abscissa[i]),
                            abscissa[i] < -HURWITZ_TOL))

    lifted = None
    if cert.method == "th2":
        try:
            lifted = lift_to_coupled(spec, spectral, Y, pis[0], thetas[0]).riccati_margins
            checks.append(Check("lift accepted (min margin)", float(lifted.min()), True))
        except LiftRejected as exc:
            lifted = exc.margins
            checks.append(Check("lift accepted (min margin)", float(np.min(exc.margins)), False))

    if np.all(np.isfinite(Y)) and y_min > 0:
        bounds = compute_bound(cert, spec)
        checks.append(Check("bound_constant reproduces", bounds.bound_constant,
                            np.isclose(bounds.bound_constant, cert.bound_constant, rtol=1e-9, atol=1e-12)))
        if bounds.bound_total is not None and cert.bound_total is not None:
            checks.append(Check("bound_total reproduces", bounds.bound_total,
                                np.isclose(bounds.bound_total, cert.bound_total, rtol=1e-9, atol=1e-12)))
    return VerificationReport(cert.method, tuple(checks), lifted)
