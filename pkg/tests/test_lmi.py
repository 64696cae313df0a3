import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import block_diag, sqrtm

from consensus_forge.errors import BlockNotNegativeDefinite, DimensionMismatch
from consensus_forge.lmi import (
    AffineLmi,
    Status,
    VariableLayout,
    eval_lmi,
    negdef_margin,
    schur_reduce,
    solve_feasibility,
    symmetric,
)
from consensus_forge.synthesis import assemble_th1, assemble_th2, th1_block


def scalar_lmi(fn, positive=False):
    layout = VariableLayout()
    layout.vector("x", 1, positive=positive)
    return AffineLmi.from_callable(lambda v: fn(v[0]), layout)


def test_eval_at_zero_is_constant():
    lmi = scalar_lmi(lambda x: np.array([[-1 + x, 0], [0, -x]]))
    assert np.array_equal(eval_lmi(lmi, [0.0]), [[-1, 0], [0, 0]])


def test_eval_single_variable():
    lmi = scalar_lmi(lambda x: np.array([[-1 + x, 0], [0, -x]]))
    assert np.allclose(eval_lmi(lmi, [0.5]), -0.5 * np.eye(2), atol=1e-15)


def test_eval_dimension_mismatch():
    lmi = scalar_lmi(lambda x: np.array([[x]]))
    with pytest.raises(DimensionMismatch):
        eval_lmi(lmi, [1.0, 2.0])


def test_negdef_margin_examples():
    assert negdef_margin(-np.eye(3)) == pytest.approx(1.0)
    assert negdef_margin(np.diag([-2.0, 0.5])) == pytest.approx(-0.5)


def test_symmetric_rejects_asymmetric():
    with pytest.raises(ValueError):
        symmetric([[0.0, 1.0], [0.0, 0.0]])


def test_schur_examples():
    assert np.allclose(schur_reduce(np.array([[-2.0, 1.0], [1.0, -1.0]]), 1), [[-1.0]])
    lead = np.array([[1.0, 2.0], [2.0, 3.0]])
    assert np.array_equal(schur_reduce(block_diag(lead, -np.eye(2)), 2), lead)
    with pytest.raises(BlockNotNegativeDefinite):
        schur_reduce(np.diag([-1.0, 1.0]), 1)


def test_schur_equivalence_random(rng):
    agree = 0
    for _ in range(200):
        a, k = rng.integers(1, 5), rng.integers(1, 5)
        n = a + k
        m = rng.normal(size=(n, n))
        m = m + m.T
        h = rng.normal(size=(k, k))
        d = -(h @ h.T + 0.1 * np.eye(k))
        m[a:, a:] = d
        m[:a, :a] -= rng.uniform(0, 6) * np.eye(a)
        lhs = negdef_margin(m) > 0
        rhs = negdef_margin(d) > 0 and negdef_margin(schur_reduce(m, a)) > 0
        assert lhs == rhs
        agree += lhs
    # both outcomes are exercised
    assert 0 < agree < 200


def test_solver_interval_example():
    lmi = scalar_lmi(lambda x: np.array([[-1 + x, 0], [0, -x]]), positive=True)
    res = solve_feasibility(lmi, 1e-7)
    assert res.status is Status.FEASIBLE
    assert 1e-8 < res.x[0] < 1 - 1e-7
    assert res.margin >= 1e-7
    assert res.x[0] == pytest.approx(0.5, abs=1e-6)


def test_solver_infeasible_example():
    lmi = scalar_lmi(lambda x: np.array([[x, 1.0], [1.0, -x]]))
    res = solve_feasibility(lmi, 1e-7)
    assert res.status is Status.INFEASIBLE
    assert res.diagnostics["margin_upper_bound"] < 1e-7


def test_solver_rejects_margin_beyond_reach():
    # best achievable margin is 0.5 at x = 0.5
    lmi = scalar_lmi(lambda x: np.array([[-1 + x, 0], [0, -x]]), positive=True)
    assert solve_feasibility(lmi, 0.49).feasible
    assert solve_feasibility(lmi, 0.51).status is Status.INFEASIBLE


@pytest.mark.parametrize("tol", [1e-3, 1e-5, 1e-7, 1e-9])
def test_shrinking_tolerance_keeps_feasibility(spec, tol):
    lmi = assemble_th2(spec)
    res = solve_feasibility(lmi, tol)
    assert res.feasible and res.margin >= tol


def test_feasible_answers_meet_margin(spec):
    for lmi in (assemble_th1(spec), assemble_th2(spec)):
        res = solve_feasibility(lmi, 1e-7)
        assert res.feasible
        assert negdef_margin(eval_lmi(lmi, res.x)) >= 1e-7
        Y = lmi.unpack(res.x)["Y"]
        assert np.linalg.eigvalsh(Y).min() > 0


def test_affinity(spec, rng):
    for lmi in (assemble_th1(spec), assemble_th2(spec)):
        x, y = rng.normal(size=(2, lmi.variable_count))
        residual = eval_lmi(lmi, x + y) - eval_lmi(lmi, x) - eval_lmi(lmi, y) + lmi.constant
        assert np.abs(residual).max() <= 1e-12 * max(1.0, np.abs(eval_lmi(lmi, x)).max())


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=3, max_size=3),
       st.lists(st.floats(-10, 10), min_size=3, max_size=3))
def test_affinity_property(x, y):
    layout = VariableLayout()
    layout.symmetric("Y", 2)
    A = np.array([[0.0, 1.0], [-10.0, 0.0]])
    lmi = AffineLmi.from_callable(lambda v: A @ layout.unpack(v)["Y"] + layout.unpack(v)["Y"] @ A.T
                                  + np.eye(2), layout)
    x, y = np.array(x), np.array(y)
    residual = eval_lmi(lmi, x + y) - eval_lmi(lmi, x) - eval_lmi(lmi, y) + lmi.constant
    assert np.abs(residual).max() <= 1e-12 * (1 + np.abs(x).max() + np.abs(y).max()) * 20


def _hand_th2(spec, spectral, Y, alpha, beta):
    A, B1, B2, Q, R = spec.A, spec.B1, spec.B2, spec.Q, spec.R
    lo, hi = spectral.lambdas.min(), spectral.lambdas.max()
    p2 = max(spectral.p**2)
    q2 = max(spectral.q**2)
    n, N = spec.n, spec.N
    Z = A @ Y + Y @ A.T - (lo / hi) ** 2 * B1 @ np.linalg.inv(R) @ B1.T + (alpha * p2 + beta * q2) * B2 @ B2.T
    S = np.real(sqrtm(hi * Q)) @ Y
    O = np.zeros((n, n))
    return np.block([
        [Z, S.T, Y, Y],
        [S, -np.eye(n), O, O],
        [Y, O, -alpha * np.eye(n), O],
        [Y, O, O, -beta / (N - 1) * np.eye(n)],
    ])


def test_th2_assembly_matches_hand_blocks(spec, spectral, rng):
    lmi = assemble_th2(spec, spectral)
    assert lmi.dim == 10
    for _ in range(5):
        x = rng.normal(size=lmi.variable_count)
        v = lmi.unpack(x)
        expected = block_diag(_hand_th2(spec, spectral, v["Y"], v["alpha"][0], v["beta"][0]), -v["Y"])
        assert np.allclose(eval_lmi(lmi, x), expected, atol=1e-12)


def test_th1_block_margin_by_independent_eigensolver(spec, spectral, cert_th1):
    from scipy.linalg import eigh
    alpha, beta = 1 / cert_th1.pis, 1 / cert_th1.thetas
    for i in range(spec.N):
        block = th1_block(spec, spectral, i, cert_th1.Y, cert_th1.F, alpha, beta)
        assert block.shape == (11, 11)
        top = eigh(block, eigvals_only=True, subset_by_index=[10, 10])[0]
        assert -top > 1e-7


def _cvxpy_th2_margin(spec, spectral, radius=1e5):
    """Best margin of the single LMI (with Y, alpha, beta bounded away from 0) via a conic solver."""
    cp = pytest.importorskip("cvxpy")
    n, N = spec.n, spec.N
    A, B1, B2, Q, R = spec.A, spec.B1, spec.B2, spec.Q, spec.R
    lo, hi = spectral.lambdas.min(), spectral.lambdas.max()
    p2, q2 = max(spectral.p**2), max(spectral.q**2)
    Y = cp.Variable((n, n), symmetric=True)
    alpha, beta, t = cp.Variable(), cp.Variable(), cp.Variable()
    S = np.real(sqrtm(hi * Q))
    Z = A @ Y + Y @ A.T - (lo / hi) ** 2 * B1 @ np.linalg.inv(R) @ B1.T + (alpha * p2 + beta * q2) * (B2 @ B2.T)
    O, I = np.zeros((n, n)), np.eye(n)
    M = cp.bmat([
        [Z, (S @ Y).T, Y, Y],
        [S @ Y, -I, O, O],
        [Y, O, -alpha * I, O],
        [Y, O, O, -beta / (N - 1) * I],
    ])
    Ms = (M + M.T) / 2
    packed = cp.hstack([Y[0, 0], Y[0, 1], Y[1, 1], alpha, beta])
    cons = [Ms << -t * np.eye(4 * n), Y >> t * I, alpha >= t, beta >= t, cp.norm(packed) <= radius]
    prob = cp.Problem(cp.Maximize(t), cons)
    prob.solve(solver=cp.CLARABEL)
    assert prob.status == cp.OPTIMAL
    return float(t.value)


def test_th2_feasibility_agrees_with_conic_solver(spec, spectral):
    oracle = _cvxpy_th2_margin(spec, spectral)
    lmi = assemble_th2(spec, spectral)
    res = solve_feasibility(lmi, 1e-7)
    assert oracle > 1e-7 and res.feasible
    v = lmi.unpack(res.x)
    ours = min(res.margin, v["alpha"][0], v["beta"][0])
    # both maximise the same margin over the same ball
    assert ours == pytest.approx(oracle, rel=1e-4)
