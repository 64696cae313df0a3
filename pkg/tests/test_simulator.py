import dataclasses
import warnings

import numpy as np
import pytest
from scipy.linalg import solve_continuous_lyapunov

from consensus_forge.coupling import LtiFilter, MemorylessGain
from consensus_forge.errors import HorizonWarning, NumericalBlowup, UnsupportedOperator
from consensus_forge.network import build_laplacian
from consensus_forge.simulator import (
    SimConfig,
    check_bound,
    decomposition_residual,
    evaluate_cost,
    simulate,
    transform_errors,
)

E0 = np.tile([0.1, 0.0], (3, 1))


def config(k=0.5, t_final=20.0, dt=1e-3, x0=(0.1, 0.0), agents=None, coupling=None, stride=1):
    agents = np.zeros((3, 2)) if agents is None else agents
    coupling = MemorylessGain.scalar(k, 2) if coupling is None else coupling
    return SimConfig(t_final, dt, np.array(x0), agents, coupling, stride)


@pytest.fixture(scope="module")
def run_th1(spec, cert_th1):
    return simulate(spec, cert_th1.K, config())


def test_equilibrium_stays_put(spec, cert_th1):
    x0 = np.array([0.3, -0.2])
    res = simulate(spec, cert_th1.K, config(t_final=2.0, x0=x0, agents=np.tile(x0, (3, 1))))
    # leader and agents share one propagator, so only rounding separates them
    assert np.abs(res.errors).max() <= 1e-12
    assert np.abs(res.controls).max() <= 1e-10
    assert res.final_cost <= 1e-24
    assert evaluate_cost(res, spec).J_direct <= 1e-24


def test_leader_matches_analytic_solution(spec, cert_th1):
    res = simulate(spec, cert_th1.K, config(t_final=1.0, x0=(0.1, 0.2)))
    w = np.sqrt(10.0)
    exact = 0.1 * np.cos(w * 1.0) + 0.2 / w * np.sin(w * 1.0)
    assert res.t[-1] == pytest.approx(1.0)
    assert abs(res.leader[-1, 0] - exact) <= 1e-6


def test_uncoupled_cost_matches_lyapunov_oracle(spec, spectral, cert_th1):
    K = cert_th1.K
    lg = build_laplacian(spec.graph) + spec.pinning.matrix()
    acl = np.kron(np.eye(3), spec.A) + np.kron(lg, spec.B1 @ K)
    gain = np.kron(lg, K)
    W = np.kron(lg, spec.Q) + gain.T @ np.kron(np.eye(3), spec.R) @ gain
    P = solve_continuous_lyapunov(acl.T, -W)
    e0 = E0.ravel()
    oracle = e0 @ P @ e0
    res = simulate(spec, K, config(k=0.0))
    assert res.final_cost == pytest.approx(oracle, rel=5e-3)
    assert evaluate_cost(res, spec).J_direct == pytest.approx(oracle, rel=5e-3)


def test_running_cost_matches_quadrature(spec, run_th1):
    J = evaluate_cost(run_th1, spec)
    # RK4 stage quadrature versus trapezoid on the samples: both O(h^2) or better
    assert run_th1.final_cost == pytest.approx(J.J_direct, rel=1e-4)
    assert np.all(np.diff(run_th1.running_cost) >= 0)


@pytest.mark.parametrize("k", [0.0, 0.5, 1.0])
def test_cost_identities(spec, spectral, cert_th2, k):
    res = simulate(spec, cert_th2.K, config(k=k))
    c = evaluate_cost(res, spec, spectral)
    assert abs(c.J_direct - c.J_stacked) <= 1e-8 * c.J_direct
    assert abs(c.J_stacked - c.J_hat) <= 1e-6 * c.J_stacked


def test_zero_trajectory_costs(spec, cert_th1):
    res = simulate(spec, cert_th1.K, config(t_final=0.5, x0=(0, 0)))
    c = evaluate_cost(res, spec)
    assert (c.J_direct, c.J_stacked, c.J_hat) == (0.0, 0.0, 0.0)


def test_transform_is_isometry(spectral, run_th1):
    eps = transform_errors(run_th1, spectral)
    T = len(run_th1.t)
    assert np.allclose(np.linalg.norm(eps.reshape(T, -1), axis=1), run_th1.error_norm, rtol=1e-12)


def test_transform_matches_kronecker_product(spectral, run_th1):
    eps = transform_errors(run_th1, spectral)
    big = np.kron(spectral.T.T, np.eye(2))
    for k in (0, 137, 5000, len(run_th1.t) - 1):
        assert np.allclose(eps[k].ravel(), big @ run_th1.errors[k].ravel(), atol=1e-15)


def test_error_is_leader_minus_agents(run_th1):
    assert np.array_equal(run_th1.errors, run_th1.leader[:, None, :] - run_th1.agents)


def test_control_follows_protocol(spec, run_th1):
    k = 4321
    x0, X = run_th1.leader[k], run_th1.agents[k]
    A = spec.graph.adjacency()
    g = spec.pinning.gains
    for i in range(3):
        s = sum(A[i, j] * (X[j] - X[i]) for j in range(3)) + g[i] * (x0 - X[i])
        assert np.allclose(run_th1.controls[k, i], -run_th1.K @ s, atol=1e-15)


def test_residual_zero_cases(spec, spectral, cert_th1):
    res = simulate(spec, cert_th1.K, config(t_final=0.5, x0=(0, 0)))
    assert decomposition_residual(res, spectral, spec).overall == 0.0
    res = simulate(spec, cert_th1.K, config(k=0.0, t_final=2.0))
    r0 = decomposition_residual(res, spectral, spec)
    res = simulate(spec, cert_th1.K, config(k=0.0, t_final=2.0, dt=5e-4))
    r1 = decomposition_residual(res, spectral, spec)
    assert r1.overall == pytest.approx(r0.overall / 2, rel=0.05)


def test_residual_first_order(spec, spectral, cert_th1):
    out = []
    for dt in (2e-3, 1e-3, 5e-4):
        res = simulate(spec, cert_th1.K, config(t_final=2.0, dt=dt))
        out.append(decomposition_residual(res, spectral, spec).overall)
    ratios = np.array(out[:-1]) / np.array(out[1:])
    assert np.allclose(ratios, 2.0, rtol=0.05)


def test_residual_detects_wrong_gain(spec, spectral, cert_th1):
    res = simulate(spec, cert_th1.K, config(t_final=2.0))
    honest = decomposition_residual(res, spectral, spec).overall
    wrong = decomposition_residual(res, spectral, spec, K=1.5 * cert_th1.K).overall
    assert wrong > 5 * honest


def test_filter_coupling_simulates(spec, spectral, cert_th1):
    filt = LtiFilter(-2 * np.eye(2), np.eye(2), np.eye(2), np.zeros((2, 2)))
    res = simulate(spec, cert_th1.K, config(t_final=5.0, coupling=filt))
    assert res.iqc_passed
    c = evaluate_cost(res, spec)
    assert abs(c.J_direct - c.J_stacked) <= 1e-8 * c.J_direct
    with pytest.raises(UnsupportedOperator):
        decomposition_residual(res, spectral, spec)


def test_record_stride(spec, cert_th1, run_th1):
    res = simulate(spec, cert_th1.K, config(stride=10))
    assert len(res.t) == 2001
    assert np.allclose(res.agents, run_th1.agents[::10], atol=1e-15)
    assert res.final_cost == pytest.approx(run_th1.final_cost, rel=1e-12)


def test_blowup_is_reported(spec):
    with np.errstate(all="ignore"), pytest.raises(NumericalBlowup) as info:
        simulate(spec, np.array([[-100.0, -100.0]]), config())
    assert 0 < info.value.time <= 20.0


def test_invalid_config():
    with pytest.raises(ValueError):
        config(dt=0.0)
    with pytest.raises(ValueError):
        config(t_final=1e-4)


def test_bound_equality_edge(spec, cert_th1):
    zero = dataclasses.replace(cert_th1, bound_total=0.0)
    res = simulate(spec, cert_th1.K, config(t_final=1.0, x0=(0, 0)))
    check = check_bound(res, zero, spec)
    assert check.J_direct == 0 and check.bound_total == 0 and check.satisfied


def test_inadmissible_coupling_gets_no_verdict(spec, cert_th1):
    res = simulate(spec, cert_th1.K, config(k=2.0))
    check = check_bound(res, cert_th1, spec)
    assert check.satisfied is None and check.bound_total is None
    assert "coupling outside" in check.notice


def test_short_horizon_warns(spec, cert_th1):
    res = simulate(spec, cert_th1.K, config(t_final=0.5))
    with pytest.warns(HorizonWarning):
        check = check_bound(res, cert_th1, spec)
    assert check.satisfied and check.tail_indicator > 1e-4


def test_full_horizon_does_not_warn(spec, cert_th1, run_th1):
    with warnings.catch_warnings():
        warnings.simplefilter("error", HorizonWarning)
        check = check_bound(run_th1, cert_th1, spec)
    assert check.satisfied and check.bound_total == pytest.approx(cert_th1.bound_total, rel=1e-12)


def test_coupling_signals_are_antisymmetric(run_th1):
    pairs = [tuple(p) for p in run_th1.pairs]
    for a, (i, j) in enumerate(pairs):
        b = pairs.index((j, i))
        assert np.array_equal(run_th1.coupling_outputs[:, a], -run_th1.coupling_outputs[:, b])
