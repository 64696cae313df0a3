import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from consensus_forge.coupling import (
    LtiFilter,
    MemorylessGain,
    admissibility,
    apply,
    energy_ledger,
    hinf_norm,
    iqc_admissible_gain,
    verify_iqc,
)
from consensus_forge.errors import DimensionMismatch

LOWPASS = LtiFilter([[-2.0]], [[1.0]], [[1.0]], [[0.0]])  # 1/(s+2)


def random_signal(rng, T=2000, n=2, dt=1e-2):
    t = np.arange(T) * dt
    freqs = rng.uniform(0.1, 5.0, size=(4, n))
    phases = rng.uniform(0, 2 * np.pi, size=(4, n))
    amps = rng.normal(size=(4, n))
    return (amps[None] * np.sin(freqs[None] * t[:, None, None] + phases[None])).sum(axis=1)


def test_identity_gain(rng):
    y = rng.normal(size=(50, 3))
    assert np.array_equal(apply(MemorylessGain(np.eye(3)), y, 0.1), y)


def test_scalar_gain_constant_signal():
    w = apply(MemorylessGain.scalar(0.5, 2), np.tile([1.0, 0.0], (10, 1)), 0.1)
    assert np.allclose(w, np.tile([0.5, 0.0], (10, 1)))


def test_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        apply(MemorylessGain(np.eye(2)), np.zeros((5, 3)), 0.1)
    with pytest.raises(DimensionMismatch):
        LtiFilter([[-1.0]], [[1.0]], [[1.0]], [[0.0, 0.0]])


def test_lowpass_amplitude_matches_frequency_response():
    dt = 1e-3
    t = np.arange(0, 40, dt)
    w = apply(LOWPASS, np.sin(t), dt)[:, 0]
    tail = w[t > 20]
    amp = 0.5 * (tail.max() - tail.min())
    assert amp == pytest.approx(1 / np.sqrt(5), rel=1e-2)
    assert abs(LOWPASS.frequency_response(1.0)[0, 0, 0]) == pytest.approx(1 / np.sqrt(5))


def test_filter_is_causal(rng):
    dt = 1e-2
    y = random_signal(rng, 500, 1)
    z = y.copy()
    z[300:] += 5.0
    assert np.array_equal(apply(LOWPASS, y, dt)[:300], apply(LOWPASS, z, dt)[:300])


@pytest.mark.parametrize("op", [MemorylessGain(np.array([[0.3, -1.2], [0.7, 0.4]])),
                                LtiFilter(np.diag([-1.0, -3.0]), np.eye(2), np.eye(2), 0.1 * np.eye(2))])
def test_linearity_and_antisymmetry(op, rng):
    y, z = random_signal(rng), random_signal(rng)
    dt = 1e-2
    lin = apply(op, y + z, dt) - apply(op, y, dt) - apply(op, z, dt)
    assert np.abs(lin).max() <= 1e-10
    odd = apply(op, -y, dt) + apply(op, y, dt)
    if isinstance(op, MemorylessGain):
        assert np.all(odd == 0)
    else:
        assert np.abs(odd).max() <= 1e-12


def test_unit_gain_iqc_is_tight(rng):
    dt = 1e-2
    y = random_signal(rng)
    ledger = verify_iqc(MemorylessGain(np.eye(2)), y, 0.0, [5.0, 10.0, 19.99], dt)
    assert ledger.passed
    assert np.allclose(ledger.input_energy, ledger.output_energy, rtol=1e-14)


def test_gain_above_one_fails(rng):
    ledger = verify_iqc(MemorylessGain.scalar(1.5, 2), random_signal(rng), 0.0, [1.0, 10.0], 1e-2)
    assert not ledger.passed


def test_offset_restores_iqc(rng):
    y = random_signal(rng)
    op = MemorylessGain.scalar(1.5, 2)
    ledger = verify_iqc(op, y, 0.0, [10.0], 1e-2)
    excess = ledger.output_energy[0] - ledger.input_energy[0]
    assert verify_iqc(op, y, excess * 1.01, [10.0], 1e-2).passed


def test_lowpass_passes_on_band_limited_signals(rng):
    assert hinf_norm(LOWPASS) == pytest.approx(0.5, rel=1e-9)
    dt = 1e-2
    for _ in range(10):
        y = random_signal(rng, n=1)
        assert verify_iqc(LOWPASS, y, 0.0, np.linspace(1, 19, 10), dt).passed


def test_check_times_outside_support():
    with pytest.raises(ValueError):
        energy_ledger(np.zeros((10, 1)), np.zeros((10, 1)), 0.1, 0.0, [2.0])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_contractive_gain_always_passes(seed):
    rng = np.random.default_rng(seed)
    G = rng.normal(size=(2, 2))
    G /= max(1.0, np.linalg.norm(G, 2)) * rng.uniform(1.0, 3.0)
    y = random_signal(rng, T=int(rng.integers(20, 500)))
    times = np.sort(rng.uniform(0, (len(y) - 1) * 1e-2, size=int(rng.integers(1, 20))))
    assert verify_iqc(MemorylessGain(G), y, 0.0, times, 1e-2).passed


@pytest.mark.parametrize("gain,ok", [(MemorylessGain.scalar(1.0, 2), True),
                                     (MemorylessGain.scalar(1.01, 2), False),
                                     (MemorylessGain.scalar(0.0, 2), True)])
def test_gain_admissibility(gain, ok):
    res = iqc_admissible_gain(gain)
    assert res.admissible is ok
    assert res.d_required == (0.0 if ok else None)


def test_rotation_is_admissible():
    a = 0.7
    rot = MemorylessGain(np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]]))
    assert iqc_admissible_gain(rot).admissible


def test_filter_admissibility():
    assert admissibility(LOWPASS).admissible
    assert not admissibility(LtiFilter([[-0.5]], [[1.0]], [[1.0]], [[0.0]])).admissible
    assert hinf_norm(LtiFilter([[0.1]], [[1.0]], [[1.0]], [[0.0]])) == np.inf
