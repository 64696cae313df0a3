"""Linear coupling operators between agents and IQC bookkeeping.

An operator phi maps a relative-state signal y(t) in R^n to a coupling
signal in R^{n_w}. It is admissible when, for the chosen check times t_l,

    int_0^{t_l} |phi(y)|^2 dt <= int_0^{t_l} |y|^2 dt + d.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import cumulative_trapezoid

from .errors import DimensionMismatch

IQC_RTOL = 1e-6
# numerical slack when comparing a singular value or H-infinity norm to 1
GAIN_TOL = 1e-12


@dataclass(frozen=True)
class MemorylessGain:
    """phi(y)(t) = gain @ y(t)."""

    gain: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "gain", np.atleast_2d(np.asarray(self.gain, dtype=float)))

    @classmethod
    def scalar(cls, k, n):
        return cls(k * np.eye(n))

    @property
    def input_dim(self):
        return self.gain.shape[1]

    @property
    def output_dim(self):
        return self.gain.shape[0]

    @property
    def order(self):
        return 0


@dataclass(frozen=True)
class LtiFilter:
    """Causal state-space filter ``z' = A z + B y, w = C z + D y``, zero initial state."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray

    def __post_init__(self):
        mats = {k: np.atleast_2d(np.asarray(getattr(self, k), dtype=float)) for k in "ABCD"}
        nf = mats["A"].shape[0]
        if mats["A"].shape != (nf, nf) or mats["B"].shape[0] != nf or mats["C"].shape[1] != nf:
            raise DimensionMismatch("inconsistent filter state dimension")
        if mats["D"].shape != (mats["C"].shape[0], mats["B"].shape[1]):
            raise DimensionMismatch(f"D is {mats['D'].shape}, expected "
                                    f"{(mats['C'].shape[0], mats['B'].shape[1])}")
        for k, v in mats.items():
            object.__setattr__(self, k, v)

    @property
    def input_dim(self):
        return self.B.shape[1]

    @property
    def output_dim(self):
        return self.C.shape[0]

    @property
    def order(self):
        return self.A.shape[0]

    def frequency_response(self, omega):
        nf = self.order
        return np.array([self.C @ np.linalg.solve(1j * w * np.eye(nf) - self.A, self.B) + self.D
                         for w in np.atleast_1d(omega)])


CouplingOperator = MemorylessGain | LtiFilter


def _check_signal(op, y):
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    if y.shape[1] != op.input_dim:
        raise DimensionMismatch(f"signal has {y.shape[1]} channels, operator expects {op.input_dim}")
    return y


def apply(op, y, dt):
    """Response of ``op`` to the uniformly sampled signal ``y`` (shape ``(T, n)``).

    Filters are integrated with classical RK4, the input linearly
    interpolated at half steps.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    y = _check_signal(op, y)
    if isinstance(op, MemorylessGain):
        return y @ op.gain.T
    z = np.zeros(op.order)
    out = np.empty((y.shape[0], op.output_dim))
    for k in range(y.shape[0]):
        out[k] = op.C @ z + op.D @ y[k]
        if k + 1 == y.shape[0]:
            break
        y0, y1 = y[k], y[k + 1]
        ym = 0.5 * (y0 + y1)
        k1 = op.A @ z + op.B @ y0
        k2 = op.A @ (z + 0.5 * dt * k1) + op.B @ ym
        k3 = op.A @ (z + 0.5 * dt * k2) + op.B @ ym
        k4 = op.A @ (z + dt * k3) + op.B @ y1
        z = z + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return out


@dataclass(frozen=True)
class IqcLedger:
    check_times: np.ndarray
    input_energy: np.ndarray
    output_energy: np.ndarray
    d: float
    rtol: float = IQC_RTOL

    @property
    def slack(self):
        """``input + d - output`` at every check time (non-negative when satisfied)."""
        return self.input_energy + self.d - self.output_energy

    @property
    def passed(self):
        tol = self.rtol * np.maximum(self.input_energy, np.finfo(float).tiny)
        return bool(np.all(self.slack >= -tol))


def energy_ledger(y, w, dt, d, check_times=None, rtol=IQC_RTOL):
    """Trapezoidal energies of input ``y`` and output ``w`` up to each check time."""
    y = np.asarray(y, dtype=float).reshape(len(y), -1)
    w = np.asarray(w, dtype=float).reshape(len(w), -1)
    times = np.arange(len(y)) * dt
    e_in = cumulative_trapezoid((y**2).sum(axis=1), dx=dt, initial=0.0)
    e_out = cumulative_trapezoid((w**2).sum(axis=1), dx=dt, initial=0.0)
    if check_times is None:
        check_times = times[1:]
    check_times = np.asarray(check_times, dtype=float)
    if np.any(check_times < 0) or np.any(check_times > times[-1] * (1 + 1e-12)):
        raise ValueError("check times must lie within the signal support")
    return IqcLedger(check_times, np.interp(check_times, times, e_in),
                     np.interp(check_times, times, e_out), float(d), rtol)


def verify_iqc(op, y, d, check_times, dt, rtol=IQC_RTOL) -> IqcLedger:
    """Run ``y`` through ``op`` and ledger the IQC; never raises on violation."""
    return energy_ledger(y, apply(op, y, dt), dt, d, check_times, rtol)


@dataclass(frozen=True)
class Admissibility:
    admissible: bool
    gain_bound: float
    d_required: float | None


def iqc_admissible_gain(op: MemorylessGain) -> Admissibility:
    """Admissible with d = 0 iff the largest singular value of the gain is at most 1."""
    sigma = float(np.linalg.norm(op.gain, 2)) if op.gain.size else 0.0
    ok = sigma <= 1.0 + GAIN_TOL
    return Admissibility(ok, sigma, 0.0 if ok else None)


def hinf_norm(op: LtiFilter, n_grid=4000):
    """Peak singular value of the frequency response over a log grid (inf if unstable)."""
    if op.order and np.linalg.eigvals(op.A).real.max() >= 0:
        return np.inf
    if not op.order:
        return float(np.linalg.norm(op.D, 2))
    poles = np.abs(np.linalg.eigvals(op.A))
    lo, hi = max(poles.min(), 1e-3) * 1e-4, max(poles.max(), 1.0) * 1e4
    omega = np.concatenate([[0.0], np.geomspace(lo, hi, n_grid)])
    resp = op.frequency_response(omega)
    peak = max(np.linalg.norm(h, 2) for h in resp)
    return float(max(peak, np.linalg.norm(op.D, 2)))


def admissibility(op) -> Admissibility:
    if isinstance(op, MemorylessGain):
        return iqc_admissible_gain(op)
    norm = hinf_norm(op)
    ok = norm <= 1.0 + GAIN_TOL
    return Admissibility(ok, norm, 0.0 if ok else None)
