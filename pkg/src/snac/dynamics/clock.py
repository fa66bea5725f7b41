"""Two-state clock model and Allan-variance fitting."""
from dataclasses import dataclass, replace

import numpy as np

from ..errors import DegenerateFit

# Chip-scale atomic clock noise coefficients.
DEFAULT_Q1 = 6.2e-21  # s
DEFAULT_Q2 = 1.2e-27  # 1/s


@dataclass(frozen=True)
class ClockState:
    """Clock offset (s) and drift (s/s) with white-frequency and random-walk coefficients."""

    offset: float = 0.0
    drift: float = 0.0
    q1: float = DEFAULT_Q1
    q2: float = DEFAULT_Q2

    def __post_init__(self):
        if self.q1 < 0 or self.q2 < 0:
            raise ValueError("clock noise coefficients must be non-negative")


def clock_stm(dt):
    return np.array([[1.0, dt], [0.0, 1.0]])


def clock_process_noise(q1, q2, dt):
    """Discrete process noise of the (offset, drift) pair over ``dt``."""
    return np.array(
        [
            [q1 * dt + q2 * dt**3 / 3.0, q2 * dt**2 / 2.0],
            [q2 * dt**2 / 2.0, q2 * dt],
        ]
    )


def clock_transition(clock, dt, rng):
    """Sample the clock state ``dt`` seconds later."""
    if dt < 0:
        raise ValueError("dt must be non-negative")
    x = clock_stm(dt) @ np.array([clock.offset, clock.drift])
    if dt > 0:
        Q = clock_process_noise(clock.q1, clock.q2, dt)
        x = x + np.linalg.cholesky(Q) @ rng.standard_normal(2)
    return replace(clock, offset=float(x[0]), drift=float(x[1]))


def bias_process_noise(q1, q2, dt, c):
    """Process noise of the stacked relative biases (c * offset, c * drift) of each deputy.

    Each deputy bias is the difference between its clock and the mothership
    clock, so all deputies share the mothership's noise.

    Parameters
    ----------
    q1, q2 : sequence of float
        Noise coefficients per spacecraft, index 0 being the mothership.
    """
    n_dep = len(q1) - 1
    Q_ref = clock_process_noise(q1[0], q2[0], dt)
    out = np.zeros((2 * n_dep, 2 * n_dep))
    for a in range(n_dep):
        for b in range(n_dep):
            blk = Q_ref.copy()
            if a == b:
                blk = blk + clock_process_noise(q1[a + 1], q2[a + 1], dt)
            out[2 * a : 2 * a + 2, 2 * b : 2 * b + 2] = c * c * blk
    return out


def allan_variance_model(tau, q1, q2):
    tau = np.asarray(tau, dtype=float)
    return q1 / tau + q2 * tau / 3.0


def allan_variance_fit(taus, avars, weights=None):
    """Fit ``sigma_y^2(tau) = q1 / tau + q2 * tau / 3``.

    Weighted least squares with relative weighting (each sample's residual is
    scaled by its own value unless ``weights`` is given); negative estimates are
    clamped to zero and the other coefficient is refit.

    Raises
    ------
    DegenerateFit
        If fewer than two distinct averaging times are supplied.
    """
    taus = np.asarray(taus, dtype=float)
    avars = np.asarray(avars, dtype=float)
    if np.unique(taus).size < 2:
        raise DegenerateFit("need at least two distinct averaging times")
    w = 1.0 / np.abs(avars) if weights is None else np.sqrt(np.asarray(weights, dtype=float))
    w = np.where(np.isfinite(w), w, 0.0)
    A = np.column_stack([1.0 / taus, taus / 3.0]) * w[:, None]
    b = avars * w
    q, *_ = np.linalg.lstsq(A, b, rcond=None)
    if q[0] < 0:
        q = np.array([0.0, max(0.0, float(np.dot(A[:, 1], b) / np.dot(A[:, 1], A[:, 1])))])
    elif q[1] < 0:
        q = np.array([max(0.0, float(np.dot(A[:, 0], b) / np.dot(A[:, 0], A[:, 0]))), 0.0])
    return float(q[0]), float(q[1])


def overlapping_allan_variance(phase, tau0, factors):
    """Overlapping Allan variance of a phase (time offset) series sampled every ``tau0``."""
    x = np.asarray(phase, dtype=float)
    out_tau, out_var = [], []
    for m in factors:
        if 2 * m >= x.size:
            continue
        d = x[2 * m :] - 2 * x[m:-m] + x[: -2 * m]
        tau = m * tau0
        out_tau.append(tau)
        out_var.append(np.mean(d * d) / (2.0 * tau * tau))
    return np.array(out_tau), np.array(out_var)
