"""Unscented Kalman filter for the joint swarm / body / landmark state.

State ordering::

    [alpha, delta, omega | mu, Cbar.., Sbar.. | r_i, v_i, C_r,i (per spacecraft)
     | b_j, bdot_j (per deputy) | L_1 .. L_nl]

Parameters and landmarks have identity dynamics, the clock biases evolve
linearly and only the spacecraft blocks need orbit propagation. Because the
lower Cholesky factor has zeros above the diagonal, a sigma point built from
column ``j`` leaves every coordinate before ``j`` at the mean, so spacecraft
``i`` only needs propagations for columns up to the end of its own block.
"""
import csv
import logging
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from .dynamics.clock import DEFAULT_Q1, DEFAULT_Q2, bias_process_noise, clock_stm
from .dynamics.gravity import n_coefficients, unpack_coefficients
from .dynamics.propagation import C_LIGHT, ForceModel, rk4_batch
from .dynamics.rotation import aci_to_acaf_batch
from .errors import CholeskyFailure, UnknownId

log = logging.getLogger(__name__)

SC_BLOCK = 7  # position, velocity, SRP coefficient


@dataclass(frozen=True)
class StateLayout:
    n_spacecraft: int
    gravity_degree: int
    n_landmarks: int = 0

    @property
    def n_gravity(self):
        return n_coefficients(self.gravity_degree)

    @property
    def psi(self):
        return np.arange(0, 3)

    @property
    def mu(self):
        return 3

    @property
    def gravity(self):
        return np.arange(4, 4 + self.n_gravity)

    @property
    def parameter_end(self):
        return 4 + self.n_gravity

    def spacecraft(self, i):
        """Indices of (position, velocity, C_r) of spacecraft ``i``."""
        b = self.parameter_end + SC_BLOCK * i
        return np.arange(b, b + SC_BLOCK)

    def position(self, i):
        return self.spacecraft(i)[:3]

    def velocity(self, i):
        return self.spacecraft(i)[3:6]

    def srp(self, i):
        return int(self.spacecraft(i)[6])

    @property
    def bias_start(self):
        return self.parameter_end + SC_BLOCK * self.n_spacecraft

    def bias(self, i):
        """(b, bdot) indices of spacecraft ``i``; None for the reference spacecraft."""
        if i == 0:
            return None
        b = self.bias_start + 2 * (i - 1)
        return np.array([b, b + 1])

    @property
    def landmark_start(self):
        return self.bias_start + 2 * (self.n_spacecraft - 1)

    def landmark(self, slot):
        b = self.landmark_start + 3 * slot
        return np.arange(b, b + 3)

    @property
    def size(self):
        return self.landmark_start + 3 * self.n_landmarks

    def names(self):
        out = ["alpha", "delta", "omega", "mu"]
        out += [f"g{k}" for k in range(self.n_gravity)]
        for i in range(self.n_spacecraft):
            out += [f"sc{i}_{c}" for c in ("x", "y", "z", "vx", "vy", "vz", "cr")]
        for i in range(1, self.n_spacecraft):
            out += [f"sc{i}_bias", f"sc{i}_bias_rate"]
        for k in range(self.n_landmarks):
            out += [f"lm{k}_{c}" for c in "xyz"]
        return out


@dataclass
class FilterEstimate:
    """Filter mean and covariance; ``landmark_ids[slot]`` names each tail landmark."""

    mean: np.ndarray
    covariance: np.ndarray
    epoch: float
    n_spacecraft: int
    gravity_degree: int
    landmark_ids: list = field(default_factory=list)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.covariance = np.asarray(self.covariance, dtype=float)
        n = self.layout.size
        if self.mean.shape != (n,) or self.covariance.shape != (n, n):
            raise ValueError(f"state size {self.mean.shape} does not match layout size {n}")

    @property
    def layout(self):
        return StateLayout(self.n_spacecraft, self.gravity_degree, len(self.landmark_ids))

    @property
    def size(self):
        return len(self.mean)

    def slot(self, landmark_id):
        try:
            return self.landmark_ids.index(landmark_id)
        except ValueError:
            raise UnknownId(landmark_id) from None

    def landmark(self, landmark_id):
        idx = self.layout.landmark(self.slot(landmark_id))
        return self.mean[idx], self.covariance[np.ix_(idx, idx)]

    def position(self, i):
        return self.mean[self.layout.position(i)]

    def velocity(self, i):
        return self.mean[self.layout.velocity(i)]

    def bias(self, i):
        idx = self.layout.bias(i)
        return (0.0, 0.0) if idx is None else (float(self.mean[idx[0]]), float(self.mean[idx[1]]))

    @property
    def psi(self):
        return self.mean[:3]

    def block(self, idx):
        return self.covariance[np.ix_(idx, idx)]

    def copy(self):
        return replace(self, mean=self.mean.copy(), covariance=self.covariance.copy(), landmark_ids=list(self.landmark_ids))


@dataclass(frozen=True)
class UkfConfig:
    """Filter tuning. ``underweight`` multiplies the sigma-point measurement covariance."""

    alpha: float = 1e-3
    beta: float = 2.0
    kappa: float = 0.0
    underweight: float = 2.0
    stereo_inflation: float = 2.0
    gravity_degree: int = 8
    range_sigma: float = 0.10
    rate_sigma: float = 1e-3
    pixel_sigma: float = 2.0
    gate_sigma: float = None
    substeps: int = 2

    def __post_init__(self):
        if self.underweight < 1:
            raise ValueError("underweight factor must be at least 1")
        if self.stereo_inflation < 1:
            raise ValueError("stereo inflation must be at least 1")


@dataclass(frozen=True)
class FilterDynamics:
    """Filter force model and clock noise.

    ``q1`` and ``q2`` are per-spacecraft clock noise coefficients, index 0
    being the reference clock.
    """

    force: ForceModel
    area_to_mass: tuple
    q1: tuple = None
    q2: tuple = None
    c: float = C_LIGHT

    def clock_noise(self, n_spacecraft):
        q1 = self.q1 if self.q1 is not None else (DEFAULT_Q1,) * n_spacecraft
        q2 = self.q2 if self.q2 is not None else (DEFAULT_Q2,) * n_spacecraft
        return q1, q2


# -- sigma points -----------------------------------------------------------------------


def sigma_weights(n, config):
    lam = config.alpha**2 * (n + config.kappa) - n
    wm = np.full(2 * n + 1, 0.5 / (n + lam))
    wc = wm.copy()
    wm[0] = lam / (n + lam)
    wc[0] = wm[0] + 1.0 - config.alpha**2 + config.beta
    return wm, wc, np.sqrt(n + lam)


def repair_covariance(P):
    """Symmetrize and clamp eigenvalues at ``1e-12 * trace``."""
    P = 0.5 * (P + P.T)
    w, V = np.linalg.eigh(P)
    floor = 1e-12 * max(np.trace(P), np.finfo(float).tiny)
    w = np.maximum(w, floor)
    return (V * w) @ V.T


def lower_cholesky(P):
    """Lower Cholesky factor; an indefinite input is repaired and logged.

    Returns ``(S, P_used)``.
    """
    try:
        return np.linalg.cholesky(P), P
    except np.linalg.LinAlgError:
        log.warning("covariance not positive definite; clamping eigenvalues")
    P = repair_covariance(P)
    try:
        return np.linalg.cholesky(P), P
    except np.linalg.LinAlgError as exc:
        raise CholeskyFailure("covariance repair failed") from exc


def sigma_points(mean, S, gamma):
    n = len(mean)
    X = np.empty((2 * n + 1, n))
    X[0] = mean
    X[1 : n + 1] = mean + gamma * S.T
    X[n + 1 :] = mean - gamma * S.T
    return X


def unscented_moments(Y, wm, wc):
    """Weighted mean and covariance, with deviations taken from the central point first."""
    D0 = Y - Y[0]
    mean = Y[0] + wm @ D0
    D = Y - mean
    cov = (D.T * wc) @ D
    return mean, 0.5 * (cov + cov.T)


# -- time update -------------------------------------------------------------------------


@dataclass
class TimeUpdateRecord:
    """Quantities kept for adaptive noise estimation."""

    dt: float
    propagated_covariance: np.ndarray
    process_noise: np.ndarray
    propagations: int


def _propagate_rows(X, layout, i, t0, dt, dynamics, config):
    """Propagate spacecraft ``i`` for each sigma-point row of ``X``."""
    sc = layout.spacecraft(i)
    mu = X[:, layout.mu]
    C, S = unpack_coefficients(X[:, layout.gravity], layout.gravity_degree)
    y = X[:, sc[:6]]
    cr = X[:, sc[6]]
    am = np.full(len(X), dynamics.area_to_mass[i])
    return rk4_batch(dynamics.force, t0, dt, y, mu, C, S, X[:, :3], cr, am, config.substeps)


def process_noise(layout, dt, qtilde, dynamics):
    """Process noise of the full state.

    ``qtilde[i]`` is the diagonal unmodeled-acceleration spectral density of
    spacecraft ``i`` (m^2/s^3).
    """
    Q = np.zeros((layout.size, layout.size))
    T = np.array([[dt**3 / 3.0, dt**2 / 2.0], [dt**2 / 2.0, dt]])
    for i in range(layout.n_spacecraft):
        pv = layout.spacecraft(i)[:6]
        Q[np.ix_(pv, pv)] = np.kron(T, np.diag(qtilde[i]))
    if layout.n_spacecraft > 1:
        q1, q2 = dynamics.clock_noise(layout.n_spacecraft)
        Qb = bias_process_noise(q1, q2, dt, dynamics.c)
        b = np.arange(layout.bias_start, layout.landmark_start)
        Q[np.ix_(b, b)] = Qb
    return Q


def propagate_sigma_points(X, S, layout, t0, dt, dynamics, config, ets=True):
    """Map sigma points through the dynamics; returns (Y, number of orbit propagations)."""
    n = layout.size
    Y = X.copy()
    count = 0
    for i in range(layout.n_spacecraft):
        sc = layout.spacecraft(i)
        if ets:
            # columns after this spacecraft's block leave its inputs at the mean
            last = int(sc[-1])
            rows = np.concatenate([[0], np.arange(1, last + 2), np.arange(n + 1, n + last + 2)])
            out = _propagate_rows(X[rows], layout, i, t0, dt, dynamics, config)
            count += len(rows)
            Y[:, sc[:6]] = out[0]
            Y[rows[:, None], sc[None, :6]] = out
        else:
            Y[:, sc[:6]] = _propagate_rows(X, layout, i, t0, dt, dynamics, config)
            count += len(X)
    Phi = clock_stm(dt)
    for i in range(1, layout.n_spacecraft):
        b = layout.bias(i)
        Y[:, b] = X[:, b] @ Phi.T
    return Y, count


def time_update(est, dt, dynamics, qtilde, config=UkfConfig(), ets=True):
    """Propagate the estimate by ``dt`` seconds.

    Parameters
    ----------
    qtilde : sequence of (3,) arrays
        Unmodeled-acceleration spectral densities, one per spacecraft.
    ets : bool
        Reuse propagations across sigma points that differ only in trailing
        identity-dynamics coordinates. The result equals the plain
        unscented transform.

    Returns
    -------
    FilterEstimate, TimeUpdateRecord
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    layout = est.layout
    n = layout.size
    wm, wc, gamma = sigma_weights(n, config)
    S, _ = lower_cholesky(est.covariance)
    X = sigma_points(est.mean, S, gamma)
    Y, count = propagate_sigma_points(X, S, layout, est.epoch, dt, dynamics, config, ets=ets)
    mean, P = unscented_moments(Y, wm, wc)
    Q = process_noise(layout, dt, qtilde, dynamics)
    out = replace(est, mean=mean, covariance=P + Q, epoch=est.epoch + dt, landmark_ids=list(est.landmark_ids))
    return out, TimeUpdateRecord(dt, P, Q, count)


# -- augmentation -------------------------------------------------------------------------


@dataclass
class StereoEstimate:
    """Triangulated landmark ready to join the state.

    ``cross`` is the (3, n) landmark/state cross-covariance and
    ``sensitivity`` the (3, n) map from state errors to landmark errors, used
    for cross terms between landmarks created from the same belief.
    """

    landmark_id: int
    position: np.ndarray
    covariance: np.ndarray
    cross: np.ndarray
    sensitivity: np.ndarray = None


def augment(est, stereo, config=UkfConfig()):
    """Append landmarks to the state tail.

    Each landmark's own covariance block is multiplied by
    ``stereo_inflation``; cross-covariances with the state and between new
    landmarks are kept as computed. This adds independent uncertainty only,
    so the linear dependence of the landmark on the state is unchanged and
    the joint matrix stays PSD for factors of at least one. Landmarks whose
    conditional covariance given the state is indefinite are dropped.

    Returns
    -------
    FilterEstimate, list of dropped ids
    """
    if not stereo:
        return est, []
    n = est.size
    P = est.covariance
    kept, dropped = [], []
    Pinv_solve = _psd_solver(P)
    for s in stereo:
        C = s.cross
        schur = s.covariance - C @ Pinv_solve(C.T)
        if np.linalg.eigvalsh(0.5 * (schur + schur.T))[0] < -1e-9 * np.trace(s.covariance):
            log.warning("dropping landmark %s: indefinite augmented covariance", s.landmark_id)
            dropped.append(s.landmark_id)
            continue
        kept.append(s)
    if not kept:
        return est, dropped
    f = config.stereo_inflation
    m = 3 * len(kept)
    Pn = np.zeros((n + m, n + m))
    Pn[:n, :n] = P
    for a, sa in enumerate(kept):
        ia = slice(n + 3 * a, n + 3 * a + 3)
        Pn[ia, :n] = sa.cross
        Pn[:n, ia] = sa.cross.T
        Pn[ia, ia] = f * sa.covariance
        for b in range(a):
            sb = kept[b]
            if sa.sensitivity is None or sb.sensitivity is None:
                continue
            ib = slice(n + 3 * b, n + 3 * b + 3)
            blk = sa.sensitivity @ P @ sb.sensitivity.T
            Pn[ia, ib] = blk
            Pn[ib, ia] = blk.T
    mean = np.concatenate([est.mean] + [np.asarray(s.position, float) for s in kept])
    ids = list(est.landmark_ids) + [s.landmark_id for s in kept]
    return replace(est, mean=mean, covariance=0.5 * (Pn + Pn.T), landmark_ids=ids), dropped


def _psd_solver(P):
    try:
        cf = np.linalg.cholesky(P)
    except np.linalg.LinAlgError:
        pinv = np.linalg.pinv(P, hermitian=True)
        return lambda B: pinv @ B

    def solve(B):
        y = np.linalg.solve(cf, B)
        return np.linalg.solve(cf.T, y)

    return solve


# -- measurement update ---------------------------------------------------------------------


@dataclass
class PixelObservation:
    landmark_id: int
    spacecraft: int
    pixel: np.ndarray


@dataclass
class CameraGeometry:
    """Per-spacecraft calibration and measured inertial-to-camera attitude."""

    calibration: np.ndarray
    attitude: np.ndarray


@dataclass
class InnovationRecord:
    innovations: np.ndarray
    innovation_covariance: np.ndarray
    kinds: list
    correction: np.ndarray
    posterior_covariance: np.ndarray
    n_pixels: int
    dropped: list = field(default_factory=list)
    # (f - 1) K P_hh K^T: correction covariance withheld by underweighting
    underweight_excess: np.ndarray = None

    def normalized(self):
        d = np.sqrt(np.diag(self.innovation_covariance))
        return self.innovations / d if len(d) else np.zeros(0)


def _rf_predict(Xs, layout, meas):
    pi = Xs[:, layout.position(meas.transmitter)]
    vi = Xs[:, layout.velocity(meas.transmitter)]
    pj = Xs[:, layout.position(meas.receiver)]
    vj = Xs[:, layout.velocity(meas.receiver)]
    rho = pj - pi
    rng_ = np.sqrt(np.sum(rho * rho, axis=1))
    rate = np.sum((vj - vi) * rho, axis=1) / rng_

    def bias(i):
        idx = layout.bias(i)
        if idx is None:
            return 0.0, 0.0
        return Xs[:, idx[0]], Xs[:, idx[1]]

    bi, ri = bias(meas.transmitter)
    bj, rj = bias(meas.receiver)
    return rng_ + bj - bi, rate + rj - ri


def _pixel_predict(Xs, est, obs, cam, w0, t):
    layout = est.layout
    L = Xs[:, layout.landmark(est.slot(obs.landmark_id))]
    r = Xs[:, layout.position(obs.spacecraft)]
    M = aci_to_acaf_batch(Xs[:, :3], w0, t)
    p_aci = np.einsum("kji,kj->ki", M, L)
    p_cf = (p_aci - r) @ cam.attitude.T
    q = p_cf @ cam.calibration.T
    return q[:, 0] / q[:, 2], q[:, 1] / q[:, 2]


def predict_measurements(X, est, rf, pixels, cameras, w0):
    """Stacked predicted measurements for each sigma point and their kinds."""
    cols, kinds = [], []
    layout = est.layout
    for m in rf:
        rho, rate = _rf_predict(X, layout, m)
        cols += [rho, rate]
        kinds += ["range", "rate"]
    for obs in pixels:
        u, v = _pixel_predict(X, est, obs, cameras[obs.spacecraft], w0, est.epoch)
        cols += [u, v]
        kinds += ["u", "v"]
    if not cols:
        return np.zeros((len(X), 0)), kinds
    return np.column_stack(cols), kinds


def measurement_update(est, rf, pixels, cameras, w0, config=UkfConfig()):
    """Unscented update with RF and pixel measurements.

    Parameters
    ----------
    rf : list of RfMeasurement
    pixels : list of PixelObservation
    cameras : dict spacecraft -> CameraGeometry
    w0 : float
        Prime-meridian angle at epoch zero.

    Returns
    -------
    FilterEstimate, InnovationRecord
    """
    layout = est.layout
    n = layout.size
    z = []
    Rd = []
    for m in rf:
        z += [m.pseudorange, m.doppler]
        Rd += [config.range_sigma**2, config.rate_sigma**2]
    for obs in pixels:
        est.slot(obs.landmark_id)
        z += [obs.pixel[0], obs.pixel[1]]
        Rd += [config.pixel_sigma**2] * 2
    z = np.array(z)
    if len(z) == 0:
        rec = InnovationRecord(np.zeros(0), np.zeros((0, 0)), [], np.zeros(n), est.covariance.copy(), 0)
        return est, rec
    wm, wc, gamma = sigma_weights(n, config)
    S, _ = lower_cholesky(est.covariance)
    X = sigma_points(est.mean, S, gamma)
    Z, kinds = predict_measurements(X, est, rf, pixels, cameras, w0)
    z_hat, P_hh = unscented_moments(Z, wm, wc)
    Dx = X - est.mean
    Dz = Z - z_hat
    P_xz = (Dx.T * wc) @ Dz
    P_zz = config.underweight * P_hh + np.diag(Rd)
    nu = z - z_hat
    keep = np.ones(len(z), dtype=bool)
    dropped = []
    if config.gate_sigma is not None:
        score = np.abs(nu) / np.sqrt(np.diag(P_zz))
        # gate measurement pairs together
        pair_bad = (score[0::2] > config.gate_sigma) | (score[1::2] > config.gate_sigma)
        keep = np.repeat(~pair_bad, 2)
        dropped = list(np.nonzero(pair_bad)[0])
        if dropped:
            log.info("innovation gate dropped %d measurement pairs", len(dropped))
    nu_k = nu[keep]
    Pzz_k = P_zz[np.ix_(keep, keep)]
    Pxz_k = P_xz[:, keep]
    if len(nu_k) == 0:
        rec = InnovationRecord(nu, P_zz, kinds, np.zeros(n), est.covariance.copy(), 0, dropped)
        return est, rec
    cf = np.linalg.cholesky(Pzz_k)
    Kt = np.linalg.solve(cf.T, np.linalg.solve(cf, Pxz_k.T))
    dx = Kt.T @ nu_k
    P = est.covariance - Kt.T @ Pzz_k @ Kt
    P = 0.5 * (P + P.T)
    out = replace(est, mean=est.mean + dx, covariance=P, landmark_ids=list(est.landmark_ids))
    n_pix = int(sum(1 for k, kp in zip(kinds, keep) if kp and k == "u"))
    excess = (config.underweight - 1.0) * (Kt.T @ P_hh[np.ix_(keep, keep)] @ Kt)
    return out, InnovationRecord(nu, P_zz, kinds, dx, P, n_pix, dropped, excess)


# -- adaptive process noise ------------------------------------------------------------------


def qtilde_upper_bound(mu, J2, ref_radius, r, dt):
    """Spectral density bound from the peak oblateness acceleration at radius ``r``."""
    a_max = 3.0 * mu * abs(J2) * ref_radius**2 / (2.0 * r**4)
    return a_max**2 * dt


def qtilde_lower_bound(mu, ref_radius, r, dt, filter_degree, deg2_rms, alpha, max_degree=60):
    """Per-axis spectral density of the acceleration from gravity degrees the filter omits.

    Each omitted degree ``n`` is assumed to have per-coefficient RMS
    ``deg2_rms * (n / 2)^-alpha``. The squared acceleration is averaged over a
    sphere of radius ``r`` and split evenly over three axes.
    """
    n = np.arange(filter_degree + 1, max_degree + 1, dtype=float)
    if n.size == 0 or deg2_rms <= 0:
        return 0.0
    sigma2 = (deg2_rms * (n / 2.0) ** -alpha) ** 2
    # radial (n+1)^2 plus horizontal n(n+1) per unit coefficient power, 2n+1 coefficients
    ms = (mu / r**2) ** 2 * np.sum((ref_radius / r) ** (2 * n) * sigma2 * (2 * n + 1) ** 2 * (n + 1))
    return float(ms / 3.0 * dt)


@dataclass
class AsncState:
    """Sliding-window covariance-matching estimate of the unmodeled-acceleration density.

    ``floor_spectrum`` is ``(filter_degree, deg2_rms, alpha)`` for a lower bound
    from omitted gravity degrees, or None for a zero lower bound.
    """

    qtilde: list
    window: deque = field(default_factory=lambda: deque(maxlen=50))
    window_size: int = 50
    min_samples: int = 5
    floor_spectrum: tuple = None

    def __post_init__(self):
        self.qtilde = [np.asarray(q, dtype=float).copy() for q in self.qtilde]
        if self.window.maxlen != self.window_size:
            self.window = deque(self.window, maxlen=self.window_size)

    @classmethod
    def from_bound(cls, est, dt, ref_radius, window_size=50, floor_spectrum=None):
        bounds = asnc_bounds(est, dt, ref_radius)
        return cls([np.full(3, b) for b in bounds], window_size=window_size, floor_spectrum=floor_spectrum)


def asnc_bounds(est, dt, ref_radius):
    layout = est.layout
    mu = est.mean[layout.mu]
    J2 = -np.sqrt(5.0) * est.mean[layout.gravity[0]] if layout.n_gravity else 0.0
    return [qtilde_upper_bound(mu, J2, ref_radius, np.linalg.norm(est.position(i)), dt) for i in range(layout.n_spacecraft)]


def asnc_lower_bounds(asnc, est, dt, ref_radius):
    if asnc.floor_spectrum is None:
        return [0.0] * est.layout.n_spacecraft
    mu = est.mean[est.layout.mu]
    return [qtilde_lower_bound(mu, ref_radius, np.linalg.norm(est.position(i)), dt, *asnc.floor_spectrum) for i in range(est.layout.n_spacecraft)]


def _clamp(qs, lower, upper):
    return [np.clip(q, min(lo, hi), hi) for q, lo, hi in zip(qs, lower, upper)]


def asnc_update(asnc, tu, innovation, est, ref_radius):
    """Re-estimate the per-spacecraft diagonal spectral density.

    The sample for one epoch is ``dx dx^T + P_post - P_prop`` restricted to
    each spacecraft's position/velocity block, where ``P_prop`` excludes
    process noise: the state correction spread beyond
    what the propagated covariance explains. The covariance withheld by
    measurement underweighting is added back so that a consistent filter
    yields an unbiased sample. The window is projected per axis onto the
    kinematic noise pattern by least squares, uniform across epochs, with
    each matrix element weighted by the inverse product of the propagated
    variances so that position and velocity terms count comparably. The
    result is clamped to ``[lower, bound]``, where the lower bound is zero
    or the omitted-gravity density. Epochs without pixel measurements are
    left out of the window.
    """
    layout = est.layout
    dt = tu.dt
    bounds = asnc_bounds(est, dt, ref_radius)
    lower = asnc_lower_bounds(asnc, est, dt, ref_radius)
    if innovation is None or innovation.n_pixels == 0:
        return replace(asnc, qtilde=_clamp(asnc.qtilde, lower, bounds), window=deque(asnc.window, maxlen=asnc.window_size))
    head = tu.propagated_covariance.shape[0]
    dx = innovation.correction[:head]
    sample = []
    for i in range(layout.n_spacecraft):
        pv = layout.spacecraft(i)[:6]
        blk = np.ix_(pv, pv)
        D = np.outer(dx[pv], dx[pv]) + innovation.posterior_covariance[blk] - tu.propagated_covariance[blk]
        if innovation.underweight_excess is not None:
            D = D + innovation.underweight_excess[blk]
        var = np.diag(tu.propagated_covariance)[pv]
        sample.append((D, var))
    window = deque(asnc.window, maxlen=asnc.window_size)
    window.append((dt, sample))
    if len(window) < asnc.min_samples:
        return replace(asnc, qtilde=_clamp(asnc.qtilde, lower, bounds), window=window)
    new_q = []
    for i in range(layout.n_spacecraft):
        num = np.zeros(3)
        den = np.zeros(3)
        for dt_k, samp in window:
            T = np.array([[dt_k**3 / 3.0, dt_k**2 / 2.0], [dt_k**2 / 2.0, dt_k]])
            D, var = samp[i]
            for a in range(3):
                ax = [a, a + 3]
                W = 1.0 / np.outer(var[ax], var[ax])
                num[a] += np.sum(W * T * D[np.ix_(ax, ax)])
                den[a] += np.sum(W * T * T)
        new_q.append(num / den)
    return replace(asnc, qtilde=_clamp(new_q, lower, bounds), window=window)


# -- retirement ---------------------------------------------------------------------------


def retire_from_state(est, ids, database=None):
    """Remove landmarks from the state, writing their final belief back to ``database``.

    Raises
    ------
    UnknownId
        If an id is not in the state.
    """
    ids = list(ids)
    if not ids:
        return est
    layout = est.layout
    slots = [est.slot(i) for i in ids]
    drop = np.concatenate([layout.landmark(s) for s in slots])
    keep = np.setdiff1d(np.arange(est.size), drop)
    if database is not None:
        for lid in ids:
            if lid in database:
                m, P = est.landmark(lid)
                rec = database[lid]
                rec.position = m.copy()
                rec.covariance = P.copy()
    remaining = [lid for lid in est.landmark_ids if lid not in set(ids)]
    return replace(est, mean=est.mean[keep], covariance=est.covariance[np.ix_(keep, keep)], landmark_ids=remaining)


# -- diagnostics ----------------------------------------------------------------------------


def nees(error, covariance):
    """Normalized estimation error squared."""
    cf = np.linalg.cholesky(covariance)
    y = np.linalg.solve(cf, error)
    return float(y @ y)


class FilterHistory:
    """Per-epoch filter log written as CSV."""

    def __init__(self, head_names):
        self.head_names = list(head_names)
        self.rows = []

    def append(self, est, nees_value, innovation, qtilde):
        head = len(self.head_names)
        nrm = innovation.normalized() if innovation is not None else np.zeros(0)
        row = [repr(float(est.epoch))]
        row += [repr(float(x)) for x in est.mean[:head]]
        row += [repr(float(x)) for x in np.diag(est.covariance)[:head]]
        row += [repr(float(nees_value)), len(est.landmark_ids), len(nrm)]
        row += [repr(float(np.sqrt(np.mean(nrm**2)))) if len(nrm) else "nan"]
        row += [repr(float(x)) for q in qtilde for x in q]
        self.rows.append(row)

    def header(self, n_spacecraft):
        h = ["epoch"] + self.head_names + [f"var_{c}" for c in self.head_names]
        h += ["nees", "n_landmarks", "n_measurements", "innovation_rms"]
        h += [f"qtilde_sc{i}_{a}" for i in range(n_spacecraft) for a in "xyz"]
        return h

    def write_csv(self, path, n_spacecraft):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.header(n_spacecraft))
            w.writerows(self.rows)


def stack_estimate(n_spacecraft, gravity_degree, psi, mu, gravity, positions, velocities, srp, biases, bias_rates):
    """Assemble a head-only state vector in filter order."""
    parts = [np.asarray(psi, float), [mu], np.asarray(gravity, float)]
    for i in range(n_spacecraft):
        parts += [positions[i], velocities[i], [srp[i]]]
    for i in range(1, n_spacecraft):
        parts += [[biases[i], bias_rates[i]]]
    x = np.concatenate([np.asarray(p, float) for p in parts])
    if len(x) != StateLayout(n_spacecraft, gravity_degree).size:
        raise ValueError("component sizes do not match the layout")
    return x
