"""Keplerian elements, relative orbital elements and the J2 mean/osculating map."""
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class OrbitalElements:
    """Classical elements (m, rad)."""

    a: float
    e: float
    i: float
    raan: float
    argp: float
    M: float

    def __post_init__(self):
        if not self.a > 0:
            raise ValueError("semi-major axis must be positive")
        if not 0 <= self.e < 1:
            raise ValueError("eccentricity must lie in [0, 1)")

    def as_array(self):
        return np.array([self.a, self.e, self.i, self.raan, self.argp, self.M])


@dataclass(frozen=True)
class RelativeOrbitalElements:
    """Quasi-nonsingular relative elements (dimensionless)."""

    da: float
    dlambda: float
    dex: float
    dey: float
    dix: float
    diy: float

    def as_array(self):
        return np.array([self.da, self.dlambda, self.dex, self.dey, self.dix, self.diy])


def wrap_pi(x):
    return (np.asarray(x) + np.pi) % TWO_PI - np.pi


def solve_kepler(M, e, tol=1e-15, max_iter=50):
    """Eccentric anomaly from mean anomaly (vectorized Newton iteration)."""
    M = np.asarray(M, dtype=float)
    E = M + e * np.sin(M)
    for _ in range(max_iter):
        dE = (E - e * np.sin(E) - M) / (1.0 - e * np.cos(E))
        E = E - dE
        if np.all(np.abs(dE) < tol):
            break
    return E


def elements_to_cartesian(oe, mu):
    """Position and velocity from classical elements."""
    a, e, i, raan, argp, M = (np.asarray(x, dtype=float) for x in oe)
    E = solve_kepler(M, e)
    cE, sE = np.cos(E), np.sin(E)
    eta = np.sqrt(1.0 - e * e)

    x_p = a * (cE - e)
    y_p = a * eta * sE
    n = np.sqrt(mu / a**3)
    vx_p = -a * n * sE / (1.0 - e * cE)
    vy_p = a * n * eta * cE / (1.0 - e * cE)
    cO, sO = np.cos(raan), np.sin(raan)
    cw, sw = np.cos(argp), np.sin(argp)
    ci, si = np.cos(i), np.sin(i)
    P = np.stack([cO * cw - sO * sw * ci, sO * cw + cO * sw * ci, sw * si], axis=-1)
    Q = np.stack([-cO * sw - sO * cw * ci, -sO * sw + cO * cw * ci, cw * si], axis=-1)
    pos = x_p[..., None] * P + y_p[..., None] * Q
    vel = vx_p[..., None] * P + vy_p[..., None] * Q
    return pos, vel


def cartesian_to_elements(pos, vel, mu):
    """Classical elements from Cartesian state (vectorized over leading axes).

    Returns
    -------
    ndarray, shape (..., 6)
        a, e, i, raan, argp, M
    """
    pos = np.asarray(pos, dtype=float)
    vel = np.asarray(vel, dtype=float)
    r = np.linalg.norm(pos, axis=-1)
    v2 = np.sum(vel * vel, axis=-1)
    h = np.cross(pos, vel)
    hn = np.linalg.norm(h, axis=-1)
    a = 1.0 / (2.0 / r - v2 / mu)
    e_vec = np.cross(vel, h) / mu - pos / r[..., None]
    e = np.linalg.norm(e_vec, axis=-1)
    i = np.arccos(np.clip(h[..., 2] / hn, -1.0, 1.0))
    node = np.stack([-h[..., 1], h[..., 0], np.zeros_like(hn)], axis=-1)
    raan = np.arctan2(h[..., 0], -h[..., 1])
    node_hat = node / np.linalg.norm(node, axis=-1)[..., None]
    w_hat = np.cross(h / hn[..., None], node_hat)
    # argument of latitude of the position and of the eccentricity vector
    theta = np.arctan2(np.sum(pos * w_hat, axis=-1), np.sum(pos * node_hat, axis=-1))
    argp = np.arctan2(np.sum(e_vec * w_hat, axis=-1), np.sum(e_vec * node_hat, axis=-1))
    f = theta - argp
    E = 2.0 * np.arctan2(np.sqrt(1.0 - e) * np.sin(f / 2), np.sqrt(1.0 + e) * np.cos(f / 2))
    M = E - e * np.sin(E)
    return np.stack([a, e, i, raan % TWO_PI, argp % TWO_PI, M % TWO_PI], axis=-1)


def oe_to_roe(chief, deputy):
    """Quasi-nonsingular relative elements of ``deputy`` with respect to ``chief``."""
    d_raan = wrap_pi(deputy.raan - chief.raan)
    u_c = chief.M + chief.argp
    u_d = deputy.M + deputy.argp
    return RelativeOrbitalElements(
        da=(deputy.a - chief.a) / chief.a,
        dlambda=float(wrap_pi(u_d - u_c + d_raan * np.cos(chief.i))),
        dex=deputy.e * np.cos(deputy.argp) - chief.e * np.cos(chief.argp),
        dey=deputy.e * np.sin(deputy.argp) - chief.e * np.sin(chief.argp),
        dix=deputy.i - chief.i,
        diy=float(d_raan * np.sin(chief.i)),
    )


def roe_to_oe(chief, roe):
    """Deputy elements reproducing ``roe`` about ``chief`` (inverse of :func:`oe_to_roe`)."""
    ex = chief.e * np.cos(chief.argp) + roe.dex
    ey = chief.e * np.sin(chief.argp) + roe.dey
    e = float(np.hypot(ex, ey))
    argp = float(np.arctan2(ey, ex)) if e > 0 else chief.argp
    d_raan = roe.diy / np.sin(chief.i)
    u = chief.M + chief.argp + roe.dlambda - d_raan * np.cos(chief.i)
    return OrbitalElements(
        a=chief.a * (1.0 + roe.da),
        e=e,
        i=chief.i + roe.dix,
        raan=float((chief.raan + d_raan) % TWO_PI),
        argp=float(argp % TWO_PI),
        M=float((u - argp) % TWO_PI),
    )


# -- J2 mean <-> osculating ----------------------------------------------------
#
# The short-period part of the first-order J2 theory is obtained by integrating
# the zero-mean part of the element rates along the mean Keplerian ellipse.  The
# rates come from the velocity partials of a nonsingular element set
# (a, u = argp + M, ex, ey, i, raan) times the J2 acceleration, and the
# integration over mean anomaly is done spectrally.  Nonsingular elements keep
# near-circular orbits well posed.


def _to_nonsingular(oe):
    a, e, i, raan, argp, M = np.moveaxis(np.asarray(oe, dtype=float), -1, 0)
    return np.stack([a, argp + M, e * np.cos(argp), e * np.sin(argp), i, raan], axis=-1)


def _from_nonsingular(ns):
    a, u, ex, ey, i, raan = np.moveaxis(np.asarray(ns, dtype=float), -1, 0)
    e = np.hypot(ex, ey)
    argp = np.arctan2(ey, ex)
    return np.stack([a, e, i, raan % TWO_PI, argp % TWO_PI, (u - argp) % TWO_PI], axis=-1)


def _nonsingular_from_cartesian(pos, vel, mu):
    oe = cartesian_to_elements(pos, vel, mu)
    return _to_nonsingular(oe)


def j2_accel(pos, mu, J2, ref_radius):
    """Zonal J2 acceleration about the frame z axis."""
    x, y, z = np.moveaxis(pos, -1, 0)
    r2 = x * x + y * y + z * z
    r = np.sqrt(r2)
    k = -1.5 * J2 * mu * ref_radius**2 / r**5
    zz = 5.0 * z * z / r2
    return np.stack([k * x * (1 - zz), k * y * (1 - zz), k * z * (3 - zz)], axis=-1)


def _short_period(ns_mean, J2, mu, ref_radius, n_grid=128):
    """Short-period offsets of the nonsingular elements at the mean state."""
    a, u, ex, ey, i, raan = ns_mean
    e = np.hypot(ex, ey)
    argp = np.arctan2(ey, ex)
    M0 = u - argp
    grid = M0 + TWO_PI * np.arange(n_grid) / n_grid
    oe = np.stack(
        [np.full(n_grid, a), np.full(n_grid, e), np.full(n_grid, i), np.full(n_grid, raan), np.full(n_grid, argp), grid],
        axis=-1,
    )
    pos, vel = elements_to_cartesian(oe.T, mu)
    acc = j2_accel(pos, mu, J2, ref_radius)
    # velocity partials of the element set by central differences
    h = 1e-5 * np.sqrt(mu / a)
    rates = np.zeros((n_grid, 6))
    for k in range(3):
        dv = np.zeros(3)
        dv[k] = h
        plus = _nonsingular_from_cartesian(pos, vel + dv, mu)
        minus = _nonsingular_from_cartesian(pos, vel - dv, mu)
        diff = plus - minus
        diff[:, 1] = wrap_pi(diff[:, 1])
        diff[:, 5] = wrap_pi(diff[:, 5])
        rates += diff / (2 * h) * acc[:, k : k + 1]
    n_mean = np.sqrt(mu / a**3)
    freq = np.fft.fftfreq(n_grid, d=1.0 / n_grid)

    def integrate(g):
        g_hat = np.fft.fft(g - g.mean())
        out = np.zeros_like(g_hat)
        nz = freq != 0
        out[nz] = g_hat[nz] / (1j * freq[nz])
        return np.real(np.fft.ifft(out)) / n_mean

    delta = np.zeros(6)
    da = integrate(rates[:, 0])
    delta[0] = da[0]
    for k in (2, 3, 4, 5):
        delta[k] = integrate(rates[:, k])[0]
    delta[1] = integrate(rates[:, 1] - 1.5 * n_mean / a * da)[0]
    return delta


def mean_to_osculating(mean, J2, mu, ref_radius):
    """First-order J2 map from mean to osculating elements."""
    if J2 == 0.0:
        return mean
    ns = _to_nonsingular(mean.as_array())
    osc = ns + _short_period(ns, J2, mu, ref_radius)
    return OrbitalElements(*(float(x) for x in _from_nonsingular(osc)))


def osculating_to_mean(osc, J2, mu, ref_radius, tol=1e-14, max_iter=60):
    """Inverse of :func:`mean_to_osculating` by fixed-point iteration."""
    if J2 == 0.0:
        return osc
    target = _to_nonsingular(osc.as_array())
    ns = target.copy()
    for _ in range(max_iter):
        new = target - _short_period(ns, J2, mu, ref_radius)
        step = new - ns
        step[1] = wrap_pi(step[1])
        step[5] = wrap_pi(step[5])
        ns = new
        scale = np.array([ns[0], 1.0, 1.0, 1.0, 1.0, 1.0])
        if np.all(np.abs(step) <= tol * scale):
            break
    return OrbitalElements(*(float(x) for x in _from_nonsingular(ns)))
