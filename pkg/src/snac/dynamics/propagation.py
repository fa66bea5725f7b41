"""Orbital dynamics and numerical propagation.

Accelerations are gravity (harmonics in the body frame), solar radiation
pressure with a constant sun-facing cross-section and no eclipses, and the Sun
as a point-mass third body.
"""
from dataclasses import dataclass, replace

import numpy as np
from scipy.integrate import solve_ivp

from .. import frames
from ..errors import StepFailure
from .gravity import accel_body_batch
from .rotation import aci_to_acaf_batch, apply_batch, apply_transpose_batch

AU = 1.495978707e11
MU_SUN = 1.32712440018e20
C_LIGHT = 299792458.0
SOLAR_FLUX_1AU = 1361.0
OBLIQUITY = np.deg2rad(23.4392911)


@dataclass(frozen=True)
class SunEphemeris:
    """Sun position relative to the body for a circular heliocentric orbit.

    Attributes
    ----------
    distance_au : float
        Heliocentric radius of the body (AU).
    longitude0 : float
        Ecliptic longitude of the body at t = 0 (rad).
    """

    distance_au: float = 1.458
    longitude0: float = 0.0

    @property
    def distance(self):
        return self.distance_au * AU

    @property
    def mean_motion(self):
        return np.sqrt(MU_SUN / self.distance**3)

    def position(self, t):
        """Sun position relative to the body in ACI (m)."""
        lon = self.longitude0 + self.mean_motion * t
        body_ecl = self.distance * np.array([np.cos(lon), np.sin(lon), 0.0])
        return -(frames.rot1(-OBLIQUITY) @ body_ecl)

    def direction(self, t):
        s = self.position(t)
        return s / np.linalg.norm(s)

    def srp_pressure(self):
        """Radiation pressure at the body's heliocentric distance (N/m^2)."""
        return SOLAR_FLUX_1AU / C_LIGHT / self.distance_au**2


@dataclass(frozen=True)
class SpacecraftState:
    """Inertial state of one spacecraft in ACI."""

    position: np.ndarray
    velocity: np.ndarray
    srp_coeff: float = 1.2
    area_to_mass: float = 0.01

    def __post_init__(self):
        if not self.srp_coeff > 0:
            raise ValueError("srp_coeff must be positive")

    @property
    def vector(self):
        return np.concatenate([self.position, self.velocity])


@dataclass(frozen=True)
class ForceModel:
    """Settings shared by truth and filter propagation."""

    ref_radius: float
    w0: float
    sun: SunEphemeris = SunEphemeris()
    srp: bool = True
    third_body: bool = True


def accel_batch(model, t, pos, mu, Cbar, Sbar, psi, cr, area_to_mass):
    """Inertial acceleration for K states with per-row parameters.

    Every operation is row-wise, so a row's result does not depend on which
    other rows share the batch.
    """
    M = aci_to_acaf_batch(psi, model.w0, t)
    pos_b = apply_batch(M, pos)
    a = apply_transpose_batch(M, accel_body_batch(pos_b, mu, model.ref_radius, Cbar, Sbar))
    if model.srp or model.third_body:
        s = model.sun.position(t)
        if model.srp:
            s_hat = s / np.linalg.norm(s)
            a = a - (cr * area_to_mass * model.sun.srp_pressure())[:, None] * s_hat[None, :]
        if model.third_body:
            d = s[None, :] - pos
            dn = np.sqrt(d[:, 0] ** 2 + d[:, 1] ** 2 + d[:, 2] ** 2)
            a = a + MU_SUN * (d / dn[:, None] ** 3 - s[None, :] / np.linalg.norm(s) ** 3)
    return a


def rk4_batch(model, t0, dt, y, mu, Cbar, Sbar, psi, cr, area_to_mass, substeps=2):
    """Fixed-step RK4 for K stacked (position, velocity) rows.

    Parameters
    ----------
    y : ndarray, shape (K, 6)
    substeps : int
        Number of equal RK4 steps spanning ``dt``.
    """
    y = np.array(y, dtype=float)
    h = dt / substeps

    def f(t, yy):
        return np.hstack([yy[:, 3:], accel_batch(model, t, yy[:, :3], mu, Cbar, Sbar, psi, cr, area_to_mass)])

    t = t0
    for i in range(substeps):
        k1 = f(t, y)
        k2 = f(t + h / 2, y + (h / 2) * k1)
        k3 = f(t + h / 2, y + (h / 2) * k2)
        k4 = f(t + h, y + h * k3)
        y = y + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
        t = t0 + (i + 1) * h
    return y


def _field_batch(field, K):
    C = np.broadcast_to(field.Cbar, (K,) + field.Cbar.shape)
    S = np.broadcast_to(field.Sbar, (K,) + field.Sbar.shape)
    return np.full(K, field.mu), C, S


def propagate(state, field, rotation, sun, dt, substeps=2, t0=0.0, srp=True, third_body=True):
    """Propagate one spacecraft with fixed-step RK4 (the filter propagator)."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    model = ForceModel(field.ref_radius, rotation.w0, sun, srp, third_body)
    mu, C, S = _field_batch(field, 1)
    y = rk4_batch(
        model, t0, dt, state.vector[None, :], mu, C, S, rotation.psi[None, :],
        np.array([state.srp_coeff]), np.array([state.area_to_mass]), substeps,
    )[0]
    return replace(state, position=y[:3], velocity=y[3:])


def propagate_adaptive(states, field, rotation, sun, t0, dt, rtol=1e-12, atol=1e-9, srp=True, third_body=True):
    """Propagate several spacecraft together with an adaptive 8th-order Runge-Kutta scheme.

    Raises
    ------
    StepFailure
        If the integrator reports failure.
    """
    model = ForceModel(field.ref_radius, rotation.w0, sun, srp, third_body)
    K = len(states)
    mu, C, S = _field_batch(field, K)
    psi = np.tile(rotation.psi, (K, 1))
    cr = np.array([s.srp_coeff for s in states])
    am = np.array([s.area_to_mass for s in states])

    def rhs(t, flat):
        yy = flat.reshape(K, 6)
        acc = accel_batch(model, t, yy[:, :3], mu, C, S, psi, cr, am)
        return np.hstack([yy[:, 3:], acc]).ravel()

    y0 = np.concatenate([s.vector for s in states])
    sol = solve_ivp(rhs, (t0, t0 + dt), y0, method="DOP853", rtol=rtol, atol=atol)
    if not sol.success:
        raise StepFailure(sol.message)
    yf = sol.y[:, -1].reshape(K, 6)
    return [replace(s, position=yf[k, :3], velocity=yf[k, 3:]) for k, s in enumerate(states)]
