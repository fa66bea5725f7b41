"""Spherical-harmonic gravity fields."""
from dataclasses import dataclass
from functools import lru_cache
from math import lgamma

import numpy as np

from .. import kernels
from ..errors import OriginSingularity


def sh_normalization(n, m):
    """Normalization factor kappa_nm with ``Cbar = kappa * C`` and ``Pbar = P / kappa``.

    Evaluated in log space so that high degrees do not overflow.
    """
    if not 0 <= m <= n:
        raise ValueError("require 0 <= m <= n")
    delta = 1.0 if m == 0 else 0.0
    log_k = 0.5 * (lgamma(n + m + 1) - np.log(2.0 - delta) - np.log(2 * n + 1) - lgamma(n - m + 1))
    return float(np.exp(log_k))


def normalization_table(n_max):
    """Array ``kappa[n, m]`` for 0 <= m <= n <= n_max (zero above the diagonal)."""
    return _kappa_table(int(n_max)).copy()


@lru_cache(maxsize=None)
def _kappa_table(n_max):
    out = np.zeros((n_max + 1, n_max + 1))
    for n in range(n_max + 1):
        for m in range(n + 1):
            out[n, m] = sh_normalization(n, m)
    return out


@lru_cache(maxsize=None)
def _inverse_kappa(n_max):
    kappa = _kappa_table(n_max)
    out = np.ones_like(kappa)
    mask = np.tril(np.ones_like(kappa)) > 0
    out[mask] = 1.0 / kappa[mask]
    return out


def coefficient_index(n_max):
    """(n, m) pairs in state order: Cbar for n=2..N, m=0..n, then Sbar for m=1..n."""
    c_idx = [(n, m) for n in range(2, n_max + 1) for m in range(0, n + 1)]
    s_idx = [(n, m) for n in range(2, n_max + 1) for m in range(1, n + 1)]
    return c_idx, s_idx


def n_coefficients(n_max):
    c_idx, s_idx = coefficient_index(n_max)
    return len(c_idx) + len(s_idx)


@dataclass
class GravityField:
    """Normalized gravity field.

    Attributes
    ----------
    mu : float
        Gravitational parameter (m^3/s^2).
    ref_radius : float
        Reference radius (m).
    Cbar, Sbar : ndarray, shape (N+1, N+1)
        Normalized coefficients indexed ``[n, m]``. Degree 0 and 1 entries are
        ignored, the central term is implied by ``mu``.
    """

    mu: float
    ref_radius: float
    Cbar: np.ndarray
    Sbar: np.ndarray

    def __post_init__(self):
        self.Cbar = np.array(self.Cbar, dtype=float)
        self.Sbar = np.array(self.Sbar, dtype=float)
        if self.Cbar.shape != self.Sbar.shape or self.Cbar.shape[0] != self.Cbar.shape[1]:
            raise ValueError("coefficient arrays must be square and equal shape")
        if self.degree < 2:
            raise ValueError("field degree must be at least 2")
        self.Cbar[:2] = 0.0
        self.Sbar[:2] = 0.0
        self.Sbar[:, 0] = 0.0
        if not (np.all(np.isfinite(self.Cbar)) and np.all(np.isfinite(self.Sbar))):
            raise ValueError("non-finite coefficient")

    @property
    def degree(self):
        return self.Cbar.shape[0] - 1

    @classmethod
    def zeros(cls, mu, ref_radius, degree):
        return cls(mu, ref_radius, np.zeros((degree + 1,) * 2), np.zeros((degree + 1,) * 2))

    @property
    def J2(self):
        return -np.sqrt(5.0) * self.Cbar[2, 0]

    def truncated(self, degree):
        return GravityField(self.mu, self.ref_radius, self.Cbar[: degree + 1, : degree + 1], self.Sbar[: degree + 1, : degree + 1])

    def to_vector(self, degree=None):
        """Coefficients packed in state order (see :func:`coefficient_index`)."""
        degree = self.degree if degree is None else degree
        c_idx, s_idx = coefficient_index(degree)
        return np.array([self.Cbar[n, m] for n, m in c_idx] + [self.Sbar[n, m] for n, m in s_idx])

    @classmethod
    def from_vector(cls, mu, ref_radius, degree, vec):
        C, S = unpack_coefficients(np.asarray(vec)[None, :], degree)
        return cls(mu, ref_radius, C[0], S[0])

    def degree_rms(self):
        """Per-degree RMS of the normalized coefficients for n = 2..N."""
        out = {}
        for n in range(2, self.degree + 1):
            vals = np.concatenate([self.Cbar[n, : n + 1], self.Sbar[n, 1 : n + 1]])
            out[n] = float(np.sqrt(np.mean(vals**2)))
        return out

    def write(self, path):
        with open(path, "w") as fh:
            fh.write(f"{float(self.mu)!r} {float(self.ref_radius)!r} {self.degree}\n")
            for n in range(2, self.degree + 1):
                for m in range(n + 1):
                    fh.write(f"{n} {m} {float(self.Cbar[n, m])!r} {float(self.Sbar[n, m])!r}\n")

    @classmethod
    def read(cls, path):
        with open(path) as fh:
            head = fh.readline().split()
            mu, ref_radius, degree = float(head[0]), float(head[1]), int(head[2])
            C = np.zeros((degree + 1, degree + 1))
            S = np.zeros_like(C)
            for line in fh:
                parts = line.split()
                if not parts:
                    continue
                n, m = int(parts[0]), int(parts[1])
                if n <= degree:
                    C[n, m] = float(parts[2])
                    S[n, m] = float(parts[3])
        return cls(mu, ref_radius, C, S)


def unpack_coefficients(vecs, degree):
    """Batch version of :meth:`GravityField.from_vector` returning dense (K, N+1, N+1) arrays."""
    vecs = np.atleast_2d(vecs)
    K = vecs.shape[0]
    c_idx, s_idx = coefficient_index(degree)
    C = np.zeros((K, degree + 1, degree + 1))
    S = np.zeros_like(C)
    nc = len(c_idx)
    for j, (n, m) in enumerate(c_idx):
        C[:, n, m] = vecs[:, j]
    for j, (n, m) in enumerate(s_idx):
        S[:, n, m] = vecs[:, nc + j]
    return C, S


def accel_body_batch(pos_body, mu, ref_radius, Cbar, Sbar):
    """Body-frame acceleration for batches of positions and normalized fields.

    Parameters
    ----------
    pos_body : ndarray, shape (K, 3)
    mu : ndarray, shape (K,)
    Cbar, Sbar : ndarray, shape (K, N+1, N+1)
    """
    pos_body = np.atleast_2d(pos_body)
    if np.any(np.einsum("ij,ij->i", pos_body, pos_body) == 0.0):
        raise OriginSingularity("gravity evaluated at the origin")
    degree = Cbar.shape[-1] - 1
    inv_kappa = _inverse_kappa(degree)
    C = Cbar * inv_kappa
    S = Sbar * inv_kappa
    C[:, 0, 0] = 1.0
    return kernels.sh_accel_body(pos_body, np.broadcast_to(mu, (pos_body.shape[0],)), float(ref_radius), C, S)


def gravity_accel_body(field, pos_body):
    """Acceleration (m/s^2) in the body-fixed frame for one field and many points."""
    pos_body = np.atleast_2d(pos_body)
    K = pos_body.shape[0]
    C = np.broadcast_to(field.Cbar, (K,) + field.Cbar.shape)
    S = np.broadcast_to(field.Sbar, (K,) + field.Sbar.shape)
    return accel_body_batch(pos_body, np.full(K, field.mu), field.ref_radius, C, S)


def gravity_accel(field, rotation, pos_aci, t):
    """Inertial acceleration: rotate into ACAF, evaluate, rotate back."""
    M = rotation.aci_to_acaf(t)
    pos_aci = np.asarray(pos_aci, dtype=float)
    a_body = gravity_accel_body(field, (M @ pos_aci)[None, :])[0]
    return M.T @ a_body


def potential_body(field, pos_body):
    """Gravitational potential (positive convention, U = mu/r + ...) in the body frame."""
    pos_body = np.atleast_2d(np.asarray(pos_body, dtype=float))
    N = field.degree
    R = field.ref_radius
    x, y, z = pos_body.T
    r2 = x * x + y * y + z * z
    rho = R * R / r2
    x0, y0, z0 = R * x / r2, R * y / r2, R * z / r2
    V = np.zeros((N + 1, N + 1, len(x)))
    W = np.zeros_like(V)
    V[0, 0] = R / np.sqrt(r2)
    for m in range(N + 1):
        if m > 0:
            V[m, m] = (2 * m - 1) * (x0 * V[m - 1, m - 1] - y0 * W[m - 1, m - 1])
            W[m, m] = (2 * m - 1) * (x0 * W[m - 1, m - 1] + y0 * V[m - 1, m - 1])
        if m + 1 <= N:
            V[m + 1, m] = (2 * m + 1) * z0 * V[m, m]
            W[m + 1, m] = (2 * m + 1) * z0 * W[m, m]
        for n in range(m + 2, N + 1):
            V[n, m] = ((2 * n - 1) * z0 * V[n - 1, m] - (n + m - 1) * rho * V[n - 2, m]) / (n - m)
            W[n, m] = ((2 * n - 1) * z0 * W[n - 1, m] - (n + m - 1) * rho * W[n - 2, m]) / (n - m)
    kappa = normalization_table(N)
    U = V[0, 0].copy()
    for n in range(2, N + 1):
        for m in range(n + 1):
            U += (field.Cbar[n, m] * V[n, m] + field.Sbar[n, m] * W[n, m]) / kappa[n, m]
    return field.mu / R * U


def brillouin_check(pos, radius):
    return np.linalg.norm(pos, axis=-1) > radius
