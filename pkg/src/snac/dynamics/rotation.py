"""Uniform-spin rotation model of the body."""
from dataclasses import dataclass

import numpy as np

from .. import frames


@dataclass(frozen=True)
class RotationState:
    """Spin-axis orientation and rate.

    Attributes
    ----------
    alpha, delta : float
        Right ascension and declination of the spin axis in ACI (rad).
    omega : float
        Spin rate (rad/s).
    w0 : float
        Prime-meridian angle at t = 0 (rad).
    """

    alpha: float
    delta: float
    omega: float
    w0: float = 0.0

    def __post_init__(self):
        if not self.omega > 0:
            raise ValueError("spin rate must be positive")

    @property
    def psi(self):
        return np.array([self.alpha, self.delta, self.omega])

    def with_psi(self, psi):
        return RotationState(float(psi[0]), float(psi[1]), float(psi[2]), self.w0)

    def aci_to_acaf(self, t):
        return frames.aci_to_acaf(self.alpha, self.delta, self.omega, self.w0, t)

    def aci_to_acic(self):
        return frames.aci_to_acic(self.alpha, self.delta)


def aci_to_acaf_batch(psi, w0, t):
    """ACI -> ACAF matrices for a batch of rotation parameters.

    Parameters
    ----------
    psi : ndarray, shape (K, 3)
        Columns alpha, delta, omega.
    w0 : float
    t : float

    Returns
    -------
    ndarray, shape (K, 3, 3)
    """
    psi = np.atleast_2d(psi)
    a = psi[:, 0] + np.pi / 2
    d = np.pi / 2 - psi[:, 1]
    w = w0 + psi[:, 2] * t
    ca, sa = np.cos(a), np.sin(a)
    cd, sd = np.cos(d), np.sin(d)
    cw, sw = np.cos(w), np.sin(w)
    # rot1(d) @ rot3(a)
    B = np.zeros((psi.shape[0], 3, 3))
    B[:, 0, 0] = ca
    B[:, 0, 1] = sa
    B[:, 1, 0] = -cd * sa
    B[:, 1, 1] = cd * ca
    B[:, 1, 2] = sd
    B[:, 2, 0] = sd * sa
    B[:, 2, 1] = -sd * ca
    B[:, 2, 2] = cd
    M = np.empty_like(B)
    M[:, 0] = cw[:, None] * B[:, 0] + sw[:, None] * B[:, 1]
    M[:, 1] = -sw[:, None] * B[:, 0] + cw[:, None] * B[:, 1]
    M[:, 2] = B[:, 2]
    return M


def apply_batch(M, v):
    """Row-wise ``M[k] @ v[k]`` written elementwise so results do not depend on batch size."""
    return np.stack(
        [M[:, i, 0] * v[:, 0] + M[:, i, 1] * v[:, 1] + M[:, i, 2] * v[:, 2] for i in range(3)], axis=1
    )


def apply_transpose_batch(M, v):
    """Row-wise ``M[k].T @ v[k]``."""
    return np.stack(
        [M[:, 0, i] * v[:, 0] + M[:, 1, i] * v[:, 1] + M[:, 2, i] * v[:, 2] for i in range(3)], axis=1
    )
