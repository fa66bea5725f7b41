"""Vectorized numpy implementation of the spherical-harmonic acceleration kernel.

Used when the compiled extension is unavailable, and as the reference the
compiled kernel is tested against.
"""
import numpy as np


def sh_accel_body(pos, mu, ref_radius, C, S):
    """Body-frame acceleration for a batch of positions.

    Uses the Cunningham V/W recursion on unnormalized coefficients.

    Parameters
    ----------
    pos : ndarray, shape (K, 3)
        Positions in the body-fixed frame (m).
    mu : ndarray, shape (K,)
        Gravitational parameter per row (m^3/s^2).
    ref_radius : float
        Reference radius of the coefficients (m).
    C, S : ndarray, shape (K, N+1, N+1)
        Unnormalized coefficients, ``C[:, 0, 0]`` holds the central term.

    Returns
    -------
    ndarray, shape (K, 3)
    """
    pos = np.asarray(pos, dtype=float)
    n_max = C.shape[1] - 1
    x, y, z = pos[:, 0], pos[:, 1], pos[:, 2]
    r2 = x * x + y * y + z * z
    R = ref_radius
    rho = R * R / r2
    x0 = R * x / r2
    y0 = R * y / r2
    z0 = R * z / r2

    size = n_max + 2
    K = pos.shape[0]
    V = np.zeros((size + 1, size + 1, K))
    W = np.zeros((size + 1, size + 1, K))
    V[0, 0] = R / np.sqrt(r2)
    for m in range(size):
        if m > 0:
            V[m, m] = (2 * m - 1) * (x0 * V[m - 1, m - 1] - y0 * W[m - 1, m - 1])
            W[m, m] = (2 * m - 1) * (x0 * W[m - 1, m - 1] + y0 * V[m - 1, m - 1])
        if m + 1 < size:
            V[m + 1, m] = (2 * m + 1) * z0 * V[m, m]
            W[m + 1, m] = (2 * m + 1) * z0 * W[m, m]
        for n in range(m + 2, size):
            V[n, m] = ((2 * n - 1) * z0 * V[n - 1, m] - (n + m - 1) * rho * V[n - 2, m]) / (n - m)
            W[n, m] = ((2 * n - 1) * z0 * W[n - 1, m] - (n + m - 1) * rho * W[n - 2, m]) / (n - m)

    ax = np.zeros(K)
    ay = np.zeros(K)
    az = np.zeros(K)
    for n in range(n_max + 1):
        c = C[:, n, 0]
        ax -= c * V[n + 1, 1]
        ay -= c * W[n + 1, 1]
        az += (n + 1) * (-c * V[n + 1, 0])
        for m in range(1, n + 1):
            c = C[:, n, m]
            s = S[:, n, m]
            fac = 0.5 * (n - m + 1) * (n - m + 2)
            ax += 0.5 * (-c * V[n + 1, m + 1] - s * W[n + 1, m + 1]) + fac * (
                c * V[n + 1, m - 1] + s * W[n + 1, m - 1]
            )
            ay += 0.5 * (-c * W[n + 1, m + 1] + s * V[n + 1, m + 1]) + fac * (
                -c * W[n + 1, m - 1] + s * V[n + 1, m - 1]
            )
            az += (n - m + 1) * (-c * V[n + 1, m] - s * W[n + 1, m])
    scale = mu / (R * R)
    return np.stack([ax * scale, ay * scale, az * scale], axis=1)
