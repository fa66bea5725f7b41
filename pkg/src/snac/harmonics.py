"""Fully normalized associated Legendre functions and surface-harmonic bases.

Normalization matches the gravity coefficients: the mean square of
``Pbar_nm(sin lat) * cos(m lon)`` over the sphere is one, with no
Condon-Shortley phase.
"""
from functools import lru_cache

import numpy as np


def legendre_normalized(n_max, sinlat):
    """Normalized associated Legendre values.

    Parameters
    ----------
    n_max : int
    sinlat : array_like, shape (K,)

    Returns
    -------
    ndarray, shape (K, n_max+1, n_max+1)
        ``out[k, n, m]`` for m <= n, zero above the diagonal.
    """
    t = np.atleast_1d(np.asarray(sinlat, dtype=float))
    c = np.sqrt(np.clip(1.0 - t * t, 0.0, None))
    K = t.size
    P = np.zeros((K, n_max + 1, n_max + 1))
    P[:, 0, 0] = 1.0
    if n_max == 0:
        return P
    P[:, 1, 1] = np.sqrt(3.0) * c
    for m in range(2, n_max + 1):
        P[:, m, m] = np.sqrt((2 * m + 1) / (2.0 * m)) * c * P[:, m - 1, m - 1]
    for m in range(0, n_max):
        P[:, m + 1, m] = np.sqrt(2.0 * m + 3.0) * t * P[:, m, m]
        for n in range(m + 2, n_max + 1):
            a = np.sqrt((2.0 * n - 1) * (2.0 * n + 1) / ((n - m) * (n + m)))
            b = np.sqrt((2.0 * n + 1) * (n + m - 1) * (n - m - 1) / ((n - m) * (n + m) * (2.0 * n - 3)))
            P[:, n, m] = a * t * P[:, n - 1, m] - b * P[:, n - 2, m]
    return P


@lru_cache(maxsize=None)
def _index(n_max):
    a_idx = [(n, m) for n in range(n_max + 1) for m in range(n + 1)]
    b_idx = [(n, m) for n in range(1, n_max + 1) for m in range(1, n + 1)]
    return tuple(a_idx), tuple(b_idx)


def shape_index(n_max):
    """(n, m) for each entry of the shape vector: cosine terms then sine terms."""
    a_idx, b_idx = _index(int(n_max))
    return list(a_idx), list(b_idx)


def shape_degrees(n_max):
    a_idx, b_idx = _index(int(n_max))
    return np.array([n for n, _ in a_idx] + [n for n, _ in b_idx])


def n_shape_coefficients(n_max):
    return (n_max + 1) ** 2


def basis_matrix(lon, lat, n_max):
    """Rows of surface-harmonic basis values at (lon, lat), shape (K, (N+1)^2)."""
    lon = np.atleast_1d(np.asarray(lon, dtype=float))
    lat = np.atleast_1d(np.asarray(lat, dtype=float))
    P = legendre_normalized(n_max, np.sin(lat))
    a_idx, b_idx = _index(int(n_max))
    ms = np.arange(n_max + 1)
    cos_m = np.cos(np.outer(lon, ms))
    sin_m = np.sin(np.outer(lon, ms))
    cols = [P[:, n, m] * cos_m[:, m] for n, m in a_idx]
    cols += [P[:, n, m] * sin_m[:, m] for n, m in b_idx]
    return np.column_stack(cols)


def to_lon_lat(points):
    points = np.atleast_2d(points)
    r = np.linalg.norm(points, axis=1)
    lon = np.arctan2(points[:, 1], points[:, 0])
    lat = np.arcsin(np.clip(points[:, 2] / r, -1.0, 1.0))
    return lon, lat, r


def unit_vectors(lon, lat):
    cl = np.cos(lat)
    return np.column_stack([cl * np.cos(lon), cl * np.sin(lon), np.sin(lat)])


def fibonacci_sphere(n):
    """Near-uniform unit directions, returned as (lon, lat)."""
    k = np.arange(n) + 0.5
    lat = np.arcsin(1.0 - 2.0 * k / n)
    lon = (np.pi * (1.0 + np.sqrt(5.0)) * k) % (2 * np.pi) - np.pi
    return lon, lat
