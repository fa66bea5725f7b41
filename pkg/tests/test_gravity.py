"""Spherical-harmonic gravity: potential, acceleration, kernels and I/O."""
import math

import numpy as np
import pytest
from scipy.special import lpmv

from snac import kernels
from snac.dynamics import gravity
from snac.errors import OriginSingularity
from snac.kernels import _gravity_py

MU, RREF = 4.4628e5, 16000.0


def random_field(degree, seed, scale=0.02):
    rng = np.random.default_rng(seed)
    C = np.zeros((degree + 1, degree + 1))
    S = np.zeros_like(C)
    for n in range(2, degree + 1):
        C[n, : n + 1] = rng.normal(0.0, scale / n, n + 1)
        S[n, 1 : n + 1] = rng.normal(0.0, scale / n, n)
    return gravity.GravityField(MU, RREF, C, S)


def exterior_points(n, seed, rmin=1.5 * RREF, rmax=4 * RREF):
    rng = np.random.default_rng(seed)
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1)[:, None]
    return d * rng.uniform(rmin, rmax, n)[:, None]


def potential_oracle(field, p):
    """Direct series with scipy associated Legendre functions (no recursion shared)."""
    x, y, z = p
    r = math.sqrt(x * x + y * y + z * z)
    lat, lon = math.asin(z / r), math.atan2(y, x)
    U = 1.0
    for n in range(2, field.degree + 1):
        for m in range(n + 1):
            norm = math.sqrt((2 - (m == 0)) * (2 * n + 1) * math.factorial(n - m) / math.factorial(n + m))
            # scipy includes the Condon-Shortley phase, geodesy does not
            P = (-1) ** m * lpmv(m, n, math.sin(lat)) * norm
            U += (RREF / r) ** n * P * (field.Cbar[n, m] * math.cos(m * lon) + field.Sbar[n, m] * math.sin(m * lon))
    return field.mu / r * U


def test_potential_matches_direct_series():
    f = random_field(8, 0)
    pts = exterior_points(20, 1)
    U = gravity.potential_body(f, pts)
    for p, u in zip(pts, U):
        assert np.isclose(u, potential_oracle(f, p), rtol=1e-12)


def test_point_mass_acceleration():
    f = gravity.GravityField.zeros(MU, RREF, 4)
    p = np.array([[30000.0, -20000.0, 10000.0]])
    a = gravity.gravity_accel_body(f, p)[0]
    r = np.linalg.norm(p)
    assert np.allclose(a, -MU * p[0] / r**3, rtol=1e-14)


def test_zonal_j2_matches_closed_form():
    f = gravity.GravityField.zeros(MU, RREF, 2)
    f.Cbar[2, 0] = -0.05 / math.sqrt(5.0)
    J2 = f.J2
    assert np.isclose(J2, 0.05)
    for p in exterior_points(10, 2):
        x, y, z = p
        r = np.linalg.norm(p)
        k = 1.5 * J2 * MU * RREF**2 / r**5
        a_j2 = k * np.array([x * (5 * z * z / r**2 - 1), y * (5 * z * z / r**2 - 1), z * (5 * z * z / r**2 - 3)])
        expect = -MU * p / r**3 + a_j2
        assert np.allclose(gravity.gravity_accel_body(f, p[None])[0], expect, rtol=1e-12)


def test_acceleration_is_potential_gradient():
    f = random_field(8, 3)
    pts = exterior_points(30, 4)
    a = gravity.gravity_accel_body(f, pts)
    h = 1e-2
    for p, ai in zip(pts, a):
        g = np.array([(gravity.potential_body(f, p + h * e)[0] - gravity.potential_body(f, p - h * e)[0]) / (2 * h) for e in np.eye(3)])
        assert np.linalg.norm(ai - g) / np.linalg.norm(g) < 1e-6


def test_kernels_agree():
    f = random_field(10, 5)
    pts = exterior_points(40, 6)
    K = len(pts)
    inv = gravity._inverse_kappa(f.degree)
    C = np.broadcast_to(f.Cbar * inv, (K,) + f.Cbar.shape).copy()
    S = np.broadcast_to(f.Sbar * inv, (K,) + f.Sbar.shape).copy()
    C[:, 0, 0] = 1.0
    a_py = _gravity_py.sh_accel_body(pts, np.full(K, MU), RREF, C, S)
    a_sel = kernels.sh_accel_body(pts, np.full(K, MU), RREF, C, S)
    assert np.allclose(a_py, a_sel, rtol=1e-13, atol=0.0)


def test_inertial_acceleration_rotates():
    from snac.dynamics.rotation import RotationState

    f = random_field(6, 7)
    rot = RotationState(0.2, 0.3, 3.3e-4, 0.1)
    p = np.array([40000.0, 10000.0, -5000.0])
    t = 1800.0
    M = rot.aci_to_acaf(t)
    a = gravity.gravity_accel(f, rot, p, t)
    assert np.allclose(M @ a, gravity.gravity_accel_body(f, (M @ p)[None])[0])


def test_origin_raises():
    with pytest.raises(OriginSingularity):
        gravity.gravity_accel_body(random_field(4, 0), np.zeros((1, 3)))


def test_vector_round_trip_and_write_read(tmp_path):
    f = random_field(6, 8)
    v = f.to_vector()
    assert len(v) == gravity.n_coefficients(6)
    g = gravity.GravityField.from_vector(MU, RREF, 6, v)
    assert np.array_equal(g.Cbar, f.Cbar) and np.array_equal(g.Sbar, f.Sbar)
    path = tmp_path / "field.txt"
    f.write(path)
    h = gravity.GravityField.read(path)
    assert np.array_equal(h.Cbar, f.Cbar) and h.mu == f.mu
    assert "np.float64" not in path.read_text()


def test_coefficient_order_excludes_degree_one_and_s_order_zero():
    c_idx, s_idx = gravity.coefficient_index(3)
    assert c_idx[0] == (2, 0) and all(n >= 2 for n, _ in c_idx)
    assert all(m >= 1 for _, m in s_idx)
    assert len(c_idx) == 3 + 4 and len(s_idx) == 2 + 3


def test_degree_rms():
    f = gravity.GravityField.zeros(MU, RREF, 3)
    f.Cbar[2, 0] = 0.3
    rms = f.degree_rms()
    assert np.isclose(rms[2], 0.3 / math.sqrt(5))
    assert rms[3] == 0.0
