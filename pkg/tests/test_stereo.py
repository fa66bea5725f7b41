"""Triangulation and new-landmark covariance."""
import numpy as np
import pytest
from scipy.optimize import least_squares

from snac import frames, stereo
from snac.errors import DegenerateGeometry

K = frames.intrinsic_matrix(2500.0, 1024.0, 768.0)
PSI = np.array([0.2, 0.3, 3.3e-4])
W0, T = 0.5, 1200.0
L_TRUE = np.array([2000.0, -1500.0, 7600.0])


def pointing_at(pos_aci, target_aci):
    """Inertial -> camera rotation with the boresight on the target."""
    z = target_aci - pos_aci
    z /= np.linalg.norm(z)
    x = np.cross([0.0, 0.0, 1.0], z)
    x /= np.linalg.norm(x)
    return np.vstack([x, np.cross(z, x), z])


def make_views(offsets, L=L_TRUE, noise=None, rng=None):
    M = frames.aci_to_acaf(*PSI, W0, T)
    L_aci = M.T @ L
    views = []
    for k, off in enumerate(offsets):
        pos = 45000.0 * L_aci / np.linalg.norm(L_aci) + np.asarray(off, dtype=float)
        A = pointing_at(pos, L_aci)
        q = K @ (A @ (L_aci - pos))
        px = q[:2] / q[2]
        if noise is not None:
            px = px + rng.normal(0.0, noise, 2)
        views.append(stereo.StereoView(k, px, K, A, pos, PSI.copy(), W0, T, np.arange(3 * k, 3 * k + 3), np.array([9, 10, 11])))
    return views


OFFSETS = [(0.0, 0.0, 0.0), (8000.0, 2000.0, 0.0), (-3000.0, 6000.0, 1000.0)]


def test_exact_views_triangulate_to_truth():
    views = make_views(OFFSETS)
    cams = [v.camera() for v in views]
    X = stereo.triangulate_linear(cams, [v.pixel for v in views])
    assert np.linalg.norm(X - L_TRUE) < 1e-5
    point, res = stereo.triangulate(views)
    assert np.linalg.norm(point - L_TRUE) < 1e-6 and res.rms < 1e-6


def test_refinement_matches_least_squares_oracle():
    rng = np.random.default_rng(0)
    views = make_views(OFFSETS, noise=2.0, rng=rng)
    cams = [v.camera() for v in views]
    pix = [v.pixel for v in views]
    x0 = stereo.triangulate_linear(cams, pix)
    res = stereo.triangulate_refine(x0, cams, pix)
    assert res.rms <= res.initial_rms

    def resid(x):
        out = []
        for v in views:
            out.append(stereo.view_pixel(x, v) - v.pixel)
        return np.concatenate(out)

    ref = least_squares(resid, x0, xtol=1e-14, ftol=1e-14, gtol=1e-14)
    assert np.linalg.norm(res.point - ref.x) < 1e-4


def test_degenerate_geometries():
    views = make_views(OFFSETS[:1])
    with pytest.raises(DegenerateGeometry):
        stereo.triangulate_linear([views[0].camera()], [views[0].pixel])
    v = make_views([(0.0, 0.0, 0.0), (0.0, 0.0, 0.0)])
    with pytest.raises(DegenerateGeometry):
        stereo.triangulate_linear([x.camera() for x in v], [x.pixel for x in v])


def test_view_jacobians_match_central_differences():
    view = make_views(OFFSETS[1:2])[0]
    A_L, A_r, A_psi = stereo.view_jacobians(L_TRUE, view)

    def fd(setter, base, steps):
        cols = []
        for k in range(3):
            e = np.zeros(3)
            e[k] = steps[k]
            cols.append((stereo.view_pixel(*setter(base + e)) - stereo.view_pixel(*setter(base - e))) / (2 * steps[k]))
        return np.column_stack(cols)

    def with_pos(p):
        v = stereo.StereoView(0, view.pixel, K, view.attitude, p, view.psi, W0, T)
        return L_TRUE, v

    def with_psi(s):
        v = stereo.StereoView(0, view.pixel, K, view.attitude, view.position, s, W0, T)
        return L_TRUE, v

    assert np.allclose(A_L, fd(lambda L: (L, view), L_TRUE, [1e-2] * 3), rtol=1e-5, atol=1e-9)
    assert np.allclose(A_r, fd(with_pos, view.position, [1e-2] * 3), rtol=1e-5, atol=1e-9)
    assert np.allclose(A_psi, fd(with_psi, view.psi, [1e-7, 1e-7, 1e-11]), rtol=1e-4, atol=1e-3)


def test_covariance_matches_monte_carlo_triangulation():
    # sample pixel noise and state errors, triangulate, and compare the scatter
    rng = np.random.default_rng(7)
    sigma_px, sigma_pos = 2.0, 5.0
    base = make_views(OFFSETS)
    n = 12
    P = np.zeros((n, n))
    P[:9, :9] = sigma_pos**2 * np.eye(9)
    P[9:, 9:] = np.diag([1e-8, 1e-8, 1e-16])
    P_L, cross = stereo.stereo_covariance(L_TRUE, base, P, sigma_px)
    Lch = np.linalg.cholesky(P)
    est, errs = [], []
    for _ in range(3000):
        dx = Lch @ rng.standard_normal(n)
        views = []
        for v in base:
            # the filter believes the state is off by -dx from the truth used to render pixels
            views.append(
                stereo.StereoView(
                    v.spacecraft, v.pixel + rng.normal(0.0, sigma_px, 2), K, v.attitude,
                    v.position - dx[v.pos_index], v.psi - dx[9:], W0, T,
                )
            )
        est.append(stereo.triangulate(views)[0])
        errs.append(-dx)
    E = np.array(est) - L_TRUE
    emp = np.cov(E.T)
    assert np.allclose(np.sqrt(np.diag(emp)), np.sqrt(np.diag(P_L)), rtol=0.08)
    emp_cross = (E - E.mean(axis=0)).T @ np.array(errs) / (len(E) - 1)
    scale = np.sqrt(np.outer(np.diag(P_L), np.diag(P)))
    assert np.max(np.abs(emp_cross - cross) / np.where(scale > 0, scale, 1.0)) < 0.08


def test_sensitivity_output_reproduces_cross_covariance():
    base = make_views(OFFSETS)
    P = np.diag(np.r_[np.full(9, 25.0), 1e-8, 1e-8, 1e-16])
    P_L, cross, G = stereo.stereo_covariance(L_TRUE, base, P, 2.0, return_sensitivity=True)
    assert np.allclose(cross, -G @ P)
    assert np.all(np.linalg.eigvalsh(P_L) > 0)


def test_wider_baseline_shrinks_covariance():
    P = np.zeros((12, 12))
    narrow = make_views([(0.0, 0.0, 0.0), (500.0, 0.0, 0.0)])
    wide = make_views([(0.0, 0.0, 0.0), (10000.0, 0.0, 0.0)])
    gain = stereo.wide_baseline_gain(narrow, wide, L_TRUE, P)
    assert gain["ratio"] < 0.1 and gain["depth_var_b"] < gain["depth_var_a"]
