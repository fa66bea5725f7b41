"""Synthetic world generation, detection model, sensor models and harmonic bases."""
import math

import numpy as np
import pytest
from scipy.special import lpmv

from snac import frames, harmonics, truth
from snac.dynamics.gravity import GravityField
from snac.dynamics.rotation import RotationState
from snac.shape import ShapeCoefficients


def sphere_body(radius=8000.0):
    return truth.BodyModel(
        ShapeCoefficients.sphere(radius, 2),
        GravityField.zeros(truth.EROS_MU, truth.EROS_GRAVITY_RADIUS, 4),
        RotationState(0.0, np.pi / 2, 1e-4, 0.0),
        radius,
    )


# -- harmonic bases --------------------------------------------------------------


def test_legendre_matches_scipy():
    t = np.linspace(-0.95, 0.95, 7)
    P = harmonics.legendre_normalized(10, t)
    for n in range(11):
        for m in range(n + 1):
            norm = math.sqrt((2 - (m == 0)) * (2 * n + 1) * math.factorial(n - m) / math.factorial(n + m))
            ref = (-1) ** m * lpmv(m, n, t) * norm
            assert np.allclose(P[:, n, m], ref, rtol=1e-11, atol=1e-12)


def test_basis_has_unit_mean_square():
    # Gauss-Legendre in sin(lat), uniform in longitude: exact for these products
    x, w = np.polynomial.legendre.leggauss(16)
    lon = 2 * np.pi * np.arange(32) / 32
    LON, T = np.meshgrid(lon, x)
    W = np.meshgrid(lon, w)[1] / 2.0 / 32
    B = harmonics.basis_matrix(LON.ravel(), np.arcsin(T.ravel()), 6)
    G = B.T @ (B * W.ravel()[:, None])
    assert np.allclose(G, np.eye(B.shape[1]), atol=1e-12)


def test_lon_lat_round_trip():
    lon, lat = harmonics.fibonacci_sphere(50)
    back_lon, back_lat, r = harmonics.to_lon_lat(3.0 * harmonics.unit_vectors(lon, lat))
    assert np.allclose(back_lon, lon) and np.allclose(back_lat, lat) and np.allclose(r, 3.0)


# -- body and features -------------------------------------------------------------


def test_generated_spectra_follow_power_law():
    alpha, ratio, R = 1.84, 0.06, 8400.0
    body = truth.generate_body(3, degree=10, avg_radius=R, alpha=alpha, shape_ratio=ratio, gravity_degree=8)
    K = ratio * R * 2.0**alpha
    rms = body.shape.degree_rms()
    for n in range(2, 11):
        assert np.isclose(rms[n], K / n**alpha, rtol=1e-12)
    assert body.shape.s[0] == R and rms[1] == 0.0
    G = body.gravity
    assert G.Cbar[2, 0] < 0
    for n in range(2, 9):
        vals = np.concatenate([G.Cbar[n, : n + 1], G.Sbar[n, 1 : n + 1]])
        assert np.isclose(np.sqrt(np.mean(vals**2)), 0.045 * (2.0 / n) ** alpha, rtol=1e-12)


def test_ray_trace_hits_sphere():
    body = sphere_body()
    origins = np.array([[0.0, 0.0, 40000.0], [30000.0, 100.0, 0.0], [0.0, 20000.0, 20000.0]])
    dirs = -origins
    hits = body.ray_trace(origins, dirs)
    assert np.allclose(np.linalg.norm(hits, axis=1), 8000.0, atol=1e-6)
    miss = body.ray_trace([[0.0, 0.0, 40000.0]], [[0.0, 1.0, 0.0]])
    assert np.all(np.isnan(miss))


def test_inside_and_normals_on_sphere():
    body = sphere_body()
    assert list(body.inside(np.array([[0.0, 0.0, 7999.0], [0.0, 0.0, 8001.0]]))) == [True, False]
    lon, lat = harmonics.fibonacci_sphere(30)
    assert np.allclose(body.surface_normals(lon, lat), harmonics.unit_vectors(lon, lat), atol=1e-8)


def test_features_uniform_by_area_on_sphere():
    feats = truth.seed_features(sphere_body(), 4000, seed=1)
    r = np.linalg.norm(feats.positions, axis=1)
    assert np.allclose(r, 8000.0)
    z = feats.positions[:, 2] / r
    # uniform on the sphere: z ~ U(-1, 1), mean 0 and variance 1/3
    assert abs(z.mean()) < 4 * math.sqrt(1 / 3 / 4000)
    assert abs(z.var() - 1 / 3) < 0.03
    assert feats.descriptors.shape == (4000, truth.DESCRIPTOR_DIM)
    with pytest.raises(ValueError):
        truth.seed_features(sphere_body(), 0, seed=1)


def test_detections_are_noisy_projections_of_lit_visible_features():
    body = sphere_body()
    feats = truth.seed_features(body, 3000, seed=2)
    pos = np.array([0.0, 0.0, 45000.0])
    cam = frames.CameraModel.default(pos, frames.nadir_camera_attitude(pos, np.array([1.0, 0.0, 0.0])))
    sun = np.array([0.0, 0.0, 1.0])
    cfg = truth.DetectionConfig(pixel_sigma=1.0)
    kp = truth.detect_keypoints(feats, cam, sun, body, np.random.default_rng(0), cfg)
    assert len(kp) > 50
    P = feats.positions[kp.feature_ids]
    assert np.all(P[:, 2] > 0)
    uv, _ = frames.project_points(cam, P)
    res = kp.pixels - uv
    assert abs(res.std() - 1.0) < 0.15
    d = kp.descriptors - feats.descriptors[kp.feature_ids]
    assert abs(d.std() - cfg.descriptor_sigma) < 0.1
    # Sun behind the body: nothing facing the camera is lit
    dark = truth.detect_keypoints(feats, cam, -sun, body, np.random.default_rng(0), cfg)
    assert len(dark) == 0


# -- sensors -----------------------------------------------------------------------


def test_rf_model_geometry():
    pi, vi = np.array([0.0, 0.0, 0.0]), np.array([1.0, 0.0, 0.0])
    pj, vj = np.array([3.0, 4.0, 0.0]), np.array([0.0, 2.0, 0.0])
    rho, rate = truth.rf_model(pi, vi, pj, vj, 0.5, 2.0, 0.01, 0.03)
    assert np.isclose(rho, 5.0 + 2.0 - 0.5)
    assert np.isclose(rate, (-1.0 * 3.0 + 2.0 * 4.0) / 5.0 + 0.02)


def test_rf_measurement_noise_and_pair_check():
    rng = np.random.default_rng(5)
    P = np.array([[0.0, 0.0, 0.0], [1000.0, 0.0, 0.0]])
    V = np.zeros((2, 3))
    z = np.array([truth.measure_rf(P, V, [0.0, 0.0], [0.0, 0.0], (0, 1), 0.0, rng).pseudorange for _ in range(4000)])
    assert abs(z.mean() - 1000.0) < 0.01 and abs(z.std() - 0.10) < 0.01
    with pytest.raises(ValueError):
        truth.measure_rf(P, V, [0.0, 0.0], [0.0, 0.0], (1, 1), 0.0, rng)


def test_euler_312_small_angle_and_attitude_noise():
    a, b, c = 1e-6, -2e-6, 3e-6
    R = truth.euler_312(a, b, c)
    # passive small rotation: I - skew(theta) with theta = (x, y, z) angles
    assert np.allclose(R, np.eye(3) - frames.skew([b, c, a]), atol=1e-11)
    rng = np.random.default_rng(2)
    errs = []
    for _ in range(2000):
        E = truth.measure_attitude(np.eye(3), rng)
        errs.append([E[1, 2], -E[0, 2], E[0, 1]])
    errs = np.array(errs)
    assert np.allclose(errs.std(axis=0) / truth.ARCSEC, [7, 7, 24], rtol=0.08)


def test_acquisition_time_reference_is_nominal():
    assert truth.acquisition_time(100.0, 1e-3, 4e-4, is_reference=True) == 100.0
    assert np.isclose(truth.acquisition_time(100.0, 1e-3, 4e-4), 100.0 - 6e-4)
