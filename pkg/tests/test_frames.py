"""Frames, camera projection and Gaussian gating."""
import math

import numpy as np
import pytest

from snac import frames
from snac.errors import BehindCamera, InvalidProbability, SingularCovariance


def _normal_quantile_bisect(p):
    """Independent oracle: solve erfc(x / sqrt 2) = p by bisection."""
    lo, hi = 0.0, 10.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if math.erfc(mid / math.sqrt(2.0)) > p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def test_elementary_rotations_are_passive():
    # a frame rotated by +90 deg about z sees the old x axis along -y
    assert np.allclose(frames.rot3(np.pi / 2) @ [1.0, 0.0, 0.0], [0.0, -1.0, 0.0])
    assert np.allclose(frames.rot1(np.pi / 2) @ [0.0, 1.0, 0.0], [0.0, 0.0, -1.0])
    assert np.allclose(frames.rot2(np.pi / 2) @ [0.0, 0.0, 1.0], [-1.0, 0.0, 0.0])


@pytest.mark.parametrize("fn,dfn", [(frames.rot1, frames.drot1), (frames.rot3, frames.drot3)])
def test_rotation_derivatives_match_central_differences(fn, dfn):
    th, h = 0.37, 1e-6
    fd = (fn(th + h) - fn(th - h)) / (2 * h)
    assert np.allclose(dfn(th), fd, atol=1e-9)


def test_skew_is_cross_product():
    a, b = np.array([1.0, -2.0, 0.5]), np.array([0.3, 0.1, -4.0])
    assert np.allclose(frames.skew(a) @ b, np.cross(a, b))


def test_frame_rotation_composition_checks_frames():
    a = frames.FrameRotation(frames.rot3(0.2), "ACI", "ACIC")
    b = frames.FrameRotation(frames.rot1(0.4), "ACIC", "ACAF")
    c = b @ a
    assert (c.from_frame, c.to_frame) == ("ACI", "ACAF")
    assert np.allclose(c.inverse().apply(c.apply([1.0, 2.0, 3.0])), [1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        a @ b
    with pytest.raises(ValueError):
        frames.FrameRotation(np.diag([1.0, 1.0, -1.0]), "A", "B")


def test_spin_axis_maps_to_body_z():
    alpha, delta = np.deg2rad(11.35), np.deg2rad(17.22)
    pole = np.array([np.cos(delta) * np.cos(alpha), np.cos(delta) * np.sin(alpha), np.sin(delta)])
    for t in (0.0, 1234.5, 86400.0):
        M = frames.aci_to_acaf(alpha, delta, 3.3e-4, 0.7, t)
        assert np.allclose(M @ pole, [0.0, 0.0, 1.0], atol=1e-14)


def test_body_frame_spins_at_rate():
    alpha, delta, omega = 0.3, -0.2, 2e-4
    M0 = frames.aci_to_acaf(alpha, delta, omega, 0.0, 0.0)
    M1 = frames.aci_to_acaf(alpha, delta, omega, 0.0, 1000.0)
    rel = M1 @ M0.T
    assert np.isclose(np.arctan2(rel[0, 1], rel[0, 0]), omega * 1000.0)


def test_orientation_partials_match_central_differences():
    args = np.array([0.3, -0.2, 3e-4])
    w0, t = 0.4, 5000.0
    dM = frames.aci_to_acaf_partials(*args, w0, t)
    steps = [1e-7, 1e-7, 1e-10]
    for k in range(3):
        e = np.zeros(3)
        e[k] = steps[k]
        fd = (frames.aci_to_acaf(*(args + e), w0, t) - frames.aci_to_acaf(*(args - e), w0, t)) / (2 * steps[k])
        assert np.allclose(dM[k], fd, atol=1e-7)


def test_nadir_attitude_axes():
    pos, vel = np.array([40000.0, 5000.0, -3000.0]), np.array([0.1, 2.0, 0.5])
    A = frames.nadir_camera_attitude(pos, vel)
    assert np.allclose(A @ A.T, np.eye(3))
    assert np.isclose(np.linalg.det(A), 1.0)
    assert np.allclose(A @ (-pos / np.linalg.norm(pos)), [0.0, 0.0, 1.0])
    h = np.cross(pos, vel)
    assert np.allclose(A @ (h / np.linalg.norm(h)), [0.0, 1.0, 0.0])


def test_projection_matches_hand_pinhole():
    K = frames.intrinsic_matrix(2500.0, 1024.0, 768.0)
    cam = frames.CameraModel(K, 2048, 1536, np.array([0.0, 0.0, -10000.0]), np.eye(3))
    px = frames.project(cam, np.array([100.0, -50.0, 0.0]))
    # CF point (100, -50, 10000): u = f x / z + cx
    assert np.isclose(px.u, 2500.0 * 100.0 / 10000.0 + 1024.0)
    assert np.isclose(px.v, 2500.0 * -50.0 / 10000.0 + 768.0)
    assert np.isclose(px.w, 10000.0)
    P = frames.projection_matrix(cam)
    assert np.allclose(P, K @ np.hstack([np.eye(3), [[0.0], [0.0], [10000.0]]]))


def test_projection_behind_camera_raises():
    cam = frames.CameraModel.default(np.zeros(3), np.eye(3))
    with pytest.raises(BehindCamera):
        frames.project(cam, np.array([0.0, 0.0, -5.0]))


def test_back_projection_inverts_projection():
    rng = np.random.default_rng(3)
    cam = frames.CameraModel.default(np.array([1.0, 2.0, 3.0]), frames.rot1(0.3) @ frames.rot3(-0.2))
    for _ in range(20):
        X = cam.position + cam.orientation.T @ np.array([*rng.uniform(-200, 200, 2), rng.uniform(500, 5000)])
        d = frames.back_project(cam, frames.project(cam, X).as_array())
        assert np.allclose(d, (X - cam.position) / np.linalg.norm(X - cam.position), atol=1e-12)


def test_pixel_jacobian_matches_central_differences():
    K = frames.intrinsic_matrix(2500.0, 1024.0, 768.0)
    p = np.array([120.0, -340.0, 37000.0])
    J = frames.pixel_jacobian_cf(K, p)
    for k in range(3):
        e = np.zeros(3)
        e[k] = 1e-3
        q1, q0 = K @ (p + e), K @ (p - e)
        fd = (q1[:2] / q1[2] - q0[:2] / q0[2]) / 2e-3
        assert np.allclose(J[:, k], fd, rtol=1e-6, atol=1e-12)


def test_mahalanobis_matches_explicit_inverse():
    rng = np.random.default_rng(1)
    A = rng.normal(size=(3, 3))
    S = A @ A.T + 0.5 * np.eye(3)
    mean, x = rng.normal(size=3), rng.normal(size=3)
    d = x - mean
    assert np.isclose(frames.mahalanobis(x, frames.GaussianBelief(mean, S)), np.sqrt(d @ np.linalg.inv(S) @ d))


def test_mahalanobis_rejects_singular():
    with pytest.raises(SingularCovariance):
        frames.mahalanobis([1.0, 1.0], frames.GaussianBelief([0.0, 0.0], np.diag([1.0, 0.0])))


def test_threshold_one_dim_matches_bisection_oracle():
    for p in (0.1, 0.01, 0.001, 1e-5):
        assert np.isclose(frames.mahalanobis_threshold(p, 1), _normal_quantile_bisect(p), rtol=1e-10)


def test_threshold_two_dim_has_tail_probability():
    # P(|z| > r) for a standard bivariate normal is exp(-r^2 / 2)
    for p in (0.1, 0.001):
        r = frames.mahalanobis_threshold(p, 2)
        assert np.isclose(math.exp(-r * r / 2.0), p)


@pytest.mark.parametrize("p", [0.0, -0.1, 1.5])
def test_threshold_rejects_bad_probability(p):
    with pytest.raises(InvalidProbability):
        frames.mahalanobis_threshold(p, 1)
