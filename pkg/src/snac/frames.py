"""Coordinate frames, pinhole projection and Mahalanobis utilities.

Frame tags used throughout the package:

``ACI``
    asteroid-centered inertial (equatorial axes)
``ACIC``
    inertial frame with z along the spin axis
``ACAF``
    asteroid-fixed, rotates with the body
``CF``
    camera frame, z along the boresight
``RTN``
    radial / transverse / normal orbit frame
"""
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from .errors import BehindCamera, InvalidProbability, SingularCovariance

FRAMES = ("ACAF", "ACI", "ACIC", "CF", "RTN")


def rot1(theta):
    """Frame rotation about the x axis (passive convention)."""
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, s], [0.0, -s, c]])


def rot2(theta):
    """Frame rotation about the y axis (passive convention)."""
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, 0.0, -s], [0.0, 1.0, 0.0], [s, 0.0, c]])


def rot3(theta):
    """Frame rotation about the z axis (passive convention)."""
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])


def drot1(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[0.0, 0.0, 0.0], [0.0, -s, c], [0.0, -c, -s]])


def drot3(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[-s, c, 0.0], [-c, -s, 0.0], [0.0, 0.0, 0.0]])


def skew(v):
    """Cross-product matrix ``[v]x``."""
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


@dataclass(frozen=True)
class FrameRotation:
    """Orthonormal rotation taking vectors expressed in ``from_frame`` to ``to_frame``."""

    matrix: np.ndarray
    from_frame: str
    to_frame: str

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.shape != (3, 3):
            raise ValueError("rotation matrix must be 3x3")
        if not np.allclose(m.T @ m, np.eye(3), atol=1e-10) or np.linalg.det(m) < 0:
            raise ValueError("matrix is not a proper rotation")
        object.__setattr__(self, "matrix", m)

    def inverse(self):
        return FrameRotation(self.matrix.T, self.to_frame, self.from_frame)

    def apply(self, vec):
        return np.asarray(vec, dtype=float) @ self.matrix.T

    def __matmul__(self, other):
        if not isinstance(other, FrameRotation):
            return NotImplemented
        if other.to_frame != self.from_frame:
            raise ValueError(f"cannot compose {other.to_frame} output with {self.from_frame} input")
        return FrameRotation(self.matrix @ other.matrix, other.from_frame, self.to_frame)


# -- asteroid orientation ------------------------------------------------------


def aci_to_acic(alpha, delta):
    """Rotation ACI -> ACIC for a spin axis at right ascension ``alpha``, declination ``delta``."""
    return rot1(np.pi / 2 - delta) @ rot3(alpha + np.pi / 2)


def aci_to_acaf(alpha, delta, omega, w0, t):
    """Rotation ACI -> ACAF at time ``t`` (s) for a uniform spin."""
    return rot3(w0 + omega * t) @ aci_to_acic(alpha, delta)


def aci_to_acaf_partials(alpha, delta, omega, w0, t):
    """Partials of the ACI -> ACAF matrix with respect to (alpha, delta, omega).

    Returns
    -------
    ndarray, shape (3, 3, 3)
        ``out[k]`` is the derivative with respect to the k-th parameter.
    """
    W = w0 + omega * t
    r3w, r1d, r3a = rot3(W), rot1(np.pi / 2 - delta), rot3(alpha + np.pi / 2)
    d_alpha = r3w @ r1d @ drot3(alpha + np.pi / 2)
    d_delta = -(r3w @ drot1(np.pi / 2 - delta) @ r3a)
    d_omega = t * (drot3(W) @ r1d @ r3a)
    return np.stack([d_alpha, d_delta, d_omega])


def rtn_basis(pos, vel):
    """Rows are the radial, transverse and normal unit vectors."""
    r_hat = pos / np.linalg.norm(pos)
    h = np.cross(pos, vel)
    n_hat = h / np.linalg.norm(h)
    t_hat = np.cross(n_hat, r_hat)
    return np.vstack([r_hat, t_hat, n_hat])


def nadir_camera_attitude(pos, vel):
    """World -> CF rotation with the boresight toward the body center.

    The CF z axis points along minus radial, y along the orbit angular
    momentum and x completes the right-handed triad.
    """
    z = -pos / np.linalg.norm(pos)
    h = np.cross(pos, vel)
    y = h / np.linalg.norm(h)
    x = np.cross(y, z)
    return np.vstack([x, y, z])


# -- camera --------------------------------------------------------------------


def intrinsic_matrix(focal_px, cx, cy, focal_y_px=None):
    fy = focal_px if focal_y_px is None else focal_y_px
    return np.array([[focal_px, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])


@dataclass
class CameraModel:
    """Calibrated pinhole camera.

    Attributes
    ----------
    calibration : ndarray, shape (3, 3)
        Upper-triangular intrinsic matrix with zero skew (px).
    width, height : int
        Resolution in px.
    position : ndarray, shape (3,)
        Camera center in the world frame (m).
    orientation : ndarray, shape (3, 3)
        World -> CF rotation.
    """

    calibration: np.ndarray
    width: int
    height: int
    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    orientation: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        K = np.asarray(self.calibration, dtype=float)
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= K[0, 2] <= self.width and 0 <= K[1, 2] <= self.height):
            raise ValueError("principal point outside the image")
        self.calibration = K
        self.position = np.asarray(self.position, dtype=float)
        self.orientation = np.asarray(self.orientation, dtype=float)

    @classmethod
    def default(cls, position=None, orientation=None, width=1024, height=1024, focal_px=2500.0):
        K = intrinsic_matrix(focal_px, width / 2.0, height / 2.0)
        return cls(
            K,
            width,
            height,
            np.zeros(3) if position is None else position,
            np.eye(3) if orientation is None else orientation,
        )

    def with_pose(self, position, orientation):
        return CameraModel(self.calibration, self.width, self.height, position, orientation)

    def in_image(self, uv):
        uv = np.atleast_2d(uv)
        return (uv[:, 0] >= 0) & (uv[:, 0] < self.width) & (uv[:, 1] >= 0) & (uv[:, 1] < self.height)


@dataclass(frozen=True)
class PixelPoint:
    u: float
    v: float
    w: float = 1.0

    def as_array(self):
        return np.array([self.u, self.v])


def projection_matrix(camera):
    """3x4 camera matrix ``K [R | -R r]``."""
    R = camera.orientation
    return camera.calibration @ np.hstack([R, (-R @ camera.position)[:, None]])


def project(camera, point):
    """Project one world point.

    Raises
    ------
    BehindCamera
        If the homogeneous factor is not positive.
    """
    lh = projection_matrix(camera) @ np.append(np.asarray(point, dtype=float), 1.0)
    w = lh[2]
    if not w > 0:
        raise BehindCamera(f"homogeneous factor {w:.3g} is not positive")
    return PixelPoint(lh[0] / w, lh[1] / w, w)


def project_points(camera, points):
    """Vectorized projection.

    Returns
    -------
    uv : ndarray, shape (n, 2)
    w : ndarray, shape (n,)
        Homogeneous factor; callers must discard rows with ``w <= 0``.
    """
    p_cf = (np.atleast_2d(points) - camera.position) @ camera.orientation.T
    q = p_cf @ camera.calibration.T
    w = q[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = q[:, :2] / w[:, None]
    return uv, w


def pixel_jacobian_cf(K, p_cf):
    """Jacobian of the pixel with respect to the CF point, shape (..., 2, 3)."""
    p_cf = np.asarray(p_cf, dtype=float)
    q = p_cf @ K.T
    u = q[..., 0] / q[..., 2]
    v = q[..., 1] / q[..., 2]
    J = np.empty(p_cf.shape[:-1] + (2, 3))
    J[..., 0, :] = (K[0] - u[..., None] * K[2]) / q[..., 2, None]
    J[..., 1, :] = (K[1] - v[..., None] * K[2]) / q[..., 2, None]
    return J


def back_project(camera, pixel):
    """Unit ray direction (world frame) through a pixel."""
    lh = np.array([pixel[0], pixel[1], 1.0])
    d_cf = np.linalg.solve(camera.calibration, lh)
    d = camera.orientation.T @ d_cf
    return d / np.linalg.norm(d)


# -- Gaussian utilities --------------------------------------------------------


@dataclass
class GaussianBelief:
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        self.covariance = np.atleast_2d(np.asarray(self.covariance, dtype=float))


def mahalanobis(sample, belief, max_condition=1e12):
    """Mahalanobis distance of ``sample`` from ``belief``.

    Raises
    ------
    SingularCovariance
        If the covariance condition number exceeds ``max_condition`` or it is
        not positive definite.
    """
    d = np.atleast_1d(np.asarray(sample, dtype=float)) - belief.mean
    S = belief.covariance
    if not np.all(np.isfinite(S)) or np.linalg.cond(S) > max_condition:
        raise SingularCovariance("covariance is ill conditioned")
    try:
        L = np.linalg.cholesky(S)
    except np.linalg.LinAlgError as exc:
        raise SingularCovariance(str(exc)) from exc
    y = np.linalg.solve(L, d)
    return float(np.sqrt(y @ y))


def mahalanobis_threshold(p_m, dims):
    """Gate threshold for a tail probability ``p_m``.

    For one dimension this is the two-sided standard-normal quantile, for two
    dimensions the radius ``sqrt(-2 ln p_m)`` of the bivariate normal.
    """
    if not (0.0 < p_m <= 1.0):
        raise InvalidProbability(f"p_m must lie in (0, 1], got {p_m}")
    if dims == 1:
        return float(ndtri(1.0 - p_m / 2.0))
    if dims == 2:
        return float(np.sqrt(-2.0 * np.log(p_m)))
    raise ValueError("dims must be 1 or 2")
