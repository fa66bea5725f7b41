"""Multi-view triangulation and new-landmark covariance.

A view observes a body-fixed landmark ``L`` through

    pixel = project(K, A (M(psi, t)^T L - r))

with ``A`` the measured inertial-to-camera attitude, ``M`` the inertial to
body-fixed rotation and ``r`` the spacecraft inertial position. The landmark
covariance propagates both pixel noise and the filter's uncertainty in ``r``
and ``psi``.
"""
from dataclasses import dataclass

import numpy as np

from . import frames
from .errors import DegenerateGeometry, NonConvergence


@dataclass
class StereoView:
    """One spacecraft's observation of a candidate landmark.

    Attributes
    ----------
    pixel : ndarray, shape (2,)
    calibration : ndarray, shape (3, 3)
    attitude : ndarray, shape (3, 3)
        Inertial -> CF rotation (star-tracker solution).
    position : ndarray, shape (3,)
        Estimated spacecraft position (ACI, m).
    psi : ndarray, shape (3,)
        Estimated pole right ascension, declination and spin rate.
    w0, t : float
        Prime-meridian angle at epoch zero and the observation epoch.
    pos_index, psi_index : ndarray of int, shape (3,)
        Locations of ``position`` and ``psi`` in the filter state.
    """

    spacecraft: int
    pixel: np.ndarray
    calibration: np.ndarray
    attitude: np.ndarray
    position: np.ndarray
    psi: np.ndarray
    w0: float
    t: float
    pos_index: np.ndarray = None
    psi_index: np.ndarray = None

    def body_rotation(self):
        return frames.aci_to_acaf(self.psi[0], self.psi[1], self.psi[2], self.w0, self.t)

    def camera(self, width=4096, height=4096):
        """Equivalent pinhole camera in the body-fixed frame."""
        M = self.body_rotation()
        K = self.calibration
        w = max(width, 2 * K[0, 2])
        h = max(height, 2 * K[1, 2])
        return frames.CameraModel(K, w, h, M @ self.position, self.attitude @ M.T)


# -- triangulation --------------------------------------------------------------------


def _normalization(cameras):
    centers = np.array([c.position for c in cameras])
    c0 = centers.mean(axis=0)
    scale = np.sqrt(np.mean(np.sum((centers - c0) ** 2, axis=1)))
    return c0, scale, centers


def triangulate_linear(cameras, pixels):
    """Homogeneous linear (DLT) triangulation from two or more views.

    World coordinates are shifted to the mean camera center and scaled by the
    camera spread before the SVD so the solve is well conditioned.

    Raises
    ------
    DegenerateGeometry
        For fewer than two views, coincident camera centers, or when the two
        smallest singular values agree within 1e-9 relative.
    """
    if len(cameras) < 2:
        raise DegenerateGeometry("at least two views are required")
    c0, scale, centers = _normalization(cameras)
    ranges = [np.linalg.norm(c.position - c0) for c in cameras]
    if scale <= 1e-9 * max(1.0, max(ranges)):
        raise DegenerateGeometry("camera centers coincide")
    # world = c0 + scale * x  ->  homogeneous transform T
    T = np.eye(4)
    T[:3, :3] *= scale
    T[:3, 3] = c0
    rows = []
    for cam, px in zip(cameras, pixels):
        P = frames.projection_matrix(cam) @ T
        P = P / np.linalg.norm(P[2, :3])
        u, v = px
        rows.append(u * P[2] - P[0])
        rows.append(v * P[2] - P[1])
    A = np.array(rows)
    A /= np.linalg.norm(A, axis=1)[:, None]
    _, sv, Vt = np.linalg.svd(A)
    if sv[-2] - sv[-1] <= 1e-9 * sv[-2]:
        raise DegenerateGeometry("rays are parallel or the solution is not unique")
    X = Vt[-1]
    if abs(X[3]) < 1e-12 * np.linalg.norm(X[:3]):
        raise DegenerateGeometry("triangulated point at infinity")
    return c0 + scale * X[:3] / X[3]


def reprojection_residuals(point, cameras, pixels):
    """Stacked (predicted - observed) pixels, shape (2V,)."""
    out = []
    for cam, px in zip(cameras, pixels):
        uv, w = frames.project_points(cam, point[None, :])
        if not w[0] > 0:
            return None
        out.append(uv[0] - px)
    return np.concatenate(out)


def _residual_jacobian(point, cameras):
    blocks = []
    for cam in cameras:
        p_cf = cam.orientation @ (point - cam.position)
        blocks.append(frames.pixel_jacobian_cf(cam.calibration, p_cf) @ cam.orientation)
    return np.vstack(blocks)


@dataclass
class RefineResult:
    point: np.ndarray
    rms: float
    initial_rms: float
    iterations: int


def triangulate_refine(initial, cameras, pixels, max_iter=25, tol=1e-8):
    """Gauss-Newton minimization of the summed squared reprojection error.

    Steps are halved when they would increase the cost, so the result is
    never worse than the initializer.

    Raises
    ------
    NonConvergence
        If the step has not dropped below ``tol`` (m) after ``max_iter`` iterations.
    DegenerateGeometry
        If the initial point is behind a camera.
    """
    x = np.asarray(initial, dtype=float).copy()
    res = reprojection_residuals(x, cameras, pixels)
    if res is None:
        raise DegenerateGeometry("initial point behind a camera")
    cost = float(res @ res)
    rms0 = np.sqrt(cost / len(res))
    for it in range(1, max_iter + 1):
        J = _residual_jacobian(x, cameras)
        step, *_ = np.linalg.lstsq(J, -res, rcond=None)
        accepted = False
        for _ in range(30):
            cand = x + step
            r_new = reprojection_residuals(cand, cameras, pixels)
            if r_new is not None and float(r_new @ r_new) <= cost:
                accepted = True
                break
            step = 0.5 * step
        if not accepted:
            return RefineResult(x, np.sqrt(cost / len(res)), rms0, it)
        x, res, cost = cand, r_new, float(r_new @ r_new)
        if np.linalg.norm(step) < tol:
            return RefineResult(x, np.sqrt(cost / len(res)), rms0, it)
    raise NonConvergence(f"Gauss-Newton step still above {tol} m after {max_iter} iterations")


def triangulate(views, pixel_sigma=2.0, gate=4.0):
    """DLT then Gauss-Newton for a list of :class:`StereoView`; returns (point, RefineResult).

    Raises
    ------
    DegenerateGeometry
        Also raised when the refined RMS residual exceeds ``gate * pixel_sigma``.
    """
    cams = [v.camera() for v in views]
    pix = [np.asarray(v.pixel, dtype=float) for v in views]
    x0 = triangulate_linear(cams, pix)
    res = triangulate_refine(x0, cams, pix)
    if res.rms > gate * pixel_sigma:
        raise DegenerateGeometry(f"reprojection RMS {res.rms:.2f} px exceeds gate")
    return res.point, res


# -- covariance ---------------------------------------------------------------------------


def view_jacobians(L, view):
    """Pixel partials for one view.

    Returns
    -------
    A_L : (2, 3) with respect to the body-fixed landmark
    A_r : (2, 3) with respect to the inertial spacecraft position
    A_psi : (2, 3) with respect to (alpha, delta, omega)
    """
    M = view.body_rotation()
    dM = frames.aci_to_acaf_partials(view.psi[0], view.psi[1], view.psi[2], view.w0, view.t)
    p_aci = M.T @ L
    p_cf = view.attitude @ (p_aci - view.position)
    J = frames.pixel_jacobian_cf(view.calibration, p_cf)
    JA = J @ view.attitude
    A_L = JA @ M.T
    A_r = -JA
    A_psi = np.column_stack([JA @ (dM[k].T @ L) for k in range(3)])
    return A_L, A_r, A_psi


def view_pixel(L, view):
    M = view.body_rotation()
    p_cf = view.attitude @ (M.T @ L - view.position)
    q = view.calibration @ p_cf
    return q[:2] / q[2]


def stereo_covariance(L, views, P_prior, pixel_sigma=2.0, return_sensitivity=False):
    """Landmark covariance and landmark/state cross-covariance.

    With ``X = (A_L^T R^-1 A_L)^-1 A_L^T R^-1``::

        P_L    = X A_x P A_x^T X^T + (A_L^T R^-1 A_L)^-1
        P_Lx   = -X A_x P

    Parameters
    ----------
    P_prior : ndarray, shape (n, n)
        Filter covariance before the measurement update.

    return_sensitivity : bool
        Also return the dense ``(3, n)`` sensitivity ``X A_x``, needed for the
        cross-covariance between landmarks triangulated from one belief.

    Raises
    ------
    DegenerateGeometry
        If ``A_L^T R^-1 A_L`` is singular.
    """
    n = P_prior.shape[0]
    V = len(views)
    A_L = np.zeros((2 * V, 3))
    A_x = np.zeros((2 * V, n))
    for k, view in enumerate(views):
        aL, ar, apsi = view_jacobians(L, view)
        A_L[2 * k : 2 * k + 2] = aL
        if view.pos_index is not None:
            A_x[2 * k : 2 * k + 2, view.pos_index] += ar
        if view.psi_index is not None:
            A_x[2 * k : 2 * k + 2, view.psi_index] += apsi
    Rinv = 1.0 / pixel_sigma**2
    info = Rinv * A_L.T @ A_L
    try:
        C = np.linalg.inv(info)
    except np.linalg.LinAlgError as exc:
        raise DegenerateGeometry("landmark information matrix is singular") from exc
    if not np.all(np.isfinite(C)) or np.linalg.cond(info) > 1e14:
        raise DegenerateGeometry("landmark information matrix is singular")
    X = C @ A_L.T * Rinv
    cols = np.nonzero(np.any(A_x != 0.0, axis=0))[0]
    XA = X @ A_x[:, cols]
    cross = -XA @ P_prior[cols, :]
    P_L = XA @ P_prior[np.ix_(cols, cols)] @ XA.T + C
    P_L = 0.5 * (P_L + P_L.T)
    if return_sensitivity:
        G = np.zeros((3, n))
        G[:, cols] = XA
        return P_L, cross, G
    return P_L, cross


def wide_baseline_gain(views_a, views_b, L, P_prior, pixel_sigma=2.0):
    """Compare landmark covariances from two view sets of the same target.

    Returns a dict with traces, per-view-set depth variances along the first
    view's boresight, and the trace ratio ``b / a``.
    """
    Pa, _ = stereo_covariance(L, views_a, P_prior, pixel_sigma)
    Pb, _ = stereo_covariance(L, views_b, P_prior, pixel_sigma)
    M = views_a[0].body_rotation()
    boresight = M @ views_a[0].attitude[2]
    return {
        "trace_a": float(np.trace(Pa)),
        "trace_b": float(np.trace(Pb)),
        "depth_var_a": float(boresight @ Pa @ boresight),
        "depth_var_b": float(boresight @ Pb @ boresight),
        "ratio": float(np.trace(Pb) / np.trace(Pa)),
    }


def cf_covariance(P_L, view):
    """Express a body-fixed landmark covariance in the view's camera frame."""
    R = view.attitude @ view.body_rotation().T
    return R @ P_L @ R.T
