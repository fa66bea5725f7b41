"""Global shape reconstruction with spherical harmonics.

Landmark radii are fit by weighted least squares with a power-law Tikhonov
penalty; the regularization weight is chosen by generalized cross validation
(GCV) evaluated through one SVD of the standard-form design matrix.
"""
import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize

from .errors import NoMinimum, NumericalFailure, OriginPoint, RankDeficient
from .harmonics import basis_matrix, shape_degrees, shape_index, to_lon_lat

MAX_CONDITION = 1e12


@dataclass
class ShapeCoefficients:
    """Normalized shape coefficients ``s = [A00 A10 A11 A20 ... ANN B11 B21 B22 ... BNN]`` (m)."""

    max_degree: int
    s: np.ndarray

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=float)
        if self.s.size != (self.max_degree + 1) ** 2:
            raise ValueError("coefficient vector length must be (N+1)^2")

    @classmethod
    def sphere(cls, radius, max_degree=0):
        s = np.zeros((max_degree + 1) ** 2)
        s[0] = radius
        return cls(max_degree, s)

    def evaluate(self, lon, lat):
        return evaluate_shape(self.s, lon, lat, self.max_degree)

    def radius_at(self, directions):
        lon, lat, _ = to_lon_lat(directions)
        return self.evaluate(lon, lat)

    def degree_rms(self):
        """Per-degree RMS of the coefficients (rotation invariant)."""
        deg = shape_degrees(self.max_degree)
        return np.array([np.sqrt(np.sum(self.s[deg == n] ** 2) / (2 * n + 1)) for n in range(self.max_degree + 1)])

    def coefficient(self, n, m, kind="A"):
        a_idx, b_idx = shape_index(self.max_degree)
        if kind == "A":
            return self.s[a_idx.index((n, m))]
        return self.s[len(a_idx) + b_idx.index((n, m))]

    def truncated(self, degree):
        a_idx, b_idx = shape_index(self.max_degree)
        a_new, b_new = shape_index(degree)
        lookup = {("A",) + k: v for k, v in zip(a_idx, self.s[: len(a_idx)])}
        lookup.update({("B",) + k: v for k, v in zip(b_idx, self.s[len(a_idx) :])})
        s = [lookup.get(("A",) + k, 0.0) for k in a_new] + [lookup.get(("B",) + k, 0.0) for k in b_new]
        return ShapeCoefficients(degree, np.array(s))

    def write(self, path, alpha=float("nan"), nu=float("nan")):
        a_idx, b_idx = shape_index(self.max_degree)
        b_lookup = {k: v for k, v in zip(b_idx, self.s[len(a_idx) :])}
        with open(path, "w") as fh:
            fh.write(f"{self.max_degree} {float(alpha)!r} {float(nu)!r}\n")
            for (n, m), a in zip(a_idx, self.s[: len(a_idx)]):
                fh.write(f"{n} {m} {float(a)!r} {float(b_lookup.get((n, m), 0.0))!r}\n")

    @classmethod
    def read(cls, path):
        with open(path) as fh:
            head = fh.readline().split()
            N = int(head[0])
            a_idx, b_idx = shape_index(N)
            a_map, b_map = {}, {}
            for line in fh:
                parts = line.split()
                if parts:
                    key = (int(parts[0]), int(parts[1]))
                    a_map[key] = float(parts[2])
                    b_map[key] = float(parts[3])
        s = [a_map.get(k, 0.0) for k in a_idx] + [b_map.get(k, 0.0) for k in b_idx]
        return cls(N, np.array(s))


@dataclass
class ShapeFitProblem:
    """Inputs of a regularized shape fit.

    ``P`` may be a full covariance matrix or a vector of variances.
    """

    r: np.ndarray
    A: np.ndarray
    P: np.ndarray
    gamma_half: np.ndarray
    alpha: float
    eps: float
    max_degree: int
    lon: np.ndarray = field(default=None, repr=False)
    lat: np.ndarray = field(default=None, repr=False)

    @property
    def n_points(self):
        return self.A.shape[0]

    def whitener(self):
        """Apply ``P^{-1/2}`` to rows."""
        P = np.asarray(self.P, dtype=float)
        if P.ndim == 1:
            w = 1.0 / np.sqrt(P)
            return lambda X: X * (w[:, None] if np.ndim(X) == 2 else w)
        L = np.linalg.cholesky(P)
        return lambda X: linalg.solve_triangular(L, X, lower=True)


def design_matrix(points, max_degree):
    """Basis rows, radii and angular coordinates for landmark positions (ACAF).

    Raises
    ------
    OriginPoint
        If a point coincides with the origin.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if np.any(np.linalg.norm(points, axis=1) == 0):
        raise OriginPoint("landmark at the body origin")
    lon, lat, r = to_lon_lat(points)
    return basis_matrix(lon, lat, max_degree), r, lon, lat


def radius_covariance(points, covariances, full=False):
    """Radius variances from 3x3 landmark covariances via the unit-direction partial.

    Parameters
    ----------
    covariances : ndarray, shape (n, 3, 3)
    full : bool
        Return an n x n diagonal matrix instead of a vector.
    """
    points = np.atleast_2d(points)
    u = points / np.linalg.norm(points, axis=1)[:, None]
    var = np.einsum("ni,nij,nj->n", u, np.asarray(covariances), u)
    return np.diag(var) if full else var


def fit_unregularized(A, r, P=None):
    """Weighted least-squares fit without regularization.

    Raises
    ------
    RankDeficient
        If there are more coefficients than points or the (whitened) design
        matrix condition number exceeds 1e12.
    """
    A = np.asarray(A, dtype=float)
    r = np.asarray(r, dtype=float)
    if A.shape[1] > A.shape[0]:
        raise RankDeficient(f"{A.shape[1]} coefficients exceed {A.shape[0]} points")
    if P is not None:
        P = np.asarray(P, dtype=float)
        w = 1.0 / np.sqrt(P if P.ndim == 1 else np.diag(P))
        A = A * w[:, None]
        r = r * w
    Q, R = np.linalg.qr(A)
    sv = np.linalg.svd(R, compute_uv=False)
    if sv[-1] <= 0 or sv[0] / sv[-1] > MAX_CONDITION:
        raise RankDeficient(f"design matrix condition {sv[0] / max(sv[-1], 1e-300):.3g} exceeds {MAX_CONDITION:g}")
    return linalg.solve_triangular(R, Q.T @ r)


def tikhonov_matrix(max_degree, alpha, eps=None):
    """Diagonal of the power-law penalty root: ``deg^alpha`` with ``eps`` added at degree 0."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    deg = shape_degrees(max_degree).astype(float)
    diag = deg**alpha
    if eps is None:
        eps = 1e-8 * diag.max() if diag.max() > 0 else 1e-8
    if eps <= 0:
        raise ValueError("eps must be positive")
    diag[deg == 0] += eps
    return diag


def build_problem(points, max_degree, alpha=1.84, variances=None, gamma="power", eps=None):
    """Assemble a :class:`ShapeFitProblem`.

    Parameters
    ----------
    gamma : {"power", "identity"}
        Penalty shape.
    """
    A, r, lon, lat = design_matrix(points, max_degree)
    P = np.ones(len(r)) if variances is None else np.asarray(variances, dtype=float)
    if gamma == "power":
        g = tikhonov_matrix(max_degree, alpha, eps)
        eps_val = g[0]
    elif gamma == "identity":
        g = np.ones(A.shape[1])
        eps_val = 0.0
    else:
        raise ValueError(f"unknown penalty {gamma!r}")
    return ShapeFitProblem(r, A, P, g, alpha, eps_val, max_degree, lon, lat)


def fit_regularized(problem, nu):
    """Solve ``(A^T P^-1 A + nu Gamma) s = A^T P^-1 r`` through an augmented QR system.

    Raises
    ------
    NumericalFailure
        If the solution is not finite.
    """
    if nu < 0:
        raise ValueError("nu must be non-negative")
    white = problem.whitener()
    Aw = white(problem.A)
    rw = white(problem.r)
    p = Aw.shape[1]
    aug_A = np.vstack([Aw, np.sqrt(nu) * np.diag(problem.gamma_half)])
    aug_r = np.concatenate([rw, np.zeros(p)])
    s, *_ = linalg.lstsq(aug_A, aug_r, lapack_driver="gelsd")
    if not np.all(np.isfinite(s)):
        raise NumericalFailure("regularized solution is not finite")
    return s


# -- generalized cross validation ----------------------------------------------


class GcvObjective:
    """GCV function of the standard-form weight with analytic derivatives.

    The standard form uses ``Abar = P^{-1/2} A Gamma^{-1/2}`` and
    ``rbar = P^{-1/2} r``; with the thin SVD of ``Abar`` each evaluation is
    linear in the number of singular values.
    """

    def __init__(self, problem):
        white = problem.whitener()
        Abar = white(problem.A) / problem.gamma_half[None, :]
        rbar = white(problem.r)
        self.n = Abar.shape[0]
        U, sv, _ = np.linalg.svd(Abar, full_matrices=False)
        keep = sv > sv[0] * 1e-13
        self.sv = sv[keep]
        self.s2 = self.sv**2
        U = U[:, keep]
        self.beta = U.T @ rbar
        self.resid_perp = max(float(rbar @ rbar - self.beta @ self.beta), 0.0)
        self.rbar_norm2 = float(rbar @ rbar)
        self.rank = self.sv.size

    def bracket(self, extend=1e-8):
        """Search range for the standard-form weight from the squared singular values.

        The lower end is pushed ``extend`` below the smallest squared singular
        value because well-determined problems have their minimum there.
        """
        return self.s2[-1] * extend / self.n, self.s2[0] / self.n

    def _parts(self, nu_bar):
        n = self.n
        mu = n * nu_bar
        den = self.s2 + mu
        g = mu / den
        g1 = n * self.s2 / den**2
        g2 = -2.0 * n * n * self.s2 / den**3
        b2 = self.beta**2
        N0 = float(np.sum(g * g * b2) + self.resid_perp)
        N1 = float(np.sum(2 * g * g1 * b2))
        N2 = float(np.sum(2 * (g1 * g1 + g * g2) * b2))
        T0 = float(n - self.rank + np.sum(g))
        T1 = float(np.sum(g1))
        T2 = float(np.sum(g2))
        return N0, N1, N2, T0, T1, T2

    def value(self, nu_bar):
        N0, _, _, T0, _, _ = self._parts(nu_bar)
        return self.n * N0 / T0**2

    def derivatives(self, nu_bar):
        """Return (V, V', V'') with respect to the standard-form weight."""
        n = self.n
        N0, N1, N2, T0, T1, T2 = self._parts(nu_bar)
        V = n * N0 / T0**2
        V1 = n * (N1 / T0**2 - 2 * N0 * T1 / T0**3)
        V2 = n * (N2 / T0**2 - 4 * N1 * T1 / T0**3 - 2 * N0 * (T2 / T0**3 - 3 * T1**2 / T0**4))
        return V, V1, V2


@dataclass
class GcvResult:
    nu: float
    nu_bar: float
    V: float
    dV: float
    d2V: float
    iterations: int
    fallback: bool = False


def gcv_select(problem, n_grid=40, max_newton=20):
    """Choose the regularization weight by minimizing the GCV function.

    Bracket from the squared singular values, scan a log grid, then refine
    with damped Newton steps on the stationarity condition (in log weight).
    Falls back to the grid minimizer with a warning when no interior minimum
    with positive curvature is found.
    """
    obj = GcvObjective(problem)
    lo, hi = obj.bracket()
    grid = np.geomspace(lo, hi, n_grid)
    vals = np.array([obj.value(x) for x in grid])
    k = int(np.argmin(vals))
    x = np.log(grid[k])
    V, V1, V2 = obj.derivatives(np.exp(x))
    it = 0
    for it in range(1, max_newton + 1):
        nb = np.exp(x)
        g = nb * V1
        h = nb * V1 + nb * nb * V2
        if h <= 0:
            step = -np.sign(g) * 0.5
        else:
            step = -g / h
        step = float(np.clip(step, -2.0, 2.0))
        accepted = False
        for _ in range(30):
            x_new = x + step
            V_new, V1_new, V2_new = obj.derivatives(np.exp(x_new))
            if V_new <= V or abs(V1_new) < abs(V1):
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        x, V, V1, V2 = x_new, V_new, V1_new, V2_new
        if abs(V1) <= 1e-10 * abs(V) or abs(step) < 1e-15:
            break
    nu_bar = float(np.exp(x))
    if not (V2 > 0) or not (lo * 0.999 <= nu_bar <= hi * 1.001):
        warnings.warn("GCV has no interior minimum; using the grid minimizer", RuntimeWarning)
        nb = float(grid[k])
        V, V1, V2 = obj.derivatives(nb)
        return GcvResult(obj.n * nb, nb, V, V1, V2, it, fallback=True)
    nu_bar = _polish_root(obj, nu_bar)
    V, V1, V2 = obj.derivatives(nu_bar)
    return GcvResult(obj.n * nu_bar, nu_bar, V, V1, V2, it)


def _polish_root(obj, nu_bar):
    """Refine a stationary point of V to machine precision with a bracketing solver."""
    d1 = lambda x: obj.derivatives(x)[1]
    f0 = d1(nu_bar)
    if f0 == 0.0:
        return nu_bar
    width = 1e-6 * nu_bar
    for _ in range(20):
        lo, hi = nu_bar - width, nu_bar + width
        if lo > 0 and d1(lo) < 0 < d1(hi):
            root = optimize.brentq(d1, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=200)
            # the last few ulps: keep the float with the smallest |V'|
            cands = [root]
            for direction in (0.0, np.inf):
                x = root
                for _ in range(8):
                    x = np.nextafter(x, direction)
                    cands.append(x)
            best = min(cands, key=lambda c: abs(d1(c)))
            return best if abs(d1(best)) <= abs(f0) else nu_bar
        width *= 4.0
    return nu_bar


def gcv_select_strict(problem, **kwargs):
    """Like :func:`gcv_select` but raise :class:`NoMinimum` instead of falling back."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = gcv_select(problem, **kwargs)
    if res.fallback:
        raise NoMinimum("GCV objective has no interior minimum")
    return res


# -- evaluation -----------------------------------------------------------------


def evaluate_shape(s, lon, lat, max_degree=None):
    """Radius of the truncated expansion at (lon, lat)."""
    s = np.asarray(s, dtype=float)
    if max_degree is None:
        max_degree = int(round(np.sqrt(s.size))) - 1
    return basis_matrix(lon, lat, max_degree) @ s


def shape_rmse(coeffs, ref_lon, ref_lat, ref_radius):
    """RMS difference between predicted and reference radii at reference directions."""
    pred = coeffs.evaluate(ref_lon, ref_lat)
    return float(np.sqrt(np.mean((pred - np.asarray(ref_radius)) ** 2)))


def undersmoothing_check(coeffs, fit_degrees=6, factor=10.0):
    """Flag degrees whose RMS exceeds ``factor`` times a power law fitted to low degrees.

    Returns the list of offending degrees; a warning is emitted when non-empty.
    """
    rms = coeffs.degree_rms()
    n = np.arange(len(rms))
    sel = (n >= 2) & (n <= min(fit_degrees, coeffs.max_degree)) & (rms > 0)
    if sel.sum() < 2:
        return []
    slope, intercept = np.polyfit(np.log(n[sel]), np.log(rms[sel]), 1)
    envelope = np.exp(intercept) * np.maximum(n, 1).astype(float) ** slope
    bad = [int(k) for k in n[2:] if rms[k] > factor * envelope[k]]
    if bad:
        warnings.warn(
            f"fitted spectrum exceeds the power-law envelope at degrees {bad}; lower the model degree",
            RuntimeWarning,
        )
    return bad


@dataclass
class ShapeFit:
    coeffs: ShapeCoefficients
    method: str
    nu: float
    gcv: GcvResult = None


def fit_shape(points, max_degree, alpha=1.84, variances=None, method="power"):
    """Fit shape coefficients to landmark positions.

    Parameters
    ----------
    method : {"power", "identity", "none"}
        Power-law penalty, identity penalty, or plain weighted least squares.
    """
    if method == "none":
        A, r, _, _ = design_matrix(points, max_degree)
        s = fit_unregularized(A, r, variances)
        return ShapeFit(ShapeCoefficients(max_degree, s), method, 0.0)
    problem = build_problem(points, max_degree, alpha, variances, gamma="power" if method == "power" else "identity")
    res = gcv_select(problem)
    s = fit_regularized(problem, res.nu)
    return ShapeFit(ShapeCoefficients(max_degree, s), method, res.nu, res)


def write_rmse_report(path, entries):
    with open(path, "w") as fh:
        json.dump(entries, fh, indent=2, sort_keys=True)
