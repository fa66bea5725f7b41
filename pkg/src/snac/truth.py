"""Synthetic world: body, surface features, keypoint detections and sensor measurements.

Image rendering and feature extraction are replaced by a detection model that
emits (pixel, descriptor) pairs with the statistics downstream code expects:
pixels are true projections plus Gaussian noise, descriptors are a fixed
per-feature vector plus Gaussian noise.
"""
from dataclasses import dataclass, field

import numpy as np

from . import frames
from .dynamics.gravity import GravityField, coefficient_index
from .dynamics.rotation import RotationState
from .harmonics import fibonacci_sphere, shape_degrees, to_lon_lat, unit_vectors
from .shape import ShapeCoefficients

ARCSEC = np.pi / 180.0 / 3600.0
DESCRIPTOR_DIM = 128

# Eros-like defaults
EROS_MU = 4.4628e5
EROS_GRAVITY_RADIUS = 16000.0
EROS_MEAN_RADIUS = 8400.0
EROS_POLE_RA = np.deg2rad(11.35)
EROS_POLE_DEC = np.deg2rad(17.22)
EROS_SPIN_RATE = 2.0 * np.pi / (5.27025547 * 3600.0)


# -- body ----------------------------------------------------------------------


@dataclass
class BodyModel:
    """Truth body: harmonic shape, gravity field and spin state."""

    shape: ShapeCoefficients
    gravity: GravityField
    rotation: RotationState
    avg_radius: float
    _grid_radius: np.ndarray = field(default=None, repr=False)

    def radius(self, directions):
        """Surface radius along the given (not necessarily unit) ACAF directions."""
        lon, lat, _ = to_lon_lat(directions)
        return self.shape.evaluate(lon, lat)

    @property
    def max_radius(self):
        if self._grid_radius is None:
            lon, lat = fibonacci_sphere(4000)
            self._grid_radius = self.shape.evaluate(lon, lat)
        return float(self._grid_radius.max()) * 1.02

    @property
    def min_radius(self):
        self.max_radius
        return float(self._grid_radius.min())

    def surface_points(self, lon, lat):
        return unit_vectors(lon, lat) * self.shape.evaluate(lon, lat)[:, None]

    def inside(self, points):
        points = np.atleast_2d(points)
        r = np.linalg.norm(points, axis=1)
        out = np.zeros(len(points), dtype=bool)
        cand = r < self.max_radius
        if np.any(cand):
            out[cand] = r[cand] < self.radius(points[cand])
        return out

    def surface_normals(self, lon, lat, h=1e-5):
        """Outward unit normals of the radial surface by central differences."""
        def pt(lo, la):
            return self.surface_points(lo, la)

        d_lon = (pt(lon + h, lat) - pt(lon - h, lat)) / (2 * h)
        d_lat = (pt(lon, lat + h) - pt(lon, lat - h)) / (2 * h)
        n = np.cross(d_lon, d_lat)
        n /= np.linalg.norm(n, axis=1)[:, None]
        outward = np.sum(n * unit_vectors(lon, lat), axis=1) < 0
        n[outward] *= -1.0
        return n

    def ray_trace(self, origins, directions, n_steps=400, n_bisect=50):
        """First intersection of rays with the surface (NaN rows for misses).

        Marches from the circumscribing sphere inward and bisects the first
        sign change of ``|x| - r(x)``.
        """
        origins = np.atleast_2d(np.asarray(origins, dtype=float))
        d = np.atleast_2d(np.asarray(directions, dtype=float))
        d = d / np.linalg.norm(d, axis=1)[:, None]
        Rmax = self.max_radius
        b = np.sum(origins * d, axis=1)
        c = np.sum(origins * origins, axis=1) - Rmax**2
        disc = b * b - c
        hit = np.full(origins.shape, np.nan)
        ok = disc > 0
        if not np.any(ok):
            return hit
        idx = np.nonzero(ok)[0]
        t0 = np.maximum(-b[idx] - np.sqrt(disc[idx]), 0.0)
        t1 = -b[idx] + np.sqrt(disc[idx])
        ts = t0[:, None] + (t1 - t0)[:, None] * np.linspace(0.0, 1.0, n_steps)[None, :]
        pts = origins[idx, None, :] + ts[..., None] * d[idx, None, :]
        flat = pts.reshape(-1, 3)
        g = (np.linalg.norm(flat, axis=1) - self.radius(flat)).reshape(ts.shape)
        inside = g < 0
        first = np.argmax(inside, axis=1)
        found = inside[np.arange(len(idx)), first] & (first > 0)
        for row in np.nonzero(found)[0]:
            k = idx[row]
            lo, hi = ts[row, first[row] - 1], ts[row, first[row]]
            for _ in range(n_bisect):
                mid = 0.5 * (lo + hi)
                p = origins[k] + mid * d[k]
                if np.linalg.norm(p) < self.radius(p[None, :])[0]:
                    hi = mid
                else:
                    lo = mid
            hit[k] = origins[k] + hi * d[k]
        return hit


def _power_law_block(rng, n, count, rms):
    v = rng.standard_normal(count)
    return v * (rms / np.sqrt(np.mean(v * v)))


def generate_body(
    seed,
    degree=12,
    avg_radius=EROS_MEAN_RADIUS,
    alpha=1.84,
    shape_ratio=0.06,
    gravity_degree=8,
    mu=EROS_MU,
    gravity_ref_radius=EROS_GRAVITY_RADIUS,
    gravity_deg2_rms=0.045,
    rotation=None,
):
    """Sample a body whose shape and gravity spectra follow ``K / n^alpha`` exactly per degree.

    Parameters
    ----------
    degree : int
        Shape degree; 0 yields a sphere.
    shape_ratio : float
        Degree-2 shape RMS as a fraction of ``avg_radius``.
    gravity_deg2_rms : float
        Degree-2 RMS of the normalized gravity coefficients.

    Notes
    -----
    Degree-1 shape terms are zero (center of figure at the origin) and the
    gravity C20 is forced negative (oblate). Samples are redrawn until the
    radial function stays above 30 % of the mean radius.
    """
    rng = np.random.default_rng(seed)
    deg = shape_degrees(degree)
    K = shape_ratio * avg_radius * 2.0**alpha
    for _ in range(100):
        s = np.zeros(deg.size)
        s[0] = avg_radius
        for n in range(2, degree + 1):
            sel = deg == n
            s[sel] = _power_law_block(rng, n, int(sel.sum()), K / n**alpha)
        shape = ShapeCoefficients(degree, s)
        lon, lat = fibonacci_sphere(2000)
        if shape.evaluate(lon, lat).min() > 0.3 * avg_radius:
            break
    Kg = gravity_deg2_rms * 2.0**alpha
    C = np.zeros((gravity_degree + 1,) * 2)
    S = np.zeros_like(C)
    for n in range(2, gravity_degree + 1):
        vals = _power_law_block(rng, n, 2 * n + 1, Kg / n**alpha)
        C[n, : n + 1] = vals[: n + 1]
        S[n, 1 : n + 1] = vals[n + 1 :]
    C[2, 0] = -abs(C[2, 0])
    gravity = GravityField(mu, gravity_ref_radius, C, S)
    if rotation is None:
        rotation = RotationState(EROS_POLE_RA, EROS_POLE_DEC, EROS_SPIN_RATE, float(rng.uniform(0, 2 * np.pi)))
    return BodyModel(shape, gravity, rotation, float(avg_radius))


# -- surface features ----------------------------------------------------------


@dataclass
class SurfaceFeature:
    id: int
    acaf_position: np.ndarray
    normal: np.ndarray
    canonical_descriptor: np.ndarray
    detectability: float = 0.7


@dataclass
class FeatureField:
    """Column-oriented storage of all surface features."""

    positions: np.ndarray
    normals: np.ndarray
    descriptors: np.ndarray
    detectability: np.ndarray

    def __len__(self):
        return len(self.positions)

    def __getitem__(self, k):
        return SurfaceFeature(int(k), self.positions[k], self.normals[k], self.descriptors[k], float(self.detectability[k]))


def seed_features(body, count, seed, detectability=0.7, descriptor_scale=12.0):
    """Sample features uniformly by surface area with i.i.d. canonical descriptors.

    Area weighting uses ``dA/dOmega = r^2 / (n . r_hat)`` with rejection
    sampling against a bound estimated on a dense grid.
    """
    if count <= 0:
        raise ValueError("count must be positive")
    rng = np.random.default_rng(seed)

    def area_density(lon, lat):
        r = body.shape.evaluate(lon, lat)
        n = body.surface_normals(lon, lat)
        cos_t = np.sum(n * unit_vectors(lon, lat), axis=1)
        return r * r / np.maximum(cos_t, 1e-3)

    glon, glat = fibonacci_sphere(20000)
    bound = 1.2 * area_density(glon, glat).max()
    lons, lats = [], []
    have = 0
    while have < count:
        m = max(2 * (count - have), 64)
        lon = rng.uniform(-np.pi, np.pi, m)
        lat = np.arcsin(rng.uniform(-1.0, 1.0, m))
        keep = rng.uniform(0.0, bound, m) < area_density(lon, lat)
        lons.append(lon[keep])
        lats.append(lat[keep])
        have += int(keep.sum())
    lon = np.concatenate(lons)[:count]
    lat = np.concatenate(lats)[:count]
    return FeatureField(
        positions=body.surface_points(lon, lat),
        normals=body.surface_normals(lon, lat),
        descriptors=rng.normal(0.0, descriptor_scale, (count, DESCRIPTOR_DIM)),
        detectability=np.full(count, float(detectability)),
    )


# -- keypoint detection ---------------------------------------------------------


@dataclass(frozen=True)
class KeypointObservation:
    spacecraft: int
    epoch: float
    pixel: frames.PixelPoint
    descriptor: np.ndarray
    truth_feature_id: int


@dataclass
class KeypointSet:
    """All keypoints detected in one image.

    ``feature_ids`` is evaluation-only ground truth.
    """

    spacecraft: int
    epoch: float
    pixels: np.ndarray
    descriptors: np.ndarray
    feature_ids: np.ndarray

    def __len__(self):
        return len(self.pixels)

    def __getitem__(self, k):
        u, v = self.pixels[k]
        return KeypointObservation(self.spacecraft, self.epoch, frames.PixelPoint(u, v), self.descriptors[k], int(self.feature_ids[k]))

    @classmethod
    def empty(cls, spacecraft, epoch):
        return cls(spacecraft, epoch, np.zeros((0, 2)), np.zeros((0, DESCRIPTOR_DIM)), np.zeros(0, dtype=int))


@dataclass(frozen=True)
class DetectionConfig:
    pixel_sigma: float = 2.0
    descriptor_sigma: float = 4.0
    limb_angle: float = np.deg2rad(10.0)
    # cosine of sun incidence below which detection probability ramps to zero
    terminator_ramp: float = 0.25
    occlusion_steps: int = 48


def detect_keypoints(features, camera, sun_dir, body, rng, config=DetectionConfig(), spacecraft=0, epoch=0.0):
    """Emit keypoints for features visible, lit and detected in one image.

    ``camera`` and ``sun_dir`` are expressed in the body-fixed frame.
    """
    P = features.positions
    to_cam = camera.position[None, :] - P
    dist = np.linalg.norm(to_cam, axis=1)
    view = to_cam / dist[:, None]
    cos_view = np.sum(features.normals * view, axis=1)
    cos_sun = features.normals @ sun_dir
    cand = (cos_view > np.sin(config.limb_angle)) & (cos_sun > 0)
    idx = np.nonzero(cand)[0]
    if idx.size:
        uv, w = frames.project_points(camera, P[idx])
        ok = (w > 0) & camera.in_image(uv)
        idx, uv = idx[ok], uv[ok]
    if idx.size:
        vis = ~_occluded(body, camera.position, P[idx], config.occlusion_steps)
        idx, uv = idx[vis], uv[vis]
    if idx.size == 0:
        return KeypointSet.empty(spacecraft, epoch)
    ramp = config.terminator_ramp
    p = features.detectability[idx] * np.clip(cos_sun[idx] / ramp, 0.0, 1.0)
    p *= np.clip((cos_view[idx] - np.sin(config.limb_angle)) / ramp, 0.0, 1.0)
    draws = rng.uniform(size=idx.size)
    noise_px = rng.normal(0.0, config.pixel_sigma, (idx.size, 2))
    noise_d = rng.normal(0.0, config.descriptor_sigma, (idx.size, DESCRIPTOR_DIM))
    keep = draws < p
    pix = uv + noise_px
    keep &= camera.in_image(pix)
    return KeypointSet(spacecraft, epoch, pix[keep], features.descriptors[idx[keep]] + noise_d[keep], idx[keep])


def _occluded(body, origin, targets, n_steps):
    """True where the segment from ``origin`` to a target passes through the body first."""
    if len(targets) == 0:
        return np.zeros(0, dtype=bool)
    s = np.linspace(0.0, 0.98, n_steps)
    pts = origin[None, None, :] + s[None, :, None] * (targets[:, None, :] - origin[None, None, :])
    inside = body.inside(pts.reshape(-1, 3)).reshape(len(targets), n_steps)
    return inside.any(axis=1)


# -- sensor measurements ----------------------------------------------------------


@dataclass(frozen=True)
class RfMeasurement:
    transmitter: int
    receiver: int
    epoch: float
    pseudorange: float
    doppler: float

    def __post_init__(self):
        if self.transmitter == self.receiver:
            raise ValueError("transmitter and receiver must differ")


def rf_model(pos_i, vel_i, pos_j, vel_j, bias_i, bias_j, rate_i, rate_j):
    """Noise-free pseudorange and Doppler from i to j; biases in m and m/s."""
    rho = np.asarray(pos_j) - np.asarray(pos_i)
    rng_ = np.linalg.norm(rho, axis=-1)
    rate = np.sum((np.asarray(vel_j) - np.asarray(vel_i)) * rho, axis=-1) / rng_
    return rng_ + bias_j - bias_i, rate + rate_j - rate_i


def measure_rf(positions, velocities, biases, bias_rates, pair, epoch, rng, sigma_range=0.10, sigma_rate=1e-3):
    """One-way pseudorange and Doppler between spacecraft ``pair = (i, j)``.

    ``biases`` (m) and ``bias_rates`` (m/s) are clock terms times the speed of
    light, indexed by spacecraft.
    """
    i, j = pair
    if i == j:
        raise ValueError("transmitter and receiver must differ")
    rho, rate = rf_model(positions[i], velocities[i], positions[j], velocities[j], biases[i], biases[j], bias_rates[i], bias_rates[j])
    return RfMeasurement(i, j, epoch, float(rho + rng.normal(0.0, sigma_range)), float(rate + rng.normal(0.0, sigma_rate)))


def euler_312(theta_z, theta_x, theta_y):
    """Rotation for a 3-1-2 sequence: z first, then x, then y."""
    return frames.rot2(theta_y) @ frames.rot1(theta_x) @ frames.rot3(theta_z)


def measure_attitude(truth, rng, sigma_z=24 * ARCSEC, sigma_xy=7 * ARCSEC):
    """Star-tracker solution: truth ACI -> CF rotation premultiplied by a random 3-1-2 error."""
    mat = truth.matrix if isinstance(truth, frames.FrameRotation) else np.asarray(truth)
    noise = euler_312(rng.normal(0.0, sigma_z), rng.normal(0.0, sigma_xy), rng.normal(0.0, sigma_xy))
    out = noise @ mat
    if isinstance(truth, frames.FrameRotation):
        return frames.FrameRotation(out, truth.from_frame, truth.to_frame)
    return out


def acquisition_time(nominal, true_offset, estimated_offset, is_reference=False):
    """True epoch at which a spacecraft records data scheduled for ``nominal``.

    The reference (mothership) clock defines time, so it always records at
    the nominal epoch.
    """
    if is_reference:
        return nominal
    return nominal - true_offset + estimated_offset


def gravity_truth_vector(body, degree):
    """Truth gravity coefficients in filter-state order, truncated to ``degree``."""
    c_idx, s_idx = coefficient_index(degree)
    G = body.gravity
    vals = [G.Cbar[n, m] if n <= G.degree else 0.0 for n, m in c_idx]
    vals += [G.Sbar[n, m] if n <= G.degree else 0.0 for n, m in s_idx]
    return np.array(vals)


def reference_radii(body, n_points=20000):
    """Dense reference directions and truth radii for shape error metrics."""
    lon, lat = fibonacci_sphere(n_points)
    return lon, lat, body.shape.evaluate(lon, lat)


__all__ = [
    "BodyModel",
    "DetectionConfig",
    "FeatureField",
    "KeypointObservation",
    "KeypointSet",
    "RfMeasurement",
    "SurfaceFeature",
    "acquisition_time",
    "detect_keypoints",
    "euler_312",
    "generate_body",
    "gravity_truth_vector",
    "measure_attitude",
    "measure_rf",
    "reference_radii",
    "rf_model",
    "seed_features",
]
