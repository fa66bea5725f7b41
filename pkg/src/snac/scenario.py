"""Scenario configuration, the per-epoch navigation loop and run reporting."""
import csv
import json
import logging
import os
import tempfile
import time
from collections import defaultdict
from dataclasses import asdict, dataclass, field, fields

import cv2
import numpy as np
import yaml
from scipy import stats

from . import correlation as corr
from . import frames, shape, stereo, truth, ukf
from .dynamics import clock as clk
from .dynamics.gravity import GravityField, coefficient_index
from .dynamics.orbits import (
    OrbitalElements,
    RelativeOrbitalElements,
    elements_to_cartesian,
    mean_to_osculating,
    roe_to_oe,
)
from .harmonics import fibonacci_sphere
from .dynamics.propagation import C_LIGHT, ForceModel, SpacecraftState, SunEphemeris, propagate_adaptive
from .errors import (
    ConfigError,
    ConsensusFailure,
    DegenerateGeometry,
    NonConvergence,
    SnacError,
)

log = logging.getLogger(__name__)

# -- configuration ----------------------------------------------------------------------------


@dataclass
class BodySpec:
    shape_degree: int = 12
    avg_radius: float = truth.EROS_MEAN_RADIUS
    alpha: float = 1.84
    shape_ratio: float = 0.06
    gravity_degree: int = 8
    mu: float = truth.EROS_MU
    gravity_ref_radius: float = truth.EROS_GRAVITY_RADIUS
    gravity_deg2_rms: float = 0.045
    n_features: int = 2000
    detectability: float = 0.7


@dataclass
class OrbitSpec:
    """Mothership mean elements (m, deg) and deputy along-track offsets ``a * dlambda`` (m)."""

    a: float = 45000.0
    e: float = 0.001
    i: float = 110.0
    raan: float = 110.0
    argp: float = 0.0
    M: float = 180.0
    deputy_along_track: tuple = (10000.0, 20000.0)
    srp_coeff: float = 1.2
    area_to_mass: float = 0.01
    sun_distance_au: float = 1.458
    # Heliocentric ecliptic longitude at t = 0; 92 deg puts the Sun ~105 deg from the body +Z axis.
    sun_longitude_deg: float = 92.0


@dataclass
class CameraSpec:
    focal_px: float = 2500.0
    width: int = 2048
    height: int = 1536


@dataclass
class PriorSpec:
    """A-priori 1-sigma per axis."""

    position: float = 500.0
    velocity: float = 0.05
    srp_fraction: float = 0.10
    bias: float = 20.0
    bias_rate: float = 0.002
    mu_fraction: float = 0.05
    pole_deg: float = 0.1
    spin_percent: float = 4e-4
    gravity: float = 0.005


@dataclass
class FilterSpec:
    gravity_degree: int = 4
    underweight: float = 2.0
    stereo_inflation: float = 2.0
    asnc_window: int = 50
    # assumed gravity spectrum for the adaptive-noise lower bound; 0 disables it
    asnc_floor_deg2_rms: float = 0.045
    asnc_floor_alpha: float = 1.84
    gate_sigma: float = None
    max_landmarks: int = 100
    max_new_landmarks: int = 15


@dataclass
class ScenarioConfig:
    seed: int = 7
    n_orbits: float = 2.0
    cadence: float = 300.0
    body: BodySpec = field(default_factory=BodySpec)
    orbit: OrbitSpec = field(default_factory=OrbitSpec)
    camera: CameraSpec = field(default_factory=CameraSpec)
    prior: PriorSpec = field(default_factory=PriorSpec)
    filter: FilterSpec = field(default_factory=FilterSpec)
    correlation: corr.CorrelationConfig = field(default_factory=corr.CorrelationConfig)
    shape_degree: int = 8
    shape_alpha: float = 1.84
    tp_distance: float = 50.0
    q1: float = clk.DEFAULT_Q1
    q2: float = clk.DEFAULT_Q2

    def __post_init__(self):
        self.validate()

    def validate(self):
        p = self.prior
        for name in ("position", "velocity", "srp_fraction", "bias", "bias_rate", "mu_fraction", "pole_deg", "spin_percent", "gravity"):
            if not getattr(p, name) > 0:
                raise ConfigError(f"prior.{name} must be positive")
        if len(self.orbit.deputy_along_track) < 1:
            raise ConfigError("stereovision needs at least two spacecraft")
        if not self.cadence > 0:
            raise ConfigError("cadence must be positive")
        if self.n_orbits < 0:
            raise ConfigError("n_orbits must be non-negative")
        if self.filter.gravity_degree < 2:
            raise ConfigError("filter gravity degree must be at least 2")
        if self.body.gravity_degree < self.filter.gravity_degree:
            raise ConfigError("filter gravity degree exceeds truth degree")
        if self.filter.underweight < 1:
            raise ConfigError("underweight factor must be at least 1")
        if self.filter.asnc_floor_deg2_rms < 0:
            raise ConfigError("filter.asnc_floor_deg2_rms must be non-negative")

    @property
    def tp_threshold(self):
        """True-positive distance scaled from an 8.4 km reference body to the configured radius."""
        return self.tp_distance * self.body.avg_radius / truth.EROS_MEAN_RADIUS

    @property
    def n_spacecraft(self):
        return 1 + len(self.orbit.deputy_along_track)

    @property
    def period(self):
        return 2.0 * np.pi * np.sqrt(self.orbit.a**3 / self.body.mu)

    @property
    def n_epochs(self):
        return int(round(self.n_orbits * self.period / self.cadence))

    @property
    def epochs_per_orbit(self):
        return self.period / self.cadence

    @property
    def middle_spacecraft(self):
        """Spacecraft with the smallest summed along-track distance to the others."""
        offs = np.array([0.0, *self.orbit.deputy_along_track])
        return int(np.argmin([np.abs(offs - o).sum() for o in offs]))

    def to_dict(self):
        d = asdict(self)
        d["orbit"]["deputy_along_track"] = list(self.orbit.deputy_along_track)
        d["correlation"]["weights"] = list(self.correlation.weights)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        sub = {
            "body": BodySpec,
            "orbit": OrbitSpec,
            "camera": CameraSpec,
            "prior": PriorSpec,
            "filter": FilterSpec,
            "correlation": corr.CorrelationConfig,
        }
        kw = {}
        known = {f.name for f in fields(cls)}
        for key, val in d.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            if key in sub:
                sub_known = {f.name for f in fields(sub[key])}
                bad = set(val or {}) - sub_known
                if bad:
                    raise ConfigError(f"unknown keys in {key}: {sorted(bad)}")
                val = dict(val or {})
                for k in ("deputy_along_track", "weights"):
                    if k in val:
                        val[k] = tuple(float(x) for x in val[k])
                try:
                    kw[key] = sub[key](**val)
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"invalid {key} section: {exc}") from exc
            else:
                kw[key] = val
        return cls(**kw)

    @classmethod
    def from_yaml(cls, path):
        with open(path) as fh:
            try:
                data = yaml.safe_load(fh)
            except yaml.YAMLError as exc:
                raise ConfigError(f"cannot parse {path}: {exc}") from exc
        if data is not None and not isinstance(data, dict):
            raise ConfigError("config root must be a mapping")
        return cls.from_dict(data)

    def write_yaml(self, path):
        with open(path, "w") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=True)


# -- truth world --------------------------------------------------------------------------------


@dataclass
class TruthWorld:
    body: truth.BodyModel
    features: truth.FeatureField
    sun: SunEphemeris
    states: list
    clocks: list
    epoch: float = 0.0

    def biases(self):
        """Clock offsets and drifts relative to the reference clock, times c."""
        b = [C_LIGHT * (c.offset - self.clocks[0].offset) for c in self.clocks]
        r = [C_LIGHT * (c.drift - self.clocks[0].drift) for c in self.clocks]
        return np.array(b), np.array(r)


def initial_swarm(config, body):
    """Osculating inertial states from the configured mean elements."""
    o = config.orbit
    chief = OrbitalElements(o.a, o.e, np.deg2rad(o.i), np.deg2rad(o.raan), np.deg2rad(o.argp), np.deg2rad(o.M))
    elements = [chief] + [roe_to_oe(chief, RelativeOrbitalElements(0.0, d / o.a, 0.0, 0.0, 0.0, 0.0)) for d in o.deputy_along_track]
    J2 = body.gravity.J2
    R_acic = body.rotation.aci_to_acic()
    states = []
    for oe in elements:
        osc = mean_to_osculating(oe, J2, body.gravity.mu, body.gravity.ref_radius)
        p, v = elements_to_cartesian(osc.as_array(), body.gravity.mu)
        states.append(SpacecraftState(R_acic.T @ p, R_acic.T @ v, o.srp_coeff, o.area_to_mass))
    return states


def build_truth(config):
    ss = np.random.SeedSequence(config.seed)
    body_seed, feat_seed, clock_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(3))
    b = config.body
    body = truth.generate_body(
        body_seed, b.shape_degree, b.avg_radius, b.alpha, b.shape_ratio, b.gravity_degree,
        b.mu, b.gravity_ref_radius, b.gravity_deg2_rms,
    )
    features = truth.seed_features(body, b.n_features, feat_seed, b.detectability)
    sun = SunEphemeris(config.orbit.sun_distance_au, np.deg2rad(config.orbit.sun_longitude_deg))
    states = initial_swarm(config, body)
    rng = np.random.default_rng(clock_seed)
    clocks = [clk.ClockState(0.0, 0.0, config.q1, config.q2)]
    for _ in range(config.n_spacecraft - 1):
        off = rng.normal(0.0, config.prior.bias) / C_LIGHT
        drift = rng.normal(0.0, config.prior.bias_rate) / C_LIGHT
        clocks.append(clk.ClockState(off, drift, config.q1, config.q2))
    return TruthWorld(body, features, sun, states, clocks)


def truth_state_vector(config, world):
    """Head of the filter state evaluated at the truth."""
    body = world.body
    g = body.gravity.truncated(config.filter.gravity_degree).to_vector()
    biases, rates = world.biases()
    return ukf.stack_estimate(
        config.n_spacecraft, config.filter.gravity_degree, body.rotation.psi, body.gravity.mu, g,
        [s.position for s in world.states], [s.velocity for s in world.states], [s.srp_coeff for s in world.states],
        biases, rates,
    )


def prior_sigmas(config, world):
    layout = ukf.StateLayout(config.n_spacecraft, config.filter.gravity_degree)
    p = config.prior
    sig = np.zeros(layout.size)
    sig[0:2] = np.deg2rad(p.pole_deg)
    sig[2] = abs(world.body.rotation.omega) * p.spin_percent / 100.0
    sig[layout.mu] = p.mu_fraction * world.body.gravity.mu
    sig[layout.gravity] = p.gravity
    for i in range(config.n_spacecraft):
        sc = layout.spacecraft(i)
        sig[sc[:3]] = p.position
        sig[sc[3:6]] = p.velocity
        sig[sc[6]] = p.srp_fraction * world.states[i].srp_coeff
    for i in range(1, config.n_spacecraft):
        b = layout.bias(i)
        sig[b[0]] = p.bias
        sig[b[1]] = p.bias_rate
    return sig


def init_from_ground_phase(config, world, rng=None):
    """Initial filter belief: truth plus an error drawn from the a-priori covariance.

    The landmark part of the state starts empty.
    """
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(4)[3])
    x_true = truth_state_vector(config, world)
    sig = prior_sigmas(config, world)
    mean = x_true + sig * rng.standard_normal(len(sig))
    return ukf.FilterEstimate(mean, np.diag(sig**2), world.epoch, config.n_spacecraft, config.filter.gravity_degree, [])


# -- run report ---------------------------------------------------------------------------------


@dataclass
class RunReport:
    """Summary metrics over the final orbit, recomputable from the run directory."""

    n_epochs: int
    final_orbit_epochs: int
    rmse: dict
    mean_sigma: dict
    nees: dict
    correlation: dict
    stereo: dict
    gravity_degree: dict
    shape: dict
    landmarks: dict

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True, default=_json_default)

    def write(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json())
            fh.write("\n")

    @classmethod
    def read(cls, path):
        with open(path) as fh:
            return cls(**json.load(fh))


def _json_default(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    raise TypeError(type(x))


def _clean(x):
    x = float(x)
    return None if not np.isfinite(x) else x


# -- the navigation loop ------------------------------------------------------------------------


class Timer:
    def __init__(self):
        self.totals = defaultdict(float)
        self.counts = defaultdict(int)

    def section(self, name):
        timer = self

        class _Ctx:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                timer.totals[name] += time.perf_counter() - self.t0
                timer.counts[name] += 1

        return _Ctx()

    def summary(self):
        return {k: {"total_s": self.totals[k], "mean_s": self.totals[k] / max(self.counts[k], 1)} for k in sorted(self.totals)}


class Logs:
    """CSV writers for one run directory."""

    def __init__(self, run_dir, config):
        self.dir = run_dir
        os.makedirs(run_dir, exist_ok=True)
        self._files = {}
        self._writers = {}
        n = config.n_spacecraft
        self.open("measurements", ["epoch", "kind", "spacecraft", "other", "value_1", "value_2"])
        self.open("correlations", ["epoch", "kind", "spacecraft", "other", "landmark", "descriptor_distance2", "m2d", "mu", "mv", "true_positive"])
        self.open("stereo", ["epoch", "landmark", "n_views", "err_x", "err_y", "err_z", "sigma_x", "sigma_y", "sigma_z"])
        self.open("truth", ["epoch"] + [f"sc{i}_{c}" for i in range(n) for c in ("x", "y", "z", "vx", "vy", "vz")] + [f"sc{i}_{c}" for i in range(1, n) for c in ("bias", "bias_rate")])
        self.open("events", ["epoch", "event", "detail"])

    def open(self, name, header):
        fh = open(os.path.join(self.dir, f"{name}.csv"), "w", newline="")
        w = csv.writer(fh)
        w.writerow(header)
        self._files[name] = fh
        self._writers[name] = w

    def row(self, name, values):
        self._writers[name].writerow([_fmt(v) for v in values])

    def close(self):
        for fh in self._files.values():
            fh.close()


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    return v


@dataclass
class EpochImages:
    keypoints: dict
    attitudes: dict
    cameras: dict


class NavigationRun:
    """Stateful simulation of the swarm and its onboard pipeline."""

    def __init__(self, config, run_dir):
        self.config = config
        self.run_dir = run_dir
        self.world = build_truth(config)
        seeds = np.random.SeedSequence(config.seed).spawn(8)
        self.rng_meas = np.random.default_rng(seeds[4])
        self.rng_clock = np.random.default_rng(seeds[5])
        self.rng_detect = np.random.default_rng(seeds[6])
        self.consensus_seed = int(seeds[7].generate_state(1)[0] % (2**31 - 1))
        self.est = init_from_ground_phase(config, self.world, np.random.default_rng(seeds[3]))
        body = self.world.body
        self.force = ForceModel(body.gravity.ref_radius, body.rotation.w0, self.world.sun, True, True)
        self.dynamics = ukf.FilterDynamics(self.force, (config.orbit.area_to_mass,) * config.n_spacecraft, (config.q1,) * config.n_spacecraft, (config.q2,) * config.n_spacecraft)
        f = config.filter
        self.ukf_config = ukf.UkfConfig(underweight=f.underweight, stereo_inflation=f.stereo_inflation, gravity_degree=f.gravity_degree, gate_sigma=f.gate_sigma, pixel_sigma=config.correlation.pixel_sigma)
        floor = (f.gravity_degree, f.asnc_floor_deg2_rms, f.asnc_floor_alpha) if f.asnc_floor_deg2_rms > 0 else None
        self.asnc = ukf.AsncState.from_bound(self.est, config.cadence, body.gravity.ref_radius, f.asnc_window, floor)
        K = frames.intrinsic_matrix(config.camera.focal_px, config.camera.width / 2.0, config.camera.height / 2.0)
        self.calibration = K
        self.db = corr.LandmarkDatabase()
        self.history = ukf.FilterHistory(ukf.StateLayout(config.n_spacecraft, f.gravity_degree).names())
        self.timer = Timer()
        self.logs = Logs(run_dir, config)
        self.det_config = truth.DetectionConfig(pixel_sigma=config.correlation.pixel_sigma)
        self.k = 0

    # -- truth -------------------------------------------------------------------------------

    def advance_truth(self, dt):
        w = self.world
        w.states = propagate_adaptive(w.states, w.body.gravity, w.body.rotation, w.sun, w.epoch, dt)
        w.clocks = [clk.clock_transition(c, dt, self.rng_clock) for c in w.clocks]
        w.epoch += dt

    def acquisition_state(self, i):
        """Truth position and velocity when spacecraft ``i`` records data for the current nominal epoch."""
        w = self.world
        s = w.states[i]
        if i == 0:
            return s.position, s.velocity
        est_off = self.est.bias(i)[0] / C_LIGHT
        true_off = w.clocks[i].offset - w.clocks[0].offset
        t_acq = truth.acquisition_time(w.epoch, true_off, est_off)
        dt = t_acq - w.epoch
        return s.position + dt * s.velocity, s.velocity

    def take_images(self):
        w = self.world
        M = w.body.rotation.aci_to_acaf(w.epoch)
        sun_acaf = M @ w.sun.direction(w.epoch)
        kps, atts, cams = {}, {}, {}
        for i in range(self.config.n_spacecraft):
            pos, vel = self.acquisition_state(i)
            A_true = frames.nadir_camera_attitude(pos, vel)
            A_meas = truth.measure_attitude(A_true, self.rng_meas)
            cam = frames.CameraModel(self.calibration, self.config.camera.width, self.config.camera.height, M @ pos, A_true @ M.T)
            kps[i] = truth.detect_keypoints(w.features, cam, sun_acaf, w.body, self.rng_detect, self.det_config, i, w.epoch)
            atts[i] = A_meas
            cams[i] = ukf.CameraGeometry(self.calibration, A_meas)
        return EpochImages(kps, atts, cams)

    def take_rf(self):
        n = self.config.n_spacecraft
        biases, rates = self.world.biases()
        pos, vel = zip(*(self.acquisition_state(i) for i in range(n)))
        out = []
        for i in range(n):
            for j in range(n):
                if i != j:
                    out.append(truth.measure_rf(pos, vel, biases, rates, (i, j), self.world.epoch, self.rng_meas))
        return out

    # -- spacecraft-to-spacecraft ------------------------------------------------------------

    def _anchor(self, kp_set, k):
        return self.world.features.positions[kp_set.feature_ids[k]]

    def _true_positive(self, a, b):
        return bool(np.linalg.norm(a - b) < self.config.tp_threshold)

    def sc_to_sc(self, images):
        cfg = self.config.correlation
        n = self.config.n_spacecraft
        lay = self.est.layout
        matches = {}
        for a in range(n):
            for b in range(a + 1, n):
                ka, kb = images.keypoints[a], images.keypoints[b]
                pairs = corr.match_descriptors(ka.descriptors, kb.descriptors, cfg.lowe_ratio)
                try:
                    pairs, _ = corr.consensus_reject(pairs, ka.pixels, kb.pixels, self.calibration, self.calibration, cfg, seed=self.consensus_seed + 7919 * self.k + 31 * a + b)
                except ConsensusFailure as exc:
                    self.logs.row("events", [self.world.epoch, "consensus_failure", f"{a}-{b}: {exc}"])
                    pairs = []
                idx = np.concatenate([lay.position(a), lay.position(b)])
                gamma = self.est.mean[idx]
                P_gamma = self.est.block(idx)
                pairs = corr.epipolar_reject(pairs, ka.pixels, kb.pixels, self.calibration, self.calibration, images.attitudes[a], images.attitudes[b], gamma, P_gamma, cfg)
                for p in pairs:
                    tp = self._true_positive(self._anchor(ka, p.index_a), self._anchor(kb, p.index_b))
                    self.logs.row("correlations", [self.world.epoch, "sc2sc", a, b, -1, p.descriptor_distance2, p.mahalanobis, float("nan"), float("nan"), tp])
                matches[(a, b)] = pairs
        if n == 2:
            return corr.share_correlations(matches, 0, (1, 1))
        outer = tuple(i for i in range(n) if i != self.config.middle_spacecraft)[:2]
        return corr.share_correlations(matches, self.config.middle_spacecraft, outer)

    # -- filter-to-spacecraft ----------------------------------------------------------------

    def filter_to_sc(self, images):
        """Correlate state landmarks with each image; returns pixel observations and used keypoints."""
        est = self.est
        cfg = self.config.correlation
        lay = est.layout
        ids = list(est.landmark_ids)
        obs, used = [], set()
        hit = defaultdict(list)
        if not ids:
            return obs, used, hit
        L = np.array([est.landmark(i)[0] for i in ids])
        M = frames.aci_to_acaf(*est.psi, self.world.body.rotation.w0, est.epoch)
        for j in range(self.config.n_spacecraft):
            kp = images.keypoints[j]
            if len(kp) == 0:
                continue
            sel = np.concatenate([lay.position(j), lay.psi])
            P_state = est.block(sel)
            uv, w, P_l = corr.predict_landmark_pixels(L, self.calibration, images.attitudes[j], est.position(j), est.psi, self.world.body.rotation.w0, est.epoch, P_state)
            cam_pos = M @ est.position(j)
            visible = (w > 0) & (np.sum((L - cam_pos) * L, axis=1) < 0)
            desc = np.array([self.db[i].reference_descriptor(j) for i in ids])
            assign = corr.correlate_filter_to_image(ids, uv, P_l, desc, kp.pixels, kp.descriptors, cfg, valid=visible)
            for a in assign:
                rec = self.db[a.landmark]
                anchor = self._anchor(kp, a.keypoint)
                tp = self._true_positive(anchor, rec.truth_anchor) if rec.truth_anchor is not None else True
                self.logs.row("correlations", [self.world.epoch, "f2sc", j, -1, a.landmark, a.descriptor_distance2, a.m2d, a.mu, a.mv, tp])
                obs.append(ukf.PixelObservation(a.landmark, j, kp.pixels[a.keypoint].copy()))
                used.add((j, a.keypoint))
                hit[a.landmark].append((j, a.keypoint, anchor))
        return obs, used, hit

    # -- stereovision ------------------------------------------------------------------------

    def initialize_landmarks(self, tracks, used, images):
        est = self.est
        f = self.config.filter
        lay = est.layout
        capacity = min(f.max_new_landmarks, f.max_landmarks - len(est.landmark_ids))
        out = []
        if capacity <= 0:
            return out
        for tr in tracks:
            if len(out) >= capacity:
                break
            if any((sc, k) in used for sc, k in tr.members.items()):
                continue
            views = []
            for sc, k in sorted(tr.members.items()):
                views.append(stereo.StereoView(sc, images.keypoints[sc].pixels[k], self.calibration, images.attitudes[sc], est.position(sc), est.psi, self.world.body.rotation.w0, est.epoch, lay.position(sc), lay.psi))
            try:
                L, _ = stereo.triangulate(views, self.config.correlation.pixel_sigma)
                if not 0.1 * self.config.body.avg_radius < np.linalg.norm(L) < 3.0 * self.config.body.avg_radius:
                    raise DegenerateGeometry("triangulated point far from the body")
                P_L, cross, G = stereo.stereo_covariance(L, views, est.covariance, self.config.correlation.pixel_sigma, return_sensitivity=True)
            except (DegenerateGeometry, NonConvergence) as exc:
                self.logs.row("events", [self.world.epoch, "stereo_reject", str(exc)])
                continue
            anchors = np.array([self._anchor(images.keypoints[sc], k) for sc, k in tr.members.items()])
            descs = {sc: images.keypoints[sc].descriptors[k].copy() for sc, k in tr.members.items()}
            rec = self.db.new(L, P_L, descs, est.epoch, truth_anchor=anchors.mean(axis=0))
            P_cf = stereo.cf_covariance(P_L, views[0])
            R = views[0].attitude @ views[0].body_rotation().T
            e = R @ (L - rec.truth_anchor)
            self.logs.row("stereo", [est.epoch, rec.id, len(views), *e, *np.sqrt(np.diag(P_cf))])
            for sc, k in tr.members.items():
                used.add((sc, k))
            out.append(ukf.StereoEstimate(rec.id, L, P_L, cross, G))
        return out

    # -- one epoch ---------------------------------------------------------------------------

    def step(self):
        cfg = self.config
        dt = cfg.cadence
        self.k += 1
        with self.timer.section("truth"):
            self.advance_truth(dt)
        with self.timer.section("time_update"):
            try:
                self.est, tu = ukf.time_update(self.est, dt, self.dynamics, self.asnc.qtilde, self.ukf_config)
            except SnacError as exc:
                raise RuntimeError(f"time update failed at epoch {self.world.epoch}") from exc
        with self.timer.section("images"):
            images = self.take_images()
            rf = self.take_rf()
        for m in rf:
            self.logs.row("measurements", [m.epoch, "rf", m.transmitter, m.receiver, m.pseudorange, m.doppler])
        for i, kp in images.keypoints.items():
            for k in range(len(kp)):
                self.logs.row("measurements", [kp.epoch, "pixel", i, int(kp.feature_ids[k]), kp.pixels[k, 0], kp.pixels[k, 1]])
        with self.timer.section("sc2sc"):
            tracks = self.sc_to_sc(images)
        with self.timer.section("f2sc"):
            obs, used, hit = self.filter_to_sc(images)
        with self.timer.section("stereo"):
            new = self.initialize_landmarks(tracks, used, images)
        prior_ids = list(self.est.landmark_ids)
        with self.timer.section("augment"):
            self.est, dropped = ukf.augment(self.est, new, self.ukf_config)
        for lid in dropped:
            self.db.delete(lid)
            self.logs.row("events", [self.world.epoch, "augment_drop", lid])
        with self.timer.section("measurement_update"):
            self.est, innov = ukf.measurement_update(self.est, rf, obs, images.cameras, self.world.body.rotation.w0, self.ukf_config)
            self.asnc = ukf.asnc_update(self.asnc, tu, innov, self.est, self.world.body.gravity.ref_radius)
        for lid in prior_ids:
            rec = self.db[lid]
            if lid in hit:
                rec.consecutive_misses = 0
                rec.total_correlations += len(hit[lid])
                rec.truth_anchor = np.mean([h[2] for h in hit[lid]], axis=0)
                for sc, k, _ in hit[lid]:
                    rec.descriptors[sc] = images.keypoints[sc].descriptors[k].copy()
            else:
                rec.consecutive_misses += 1
        with self.timer.section("retire"):
            due = [lid for lid in self.est.landmark_ids if self.db[lid].consecutive_misses >= cfg.correlation.n_retire]
            self._sync_records(due)
            retired, deleted = corr.retire_and_dedupe(self.db, cfg.correlation)
            self.est = ukf.retire_from_state(self.est, retired)
        if retired:
            self.logs.row("events", [self.world.epoch, "retire", " ".join(str(i) for i in retired)])
        self._log_epoch(innov)

    def _sync_records(self, ids):
        for lid in ids:
            m, P = self.est.landmark(lid)
            self.db[lid].position = m.copy()
            self.db[lid].covariance = P.copy()

    def _log_epoch(self, innov):
        cfg = self.config
        x_true = truth_state_vector(cfg, self.world)
        lay = self.est.layout
        pv = np.concatenate([lay.spacecraft(i)[:6] for i in range(cfg.n_spacecraft)])
        err = self.est.mean[pv] - x_true[pv]
        self.history.append(self.est, ukf.nees(err, self.est.block(pv)), innov, self.asnc.qtilde)
        biases, rates = self.world.biases()
        row = [self.world.epoch]
        for s in self.world.states:
            row += list(s.position) + list(s.velocity)
        for i in range(1, cfg.n_spacecraft):
            row += [biases[i], rates[i]]
        self.logs.row("truth", row)

    # -- finish ------------------------------------------------------------------------------

    def finish(self):
        self._sync_records(list(self.est.landmark_ids))
        self.logs.close()
        d = self.run_dir
        self.history.write_csv(os.path.join(d, "filter.csv"), self.config.n_spacecraft)
        self.db.write_csv(os.path.join(d, "landmarks.csv"))
        self.config.write_yaml(os.path.join(d, "config.yaml"))
        body = self.world.body
        body.gravity.write(os.path.join(d, "truth_gravity.txt"))
        body.shape.write(os.path.join(d, "truth_shape.txt"))
        with self.timer.section("shape"):
            shape_fit_outputs(d, self.db, self.config)
        with open(os.path.join(d, "truth_params.json"), "w") as fh:
            json.dump({"psi": list(body.rotation.psi), "w0": body.rotation.w0, "mu": body.gravity.mu, "srp": [s.srp_coeff for s in self.world.states], "avg_radius": body.avg_radius}, fh, indent=2, sort_keys=True)
        with open(os.path.join(d, "timing.json"), "w") as fh:
            json.dump(self.timer.summary(), fh, indent=2, sort_keys=True)


def shape_fit_outputs(run_dir, db, config):
    """Fit the final shape from every stored landmark and write coefficients and error curves."""
    truth_shape = shape.ShapeCoefficients.read(os.path.join(run_dir, "truth_shape.txt"))
    ref_lon, ref_lat = fibonacci_sphere(20000)
    ref_r = truth_shape.evaluate(ref_lon, ref_lat)
    pts, covs = db.positions()
    result = {"n_points": int(len(pts)), "degree": config.shape_degree}
    curves = []
    if len(pts) >= (config.shape_degree + 1) ** 2:
        var = shape.radius_covariance(pts, covs)
        fit = shape.fit_shape(pts, config.shape_degree, config.shape_alpha, var, "power")
        fit.coeffs.write(os.path.join(run_dir, "shape_coeffs.txt"), config.shape_alpha, fit.nu)
        result["rmse"] = shape.shape_rmse(fit.coeffs, ref_lon, ref_lat, ref_r)
        for deg in range(2, config.shape_degree + 1):
            row = {"degree": deg}
            for method in ("none", "identity", "power"):
                try:
                    f = shape.fit_shape(pts, deg, config.shape_alpha, var, method)
                    row[method] = shape.shape_rmse(f.coeffs, ref_lon, ref_lat, ref_r)
                except SnacError:
                    row[method] = float("nan")
            curves.append(row)
    else:
        result["rmse"] = float("nan")
    with open(os.path.join(run_dir, "shape_fit.json"), "w") as fh:
        json.dump({k: _clean(v) if isinstance(v, float) else v for k, v in result.items()}, fh, indent=2, sort_keys=True)
    with open(os.path.join(run_dir, "shape_rmse_vs_degree.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["degree", "none", "identity", "power"])
        for row in curves:
            w.writerow([row["degree"], repr(row["none"]), repr(row["identity"]), repr(row["power"])])


# -- post-hoc report ----------------------------------------------------------------------------


def _read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return rows


def _col(rows, key):
    return np.array([float(r[key]) for r in rows])


def report(run_dir):
    """Build the :class:`RunReport` from the files in ``run_dir``."""
    config = ScenarioConfig.from_yaml(os.path.join(run_dir, "config.yaml"))
    filt = _read_csv(os.path.join(run_dir, "filter.csv"))
    tr = _read_csv(os.path.join(run_dir, "truth.csv"))
    with open(os.path.join(run_dir, "truth_params.json")) as fh:
        tp = json.load(fh)
    tg = GravityField.read(os.path.join(run_dir, "truth_gravity.txt"))
    n_sc = config.n_spacecraft
    n = len(filt)
    per_orbit = int(round(config.epochs_per_orbit))
    final = slice(max(0, n - per_orbit), n)
    m = final.stop - final.start

    def group(names_est, truth_vals):
        if m == 0:
            return float("nan"), float("nan")
        err = np.column_stack([_col(filt, k)[final] - t for k, t in zip(names_est, truth_vals)])
        var = np.column_stack([_col(filt, "var_" + k)[final] for k in names_est])
        return float(np.sqrt(np.mean(err**2))), float(np.sqrt(np.mean(var)))

    rmse, sig = {}, {}
    pos_names = [f"sc{i}_{c}" for i in range(n_sc) for c in "xyz"]
    vel_names = [f"sc{i}_v{c}" for i in range(n_sc) for c in "xyz"]
    if m:
        rmse["position"], sig["position"] = group(pos_names, [_col(tr, k)[final] for k in pos_names])
        rmse["velocity"], sig["velocity"] = group(vel_names, [_col(tr, k)[final] for k in vel_names])
        cr_names = [f"sc{i}_cr" for i in range(n_sc)]
        rmse["srp_coeff"], sig["srp_coeff"] = group(cr_names, tp["srp"])
        b_names = [f"sc{i}_bias" for i in range(1, n_sc)]
        rmse["bias"], sig["bias"] = group(b_names, [_col(tr, k)[final] for k in b_names])
        r_names = [f"sc{i}_bias_rate" for i in range(1, n_sc)]
        rmse["bias_rate"], sig["bias_rate"] = group(r_names, [_col(tr, k)[final] for k in r_names])
        rmse["mu"], sig["mu"] = group(["mu"], [tg.mu])
        rmse["pole"], sig["pole"] = group(["alpha", "delta"], tp["psi"][:2])
        rmse["spin_rate"], sig["spin_rate"] = group(["omega"], [tp["psi"][2]])
    # chi-square consistency of the stacked position/velocity error
    dof = 6 * n_sc
    nees_vals = _col(filt, "nees")[final] if m else np.zeros(0)
    nees_rep = {"dof": dof, "epochs": int(m)}
    if m:
        lo, hi = stats.chi2.ppf([0.025, 0.975], dof * m) / m
        nees_rep.update(mean=float(nees_vals.mean()), lower=float(lo), upper=float(hi), inside=bool(lo <= nees_vals.mean() <= hi))
        lo1, hi1 = stats.chi2.ppf([0.025, 0.975], dof)
        nees_rep["fraction_epochs_inside"] = float(np.mean((nees_vals >= lo1) & (nees_vals <= hi1)))
    # correlation statistics
    cr_rows = _read_csv(os.path.join(run_dir, "correlations.csv"))
    corr_rep = {}
    for kind in ("sc2sc", "f2sc"):
        rows = [r for r in cr_rows if r["kind"] == kind]
        tpv = np.array([int(r["true_positive"]) for r in rows])
        dd = _col(rows, "descriptor_distance2") if rows else np.zeros(0)
        corr_rep[kind] = {
            "count": len(rows),
            "true_positive_rate": _clean(tpv.mean()) if len(rows) else None,
            "descriptor_distance2_mean": _clean(dd.mean()) if len(rows) else None,
            "descriptor_distance2_std": _clean(dd.std()) if len(rows) else None,
        }
        if kind == "f2sc" and rows:
            for key in ("m2d", "mu", "mv"):
                v = _col(rows, key)
                corr_rep[kind][f"{key}_mean"] = float(v.mean())
                corr_rep[kind][f"{key}_std"] = float(v.std())
    st_rows = _read_csv(os.path.join(run_dir, "stereo.csv"))
    st_rep = {"count": len(st_rows)}
    if st_rows:
        for c in "xyz":
            e = _col(st_rows, f"err_{c}")
            s = _col(st_rows, f"sigma_{c}")
            st_rep[f"err_rms_{c}"] = float(np.sqrt(np.mean(e**2)))
            st_rep[f"sigma_mean_{c}"] = float(np.sqrt(np.mean(s**2)))
    # gravity per degree at the final epoch
    grav = {}
    if n:
        deg = config.filter.gravity_degree
        c_idx, s_idx = coefficient_index(deg)
        idx = c_idx + s_idx
        est_vec = np.array([float(filt[-1][f"g{k}"]) for k in range(len(idx))])
        var_vec = np.array([float(filt[-1][f"var_g{k}"]) for k in range(len(idx))])
        true_vec = tg.truncated(deg).to_vector()
        for d in range(2, deg + 1):
            sel = np.array([nn == d for nn, _ in idx])
            grav[str(d)] = {
                "truth_rms": float(np.sqrt(np.mean(true_vec[sel] ** 2))),
                "error_rms": float(np.sqrt(np.mean((est_vec[sel] - true_vec[sel]) ** 2))),
                "sigma_rms": float(np.sqrt(np.mean(var_vec[sel]))),
                "prior_sigma": config.prior.gravity,
            }
    with open(os.path.join(run_dir, "shape_fit.json")) as fh:
        sf = json.load(fh)
    shape_rep = dict(sf)
    if sf.get("rmse") is not None:
        shape_rep["rmse_fraction_of_radius"] = sf["rmse"] / tp["avg_radius"]
    lm_rows = _read_csv(os.path.join(run_dir, "landmarks.csv"))
    lm_rep = {
        "stored": len(lm_rows),
        "retired": sum(1 for r in lm_rows if r["status"] == "retired"),
        "tracked": sum(1 for r in lm_rows if r["status"] == "tracked"),
    }
    return RunReport(n, int(m), rmse, sig, nees_rep, corr_rep, st_rep, grav, shape_rep, lm_rep)


def emit_plots(run_dir):
    """Plot-ready CSVs: errors with 3-sigma envelopes and per-degree gravity RMS."""
    config = ScenarioConfig.from_yaml(os.path.join(run_dir, "config.yaml"))
    filt = _read_csv(os.path.join(run_dir, "filter.csv"))
    tr = _read_csv(os.path.join(run_dir, "truth.csv"))
    n_sc = config.n_spacecraft
    cols = [f"sc{i}_{c}" for i in range(n_sc) for c in ("x", "y", "z", "vx", "vy", "vz")]
    with open(os.path.join(run_dir, "plot_errors.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch"] + [f"{c}_{s}" for c in cols for s in ("err", "3sigma")])
        for fr, trr in zip(filt, tr):
            row = [fr["epoch"]]
            for c in cols:
                row += [repr(float(fr[c]) - float(trr[c])), repr(3.0 * np.sqrt(float(fr["var_" + c])))]
            w.writerow(row)
    rep = report(run_dir)
    with open(os.path.join(run_dir, "plot_gravity_degree.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["degree", "truth_rms", "error_rms", "sigma_rms", "prior_sigma"])
        for d in sorted(rep.gravity_degree, key=int):
            g = rep.gravity_degree[d]
            w.writerow([d, repr(g["truth_rms"]), repr(g["error_rms"]), repr(g["sigma_rms"]), repr(g["prior_sigma"])])
    return ["plot_errors.csv", "plot_gravity_degree.csv", "shape_rmse_vs_degree.csv"]


def run(config, run_dir=None, progress=None):
    """Simulate the scenario, persist logs to ``run_dir`` and return the report."""
    if run_dir is None:
        run_dir = tempfile.mkdtemp(prefix="snac-run-")
    cv2.setNumThreads(1)
    nav = NavigationRun(config, run_dir)
    for k in range(config.n_epochs):
        nav.step()
        if progress is not None:
            progress(k + 1, config.n_epochs, nav)
    nav.finish()
    rep = report(run_dir)
    rep.write(os.path.join(run_dir, "report.json"))
    emit_plots(run_dir)
    return rep
