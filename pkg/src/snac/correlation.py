"""Keypoint correlation between spacecraft, landmark tracking and landmark retirement."""
import csv
from dataclasses import dataclass, field

import cv2
import numpy as np

from . import frames
from .errors import ConsensusFailure


@dataclass(frozen=True)
class CorrelationConfig:
    """Tracking and correlation settings.

    ``weights`` multiply the 2D, u and v Mahalanobis distances in the
    filter-to-image cost.
    """

    p_m: float = 1e-3
    descriptor_threshold: float = 100.0**2
    weights: tuple = (20.0, 5.0, 5.0)
    n_retire: int = 3
    retire_distance: float = 500.0
    lowe_ratio: float = 0.8
    ransac_iterations: int = 500
    ransac_threshold_px: float = 2.0
    ransac_confidence: float = 0.999
    min_inlier_fraction: float = 0.3
    pixel_sigma: float = 2.0

    def __post_init__(self):
        if min(self.weights) <= 0:
            raise ValueError("weights must be positive")
        if self.n_retire < 1:
            raise ValueError("n_retire must be at least 1")

    @property
    def threshold_1d(self):
        return frames.mahalanobis_threshold(self.p_m, 1)

    @property
    def threshold_2d(self):
        return frames.mahalanobis_threshold(self.p_m, 2)


@dataclass(frozen=True)
class MatchPair:
    index_a: int
    index_b: int
    descriptor_distance2: float
    epipolar_distance: float = float("nan")
    mahalanobis: float = float("nan")


# -- descriptor matching ----------------------------------------------------------------


def squared_distances(A, B):
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    d2 = np.sum(A * A, axis=1)[:, None] + np.sum(B * B, axis=1)[None, :] - 2.0 * A @ B.T
    return np.maximum(d2, 0.0)


def match_descriptors(desc_a, desc_b, lowe_ratio=0.8):
    """Mutual nearest neighbours that pass the distance-ratio test in both directions.

    With a single candidate on the other side there is no second neighbour
    and the ratio test passes.
    """
    desc_a = np.atleast_2d(desc_a)
    desc_b = np.atleast_2d(desc_b)
    if len(desc_a) == 0 or len(desc_b) == 0 or desc_a.size == 0 or desc_b.size == 0:
        return []
    if desc_a.shape[1] != desc_b.shape[1]:
        raise ValueError("descriptor dimensions differ")
    d2 = squared_distances(desc_a, desc_b)
    best_b = np.argmin(d2, axis=1)
    best_a = np.argmin(d2, axis=0)

    def ratio_ok(row):
        if row.size < 2:
            return np.ones(1, dtype=bool)[0]
        two = np.partition(row, 1)[:2]
        return np.sqrt(two[0]) < lowe_ratio * np.sqrt(two[1])

    out = []
    for i, j in enumerate(best_b):
        if best_a[j] != i:
            continue
        if ratio_ok(d2[i]) and ratio_ok(d2[:, j]):
            out.append(MatchPair(i, int(j), float(d2[i, j])))
    return out


# -- outlier rejection ----------------------------------------------------------------


def consensus_reject(pairs, pix_a, pix_b, K_a, K_b, config=CorrelationConfig(), seed=0):
    """Sample-consensus essential-matrix fit on normalized coordinates.

    Returns ``(inliers, flagged)``; ``flagged`` is True when fewer than five
    pairs were given and the input is passed through unchanged.

    Raises
    ------
    ConsensusFailure
        If no model reaches ``min_inlier_fraction``.
    """
    if len(pairs) < 5:
        return list(pairs), True
    ia = np.array([p.index_a for p in pairs])
    ib = np.array([p.index_b for p in pairs])
    xa = _normalize(pix_a[ia], K_a)
    xb = _normalize(pix_b[ib], K_b)
    focal = 0.5 * (K_a[0, 0] + K_b[0, 0])
    cv2.setRNGSeed(int(seed))
    E, mask = cv2.findEssentialMat(
        xa, xb, np.eye(3), method=cv2.RANSAC, prob=config.ransac_confidence,
        threshold=config.ransac_threshold_px / focal, maxIters=config.ransac_iterations,
    )
    if E is None or mask is None:
        raise ConsensusFailure("no essential matrix found")
    mask = mask.ravel().astype(bool)
    if mask.mean() < config.min_inlier_fraction:
        raise ConsensusFailure(f"inlier fraction {mask.mean():.2f} below {config.min_inlier_fraction}")
    return [p for p, keep in zip(pairs, mask) if keep], False


def _normalize(pix, K):
    h = np.column_stack([pix, np.ones(len(pix))])
    return np.linalg.solve(K, h.T).T[:, :2].astype(np.float64)


def epipolar_distance(gamma, l1, l2, K1, K2, A1, A2):
    """Signed distance of ``l2`` from the epipolar line of ``l1`` (px).

    Parameters
    ----------
    gamma : array_like, shape (6,) or (6, n)
        Stacked inertial positions of the two cameras (may be complex).
    l1, l2 : array_like, shape (2,) or (2, n)
    A1, A2 : ndarray, shape (3, 3)
        Inertial -> CF attitudes.
    """
    r1 = gamma[0:3]
    r2 = gamma[3:6]
    R = A2 @ A1.T
    t = np.einsum("ij,j...->i...", A2, r1 - r2)
    K1i = np.linalg.inv(K1)
    K2i = np.linalg.inv(K2)
    l1h = np.stack([l1[0], l1[1], np.ones_like(l1[0])])
    l2h = np.stack([l2[0], l2[1], np.ones_like(l2[0])])
    x1 = np.einsum("ij,j...->i...", R @ K1i, l1h)
    # zeta = K2^-T [t]x R K1^-1 l1
    e = np.stack([t[1] * x1[2] - t[2] * x1[1], t[2] * x1[0] - t[0] * x1[2], t[0] * x1[1] - t[1] * x1[0]])
    zeta = np.einsum("ji,j...->i...", K2i, e)
    num = np.sum(zeta * l2h, axis=0)
    return num / np.sqrt(zeta[0] ** 2 + zeta[1] ** 2)


def epipolar_partials(gamma, l1, l2, K1, K2, A1, A2, h=1e-20):
    """Complex-step partials of :func:`epipolar_distance`.

    Returns ``(d, dd_dgamma (n, 6), dd_dl1 (n, 2), dd_dl2 (n, 2))`` for n pairs.
    """
    l1 = np.atleast_2d(l1).T if np.ndim(l1) == 2 else np.asarray(l1)[:, None]
    l2 = np.atleast_2d(l2).T if np.ndim(l2) == 2 else np.asarray(l2)[:, None]
    n = l1.shape[1]
    G = np.repeat(np.asarray(gamma, dtype=float)[:, None], n, axis=1)
    d = epipolar_distance(G, l1, l2, K1, K2, A1, A2).real
    scale_g = 1.0 + np.abs(gamma)
    dg = np.empty((n, 6))
    for k in range(6):
        Gc = G.astype(complex)
        Gc[k] += 1j * h * scale_g[k]
        dg[:, k] = epipolar_distance(Gc, l1, l2, K1, K2, A1, A2).imag / (h * scale_g[k])
    d1 = np.empty((n, 2))
    d2 = np.empty((n, 2))
    for k in range(2):
        lc = l1.astype(complex)
        lc[k] += 1j * h
        d1[:, k] = epipolar_distance(G, lc, l2, K1, K2, A1, A2).imag / h
        lc = l2.astype(complex)
        lc[k] += 1j * h
        d2[:, k] = epipolar_distance(G, l1, lc, K1, K2, A1, A2).imag / h
    return d, dg, d1, d2


def epipolar_reject(pairs, pix_a, pix_b, K_a, K_b, A_a, A_b, gamma, P_gamma, config=CorrelationConfig(), R_a=None, R_b=None):
    """Drop pairs whose epipolar distance is inconsistent with its propagated variance.

    The variance combines the joint position covariance ``P_gamma`` (6x6) and
    the pixel covariances ``R_a``, ``R_b`` (default ``pixel_sigma^2 I``).
    Pairs with a non-positive variance are rejected.
    """
    if not pairs:
        return []
    R_a = np.eye(2) * config.pixel_sigma**2 if R_a is None else R_a
    R_b = np.eye(2) * config.pixel_sigma**2 if R_b is None else R_b
    ia = np.array([p.index_a for p in pairs])
    ib = np.array([p.index_b for p in pairs])
    d, dg, d1, d2 = epipolar_partials(gamma, pix_a[ia], pix_b[ib], K_a, K_b, A_a, A_b)
    var = np.einsum("ni,ij,nj->n", dg, P_gamma, dg)
    var += np.einsum("ni,ij,nj->n", d1, R_a, d1) + np.einsum("ni,ij,nj->n", d2, R_b, d2)
    out = []
    thr = config.threshold_1d
    for p, dk, vk in zip(pairs, d, var):
        if not vk > 0:
            continue
        m = abs(dk) / np.sqrt(vk)
        if m <= thr:
            out.append(MatchPair(p.index_a, p.index_b, p.descriptor_distance2, float(dk), float(m)))
    return out


# -- correlation sharing ----------------------------------------------------------------


@dataclass
class Track:
    """Keypoints correlated across spacecraft at one epoch: ``{spacecraft: keypoint index}``."""

    members: dict
    distance: float

    def __len__(self):
        return len(self.members)


def share_correlations(matches, middle, outer):
    """Merge pairwise matches into multi-view tracks.

    Parameters
    ----------
    matches : dict
        ``{(a, b): [MatchPair, ...]}`` for spacecraft pairs ``a < b``.
    middle : int
        Spacecraft sharing a short baseline with both outer spacecraft.
    outer : tuple of int
        The two outer spacecraft.

    Notes
    -----
    A middle keypoint matched to both outer images forms a three-view track
    whether or not the outer keypoints matched directly. Three-view tracks are
    accepted first, then two-view tracks; within each group ascending total
    descriptor distance wins when keypoints conflict.
    """
    def lookup(a, b):
        key = (min(a, b), max(a, b))
        out = {}
        for p in matches.get(key, []):
            ka, kb = (p.index_a, p.index_b) if a == key[0] else (p.index_b, p.index_a)
            out[ka] = (kb, p.descriptor_distance2)
        return out

    o1, o2 = outer
    m_to_1 = lookup(middle, o1)
    m_to_2 = lookup(middle, o2)
    triplets = []
    for km in sorted(set(m_to_1) & set(m_to_2)):
        k1, d1 = m_to_1[km]
        k2, d2 = m_to_2[km]
        triplets.append(Track({middle: km, o1: k1, o2: k2}, d1 + d2))
    pairs = []
    for (a, b), lst in sorted(matches.items()):
        for p in lst:
            pairs.append(Track({a: p.index_a, b: p.index_b}, p.descriptor_distance2))

    used = set()
    accepted = []
    for group in (triplets, pairs):
        for tr in sorted(group, key=lambda t: (t.distance, sorted(t.members.items()))):
            keys = {(sc, k) for sc, k in tr.members.items()}
            if keys & used:
                continue
            used |= keys
            accepted.append(tr)
    return accepted


# -- filter-to-image correlation ------------------------------------------------------------


def predict_landmark_pixels(L, calibration, attitude, position, psi, w0, t, P_state):
    """Expected pixels of body-fixed landmarks and their covariance from state uncertainty.

    Parameters
    ----------
    L : ndarray, shape (n, 3)
    P_state : ndarray, shape (6, 6)
        Covariance of [spacecraft position, (alpha, delta, omega)].

    Returns
    -------
    uv : (n, 2), w : (n,), P_l : (n, 2, 2)
    """
    L = np.atleast_2d(L)
    M = frames.aci_to_acaf(psi[0], psi[1], psi[2], w0, t)
    dM = frames.aci_to_acaf_partials(psi[0], psi[1], psi[2], w0, t)
    p_aci = L @ M
    p_cf = (p_aci - position) @ attitude.T
    q = p_cf @ calibration.T
    w = q[:, 2]
    uv = q[:, :2] / w[:, None]
    J = frames.pixel_jacobian_cf(calibration, p_cf) @ attitude  # (n, 2, 3)
    A = np.empty((len(L), 2, 6))
    A[:, :, :3] = -J
    for k in range(3):
        A[:, :, 3 + k] = np.einsum("nij,nj->ni", J, L @ dM[k])
    P_l = np.einsum("nij,jk,nlk->nil", A, P_state, A)
    return uv, w, P_l


@dataclass
class Assignment:
    landmark: int
    keypoint: int
    cost: float
    m2d: float
    mu: float
    mv: float
    descriptor_distance2: float


def correlate_filter_to_image(landmark_ids, uv_pred, P_l, landmark_desc, keypoint_uv, keypoint_desc, config=CorrelationConfig(), R=None, valid=None):
    """Assign image keypoints to tracked landmarks by the weighted Mahalanobis/descriptor cost.

    Every accepted pair satisfies the 2D gate, both 1D gates and the
    descriptor threshold. Assignments are made greedily in ascending cost so
    each landmark and each keypoint is used at most once.

    Parameters
    ----------
    landmark_ids : sequence of int
    uv_pred : (n, 2), P_l : (n, 2, 2)
    landmark_desc : (n, 128)
        Reference descriptor per landmark.
    keypoint_uv : (k, 2), keypoint_desc : (k, 128)
    valid : (n,) bool, optional
        Landmarks eligible in this image (e.g. in front of the camera).
    """
    n = len(landmark_ids)
    if n == 0 or len(keypoint_uv) == 0:
        return []
    R = np.eye(2) * config.pixel_sigma**2 if R is None else R
    S = P_l + R[None, :, :]
    det = S[:, 0, 0] * S[:, 1, 1] - S[:, 0, 1] * S[:, 1, 0]
    good = det > 0
    if valid is not None:
        good &= np.asarray(valid, dtype=bool)
    Sinv = np.zeros_like(S)
    Sinv[good, 0, 0] = S[good, 1, 1] / det[good]
    Sinv[good, 1, 1] = S[good, 0, 0] / det[good]
    Sinv[good, 0, 1] = -S[good, 0, 1] / det[good]
    Sinv[good, 1, 0] = -S[good, 1, 0] / det[good]
    diff = keypoint_uv[None, :, :] - uv_pred[:, None, :]  # (n, k, 2)
    m2 = np.einsum("nki,nij,nkj->nk", diff, Sinv, diff)
    m2d = np.sqrt(np.maximum(m2, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        mu = np.abs(diff[:, :, 0]) / np.sqrt(S[:, 0, 0])[:, None]
        mv = np.abs(diff[:, :, 1]) / np.sqrt(S[:, 1, 1])[:, None]
    gate = (m2d <= config.threshold_2d) & (mu <= config.threshold_1d) & (mv <= config.threshold_1d)
    gate &= good[:, None]
    cand_i, cand_k = np.nonzero(gate)
    if cand_i.size == 0:
        return []
    dd = np.sum((landmark_desc[cand_i] - keypoint_desc[cand_k]) ** 2, axis=1)
    ok = dd <= config.descriptor_threshold
    cand_i, cand_k, dd = cand_i[ok], cand_k[ok], dd[ok]
    w2, wu, wv = config.weights
    cost = w2 * m2d[cand_i, cand_k] + wu * mu[cand_i, cand_k] + wv * mv[cand_i, cand_k] + dd
    order = np.lexsort((cand_k, cand_i, cost))
    used_l, used_k = set(), set()
    out = []
    for o in order:
        i, k = int(cand_i[o]), int(cand_k[o])
        if i in used_l or k in used_k:
            continue
        used_l.add(i)
        used_k.add(k)
        out.append(Assignment(int(landmark_ids[i]), k, float(cost[o]), float(m2d[i, k]), float(mu[i, k]), float(mv[i, k]), float(dd[o])))
    return out


# -- landmark database --------------------------------------------------------------------


@dataclass
class LandmarkRecord:
    id: int
    position: np.ndarray
    covariance: np.ndarray
    descriptors: dict = field(default_factory=dict)
    consecutive_misses: int = 0
    total_correlations: int = 0
    status: str = "tracked"
    created: float = 0.0
    # evaluation only: mean truth anchor of the keypoints last matched to it
    truth_anchor: np.ndarray = None

    def reference_descriptor(self, spacecraft):
        """Descriptor from ``spacecraft`` if stored, else from the lowest spacecraft index."""
        if spacecraft in self.descriptors:
            return self.descriptors[spacecraft]
        return self.descriptors[min(self.descriptors)]

    @property
    def max_eigenvalue(self):
        return float(np.linalg.eigvalsh(self.covariance)[-1])


class LandmarkDatabase:
    """All landmarks ever kept: tracked ones mirror the filter, retired ones are frozen."""

    def __init__(self):
        self.records = {}
        self._next = 0

    def new(self, position, covariance, descriptors, epoch, truth_anchor=None):
        rec = LandmarkRecord(self._next, np.array(position, float), np.array(covariance, float), dict(descriptors), created=epoch, truth_anchor=truth_anchor)
        self.records[rec.id] = rec
        self._next += 1
        return rec

    def __getitem__(self, key):
        return self.records[key]

    def __contains__(self, key):
        return key in self.records

    def __len__(self):
        return len(self.records)

    def tracked(self):
        return [r for r in self.records.values() if r.status == "tracked"]

    def retired(self):
        return [r for r in self.records.values() if r.status == "retired"]

    def delete(self, key):
        del self.records[key]

    def positions(self, status=None):
        recs = [r for r in self.records.values() if status is None or r.status == status]
        if not recs:
            return np.zeros((0, 3)), np.zeros((0, 3, 3))
        return np.array([r.position for r in recs]), np.array([r.covariance for r in recs])

    def write_csv(self, path):
        iu = np.triu_indices(3)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "status", "x", "y", "z", "c00", "c01", "c02", "c11", "c12", "c22", "total_correlations"])
            for rec in sorted(self.records.values(), key=lambda r: r.id):
                w.writerow([rec.id, rec.status, *(repr(float(x)) for x in rec.position), *(repr(float(x)) for x in rec.covariance[iu]), rec.total_correlations])

    @classmethod
    def read_csv(cls, path):
        db = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                c = np.zeros((3, 3))
                vals = [float(row[k]) for k in ("c00", "c01", "c02", "c11", "c12", "c22")]
                c[np.triu_indices(3)] = vals
                c = c + np.triu(c, 1).T
                rec = LandmarkRecord(int(row["id"]), np.array([float(row[k]) for k in "xyz"]), c, status=row["status"], total_correlations=int(row["total_correlations"]))
                db.records[rec.id] = rec
                db._next = max(db._next, rec.id + 1)
        return db


def overlap_length(lambda_a, lambda_b, distance):
    """``sqrt(lambda_a) + sqrt(lambda_b) - distance``; symmetric in its landmark arguments."""
    return np.sqrt(lambda_a) + np.sqrt(lambda_b) - distance


def retire_and_dedupe(db, config=CorrelationConfig()):
    """Retire tracked landmarks that missed ``n_retire`` consecutive images and thin duplicates.

    Landmarks never correlated since initialization are deleted outright.
    A newly retired landmark is compared with each retired landmark within
    ``retire_distance``; when the overlap length is negative the one with the
    smaller largest covariance eigenvalue is kept.

    Returns
    -------
    retired : list of int
        Ids that left the tracked set (retired or deleted); the filter must
        drop them.
    deleted : list of int
        Ids removed from the database.
    """
    retired, deleted = [], []
    for rec in sorted(db.tracked(), key=lambda r: r.id):
        if rec.consecutive_misses < config.n_retire:
            continue
        retired.append(rec.id)
        if rec.total_correlations == 0:
            db.delete(rec.id)
            deleted.append(rec.id)
            continue
        rec.status = "retired"
        lam_new = rec.max_eigenvalue
        for other in sorted(db.retired(), key=lambda r: r.id):
            if other.id == rec.id:
                continue
            dist = float(np.linalg.norm(other.position - rec.position))
            if dist > config.retire_distance:
                continue
            lam_o = other.max_eigenvalue
            if overlap_length(lam_new, lam_o, dist) < 0:
                if lam_new <= lam_o:
                    db.delete(other.id)
                    deleted.append(other.id)
                else:
                    db.delete(rec.id)
                    deleted.append(rec.id)
                    break
    return retired, deleted
