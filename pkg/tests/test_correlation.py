"""Descriptor matching, outlier rejection, track sharing, landmark correlation and retirement."""
import numpy as np
import pytest
from scipy.spatial.distance import cdist

from snac import correlation as corr
from snac import frames
from snac.errors import ConsensusFailure

K = frames.intrinsic_matrix(2500.0, 1024.0, 768.0)


def brute_matches(A, B, ratio):
    d = cdist(A, B)
    out = set()
    for i in range(len(A)):
        j = int(np.argmin(d[i]))
        if int(np.argmin(d[:, j])) != i:
            continue
        ri, cj = np.sort(d[i]), np.sort(d[:, j])
        if (len(ri) < 2 or ri[0] < ratio * ri[1]) and (len(cj) < 2 or cj[0] < ratio * cj[1]):
            out.add((i, j))
    return out


def two_view_scene(n=60, seed=0):
    """Points near the origin seen by two cameras ~45 km out, 8 km apart."""
    rng = np.random.default_rng(seed)
    X = rng.normal(0.0, 3000.0, (n, 3))
    r1 = np.array([0.0, 0.0, 45000.0])
    r2 = np.array([8000.0, 0.0, 44000.0])
    A1 = frames.nadir_camera_attitude(r1, np.array([1.0, 0.0, 0.0]))
    A2 = frames.nadir_camera_attitude(r2, np.array([1.0, 0.0, 0.0]))
    c1 = frames.CameraModel(K, 2048, 1536, r1, A1)
    c2 = frames.CameraModel(K, 2048, 1536, r2, A2)
    p1, _ = frames.project_points(c1, X)
    p2, _ = frames.project_points(c2, X)
    return p1, p2, r1, r2, A1, A2


def test_squared_distances_match_cdist():
    rng = np.random.default_rng(0)
    A, B = rng.normal(size=(7, 16)), rng.normal(size=(5, 16))
    assert np.allclose(corr.squared_distances(A, B), cdist(A, B, "sqeuclidean"))


def test_mutual_ratio_matching_matches_brute_force():
    rng = np.random.default_rng(1)
    base = rng.normal(0.0, 12.0, (40, 128))
    A = base[:30] + rng.normal(0.0, 4.0, (30, 128))
    B = base[10:] + rng.normal(0.0, 4.0, (30, 128))
    got = {(p.index_a, p.index_b) for p in corr.match_descriptors(A, B)}
    assert got == brute_matches(A, B, 0.8)
    assert len(got) >= 15
    assert corr.match_descriptors(np.zeros((0, 128)), B) == []
    single = corr.match_descriptors(A[:1], B[:1])
    assert len(single) == 1


def test_consensus_rejects_outliers():
    p1, p2, *_ = two_view_scene(80)
    rng = np.random.default_rng(2)
    bad = rng.choice(80, 16, replace=False)
    p2 = p2.copy()
    p2[bad] += rng.uniform(60.0, 200.0, (16, 2)) * rng.choice([-1, 1], (16, 2))
    pairs = [corr.MatchPair(i, i, 0.0) for i in range(80)]
    kept, flagged = corr.consensus_reject(pairs, p1, p2, K, K)
    kept_idx = {p.index_a for p in kept}
    assert not flagged
    assert not kept_idx & set(bad.tolist())
    assert len(kept_idx) >= 60
    few, flagged = corr.consensus_reject(pairs[:4], p1, p2, K, K)
    assert flagged and few == pairs[:4]


def test_consensus_failure_on_noise():
    rng = np.random.default_rng(3)
    p1 = rng.uniform(0, 2000, (40, 2))
    p2 = rng.uniform(0, 2000, (40, 2))
    cfg = corr.CorrelationConfig(min_inlier_fraction=0.9)
    with pytest.raises(ConsensusFailure):
        corr.consensus_reject([corr.MatchPair(i, i, 0.0) for i in range(40)], p1, p2, K, K, cfg)


def test_epipolar_distance_against_fundamental_matrix():
    p1, p2, r1, r2, A1, A2 = two_view_scene(10)
    gamma = np.concatenate([r1, r2])
    assert np.allclose(corr.epipolar_distance(gamma, p1.T, p2.T, K, K, A1, A2), 0.0, atol=1e-6)
    # explicit F = K^-T [t]x R K^-1 and point-to-line distance
    R = A2 @ A1.T
    t = A2 @ (r1 - r2)
    F = np.linalg.inv(K).T @ frames.skew(t) @ R @ np.linalg.inv(K)
    q2 = p2 + np.array([3.0, -2.0])
    for a, b in zip(p1, q2):
        line = F @ np.r_[a, 1.0]
        expect = line @ np.r_[b, 1.0] / np.hypot(line[0], line[1])
        assert np.isclose(corr.epipolar_distance(gamma, a, b, K, K, A1, A2), expect, rtol=1e-9)


def test_epipolar_partials_match_real_differences():
    p1, p2, r1, r2, A1, A2 = two_view_scene(3)
    gamma = np.concatenate([r1, r2])
    l1, l2 = p1[0] + 1.0, p2[0] - 2.0
    d, dg, d1, d2 = corr.epipolar_partials(gamma, l1, l2, K, K, A1, A2)
    f = lambda g, a, b: corr.epipolar_distance(g, a, b, K, K, A1, A2)
    for k in range(6):
        e = np.zeros(6)
        e[k] = 0.5
        assert np.isclose(dg[0, k], (f(gamma + e, l1, l2) - f(gamma - e, l1, l2)) / 1.0, rtol=1e-5, atol=1e-9)
    for k in range(2):
        e = np.zeros(2)
        e[k] = 1e-3
        assert np.isclose(d1[0, k], (f(gamma, l1 + e, l2) - f(gamma, l1 - e, l2)) / 2e-3, rtol=1e-6)
        assert np.isclose(d2[0, k], (f(gamma, l1, l2 + e) - f(gamma, l1, l2 - e)) / 2e-3, rtol=1e-6)


def test_epipolar_gate_keeps_consistent_pairs():
    p1, p2, r1, r2, A1, A2 = two_view_scene(20)
    p2 = p2.copy()
    p2[:5] += np.array([0.0, 150.0])
    gamma = np.concatenate([r1, r2])
    kept = corr.epipolar_reject([corr.MatchPair(i, i, 0.0) for i in range(20)], p1, p2, K, K, A1, A2, gamma, np.eye(6))
    idx = {p.index_a for p in kept}
    assert idx == set(range(5, 20))
    assert all(p.mahalanobis <= corr.CorrelationConfig().threshold_1d for p in kept)


def test_share_correlations_builds_triplets_first():
    M = corr.MatchPair
    matches = {
        (0, 1): [M(0, 5, 10.0), M(1, 6, 3.0)],
        (0, 2): [M(0, 7, 20.0), M(2, 8, 1.0)],
        (1, 2): [M(6, 9, 2.0)],
    }
    tracks = corr.share_correlations(matches, middle=0, outer=(1, 2))
    assert tracks[0].members == {0: 0, 1: 5, 2: 7} and tracks[0].distance == 30.0
    rest = [t.members for t in tracks[1:]]
    # two-view tracks in ascending distance: (0,2:8) then (1:6,2:9) then (0:1,1:6) conflicts with 1:6
    assert rest == [{0: 2, 2: 8}, {1: 6, 2: 9}]


def test_predicted_pixel_covariance_matches_finite_difference_jacobian():
    psi = np.array([0.2, 0.3, 3.3e-4])
    w0, t = 0.4, 800.0
    L = np.array([[1000.0, 2000.0, 7000.0], [-3000.0, 500.0, 6500.0]])
    M = frames.aci_to_acaf(*psi, w0, t)
    pos = 45000.0 * (M.T @ L[0]) / np.linalg.norm(L[0])
    att = frames.nadir_camera_attitude(pos, np.array([0.0, 1.0, 0.0]))
    P = np.diag([25.0, 25.0, 25.0, 1e-8, 1e-8, 1e-16])
    uv, w, P_l = corr.predict_landmark_pixels(L, K, att, pos, psi, w0, t, P)
    cam = frames.CameraModel(K, 2048, 1536, M @ pos, att @ M.T)
    assert np.allclose(uv, frames.project_points(cam, L)[0])

    def pix(x):
        Mx = frames.aci_to_acaf(*x[3:], w0, t)
        q = (L @ Mx - x[:3]) @ att.T @ K.T
        return q[:, :2] / q[:, 2:3]

    x0 = np.r_[pos, psi]
    steps = [1e-2, 1e-2, 1e-2, 1e-7, 1e-7, 1e-11]
    J = np.zeros((len(L), 2, 6))
    for k in range(6):
        e = np.zeros(6)
        e[k] = steps[k]
        J[:, :, k] = (pix(x0 + e) - pix(x0 - e)) / (2 * steps[k])
    assert np.allclose(P_l, np.einsum("nij,jk,nlk->nil", J, P, J), rtol=1e-4)


def test_filter_to_image_greedy_assignment():
    cfg = corr.CorrelationConfig()
    uv_pred = np.array([[100.0, 100.0], [200.0, 200.0]])
    P_l = np.array([np.eye(2) * 4.0] * 2)
    desc_l = np.zeros((2, 4))
    kp_uv = np.array([[101.0, 100.0], [100.0, 103.0], [200.0, 199.0], [500.0, 500.0]])
    kp_desc = np.zeros((4, 4))
    kp_desc[1] = 1.0
    out = corr.correlate_filter_to_image([10, 20], uv_pred, P_l, desc_l, kp_uv, kp_desc, cfg)
    assert [(a.landmark, a.keypoint) for a in out] == [(10, 0), (20, 2)]
    a = out[0]
    S = 4.0 + cfg.pixel_sigma**2
    assert np.isclose(a.m2d, 1.0 / np.sqrt(S)) and np.isclose(a.mu, 1.0 / np.sqrt(S)) and a.mv == 0.0
    assert np.isclose(a.cost, 20.0 * a.m2d + 5.0 * a.mu + 5.0 * a.mv)
    # descriptor gate
    far = corr.correlate_filter_to_image([10], uv_pred[:1], P_l[:1], desc_l[:1] + 51.0, kp_uv[:1], kp_desc[:1], cfg)
    assert far == []
    # invalid landmarks are skipped
    assert corr.correlate_filter_to_image([10, 20], uv_pred, P_l, desc_l, kp_uv, kp_desc, cfg, valid=[False, False]) == []


def test_landmark_database_round_trip(tmp_path):
    db = corr.LandmarkDatabase()
    rng = np.random.default_rng(0)
    for _ in range(3):
        A = rng.normal(size=(3, 3))
        db.new(rng.normal(size=3) * 1000, A @ A.T, {0: np.zeros(4)}, 0.0)
    db[1].status = "retired"
    path = tmp_path / "lm.csv"
    db.write_csv(path)
    back = corr.LandmarkDatabase.read_csv(path)
    for k in range(3):
        assert np.array_equal(back[k].position, db[k].position)
        assert np.array_equal(back[k].covariance, db[k].covariance)
        assert back[k].status == db[k].status
    assert back.new(np.zeros(3), np.eye(3), {}, 0.0).id == 3


def test_retirement_and_duplicate_thinning():
    cfg = corr.CorrelationConfig(n_retire=3)
    db = corr.LandmarkDatabase()
    old = db.new([0.0, 0.0, 8000.0], np.eye(3) * 100.0, {0: 0}, 0.0)
    old.status, old.total_correlations = "retired", 5
    near_better = db.new([30.0, 0.0, 8000.0], np.eye(3) * 25.0, {0: 0}, 0.0)
    never_seen = db.new([0.0, 5000.0, 6000.0], np.eye(3), {0: 0}, 0.0)
    active = db.new([0.0, -5000.0, 6000.0], np.eye(3), {0: 0}, 0.0)
    near_better.consecutive_misses, near_better.total_correlations = 3, 4
    never_seen.consecutive_misses = 3
    active.consecutive_misses, active.total_correlations = 2, 1
    retired, deleted = corr.retire_and_dedupe(db, cfg)
    assert retired == [near_better.id, never_seen.id]
    # overlap 10 + 5 - 30 < 0: keep the one with the smaller largest eigenvalue
    assert sorted(deleted) == [old.id, never_seen.id]
    assert near_better.id in db and db[near_better.id].status == "retired"
    assert db[active.id].status == "tracked"
    assert corr.overlap_length(4.0, 9.0, 1.0) == corr.overlap_length(9.0, 4.0, 1.0) == 4.0


def test_config_validation():
    with pytest.raises(ValueError):
        corr.CorrelationConfig(weights=(1.0, 0.0, 1.0))
    with pytest.raises(ValueError):
        corr.CorrelationConfig(n_retire=0)
