"""Clock model, Keplerian elements and the J2 mean/osculating map."""
import numpy as np
import pytest
from scipy.integrate import quad, solve_ivp, trapezoid

from snac.dynamics import clock, orbits
from snac.errors import DegenerateFit

MU, RREF = 4.4628e5, 16000.0


# -- clock ---------------------------------------------------------------------


def test_clock_noise_is_integrated_diffusion():
    q1, q2, dt = 6.2e-21, 1.2e-27, 300.0

    # offset driven by white frequency (q1) plus integrated random-walk drift (q2)
    def entry(i, j):
        def integrand(s):
            phi = np.array([[1.0, dt - s], [0.0, 1.0]])
            return (phi @ np.diag([q1, q2]) @ phi.T)[i, j]

        return quad(integrand, 0.0, dt, epsabs=0.0, epsrel=1e-12)[0]

    Q = clock.clock_process_noise(q1, q2, dt)
    for i in range(2):
        for j in range(2):
            assert np.isclose(Q[i, j], entry(i, j), rtol=1e-10)


def test_bias_noise_is_difference_of_independent_clocks():
    q1, q2 = [1e-20, 2e-20, 3e-20], [1e-27, 5e-27, 2e-27]
    dt, c = 60.0, 299792458.0
    blocks = [clock.clock_process_noise(a, b, dt) for a, b in zip(q1, q2)]
    full = np.zeros((6, 6))
    for k, blk in enumerate(blocks):
        full[2 * k : 2 * k + 2, 2 * k : 2 * k + 2] = blk
    D = np.zeros((4, 6))
    for d in range(2):
        D[2 * d : 2 * d + 2, 0:2] = -np.eye(2)
        D[2 * d : 2 * d + 2, 2 * d + 2 : 2 * d + 4] = np.eye(2)
    expect = c * c * D @ full @ D.T
    assert np.allclose(clock.bias_process_noise(q1, q2, dt, c), expect, rtol=1e-12)


def test_clock_transition_statistics():
    rng = np.random.default_rng(0)
    st = clock.ClockState(q1=1e-20, q2=1e-26)
    dt = 100.0
    samples = np.array([[s.offset, s.drift] for s in (clock.clock_transition(st, dt, rng) for _ in range(20000))])
    C = np.cov(samples.T)
    Q = clock.clock_process_noise(st.q1, st.q2, dt)
    assert np.allclose(np.diag(C), np.diag(Q), rtol=0.05)
    with pytest.raises(ValueError):
        clock.clock_transition(st, -1.0, rng)


def test_allan_fit_recovers_model_coefficients():
    taus = np.logspace(0, 5, 12)
    q1, q2 = 6.2e-21, 1.2e-27
    assert np.allclose(clock.allan_variance_fit(taus, clock.allan_variance_model(taus, q1, q2)), (q1, q2), rtol=1e-9)
    with pytest.raises(DegenerateFit):
        clock.allan_variance_fit([10.0, 10.0], [1.0, 1.0])


def test_overlapping_allan_variance_of_white_frequency():
    rng = np.random.default_rng(4)
    q1, tau0 = 1e-20, 1.0
    freq = rng.normal(0.0, np.sqrt(q1 / tau0), 200000)
    phase = np.concatenate([[0.0], np.cumsum(freq) * tau0])
    taus, avar = clock.overlapping_allan_variance(phase, tau0, [1, 4, 16])
    assert np.allclose(avar * taus, q1, rtol=0.1)


# -- elements --------------------------------------------------------------------


def test_kepler_equation_residual():
    M = np.linspace(0, 2 * np.pi, 50)
    for e in (0.0, 0.1, 0.7, 0.95):
        E = orbits.solve_kepler(M, e)
        assert np.max(np.abs(E - e * np.sin(E) - M)) < 1e-12


def test_elements_cartesian_round_trip():
    oe = orbits.OrbitalElements(45000.0, 0.05, 1.2, 0.4, 2.1, 5.0)
    pos, vel = orbits.elements_to_cartesian(oe.as_array(), MU)
    # vis-viva and angular momentum as independent checks
    r = np.linalg.norm(pos)
    assert np.isclose(np.dot(vel, vel), MU * (2 / r - 1 / oe.a))
    h = np.cross(pos, vel)
    assert np.isclose(np.linalg.norm(h), np.sqrt(MU * oe.a * (1 - oe.e**2)))
    assert np.isclose(np.arccos(h[2] / np.linalg.norm(h)), oe.i)
    back = orbits.cartesian_to_elements(pos, vel, MU)
    assert np.allclose(back, oe.as_array(), atol=1e-10)


def test_roe_round_trip_and_zero_separation():
    chief = orbits.OrbitalElements(45000.0, 0.001, 1.0, 0.3, 0.5, 1.0)
    roe = orbits.RelativeOrbitalElements(1e-4, 2e-3, 1e-4, -2e-4, 3e-4, -1e-4)
    deputy = orbits.roe_to_oe(chief, roe)
    assert np.allclose(orbits.oe_to_roe(chief, deputy).as_array(), roe.as_array(), atol=1e-12)
    assert np.allclose(orbits.oe_to_roe(chief, chief).as_array(), 0.0)


def test_element_validation():
    with pytest.raises(ValueError):
        orbits.OrbitalElements(-1.0, 0.1, 0, 0, 0, 0)
    with pytest.raises(ValueError):
        orbits.OrbitalElements(1.0, 1.0, 0, 0, 0, 0)


def test_mean_osculating_inverse():
    mean = orbits.OrbitalElements(45000.0, 0.002, 1.1, 0.2, 0.7, 2.5)
    osc = orbits.mean_to_osculating(mean, 0.05, MU, RREF)
    assert abs(osc.a - mean.a) > 1.0
    back = orbits.osculating_to_mean(osc, 0.05, MU, RREF)
    assert np.allclose(back.as_array()[:3], mean.as_array()[:3], atol=1e-8)
    assert orbits.mean_to_osculating(mean, 0.0, MU, RREF) is mean


def test_mean_semimajor_axis_is_orbit_average():
    # the mean element equals the time average of the osculating one over an orbit
    J2 = 2e-3
    mean = orbits.OrbitalElements(45000.0, 0.001, 0.9, 0.0, 0.0, 0.0)
    osc = orbits.mean_to_osculating(mean, J2, MU, RREF)
    pos, vel = orbits.elements_to_cartesian(osc.as_array(), MU)

    def rhs(t, y):
        r = y[:3]
        return np.concatenate([y[3:], -MU * r / np.linalg.norm(r) ** 3 + orbits.j2_accel(r, MU, J2, RREF)])

    period = 2 * np.pi * np.sqrt(mean.a**3 / MU)
    t = np.linspace(0.0, period, 2001)
    sol = solve_ivp(rhs, (0.0, period), np.concatenate([pos, vel]), t_eval=t, rtol=1e-12, atol=1e-9)
    a = orbits.cartesian_to_elements(sol.y[:3].T, sol.y[3:].T, MU)[:, 0]
    avg = trapezoid(a, t) / period
    amp = np.ptp(a)
    assert amp > 1.0
    assert abs(avg - mean.a) < 0.02 * amp
