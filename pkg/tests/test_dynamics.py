import math

import numpy as np
import pytest
from scipy.integrate import quad

from kuralock import dynamics
from kuralock.dynamics import (
    IntegratorConfig,
    detect_collisions,
    drift_tolerance,
    integrate,
    jacobian,
    rhs,
)
from kuralock.errors import DimensionMismatchError, ParameterError, StepSizeUnderflow
from kuralock.phase import ModelParams, PhaseState, divergence, potential

# 2 pi / sqrt(1 - 0.5^2): closed form of the Adler collision period for d = 1, kappa = 0.5
ADLER_PERIOD_HALF = 7.255197456936871


def random_params(rng, n, kappa_max=5.0, mean_zero=True):
    nu = rng.normal(size=n)
    if mean_zero:
        nu -= nu.mean()
    return ModelParams(rng.uniform(0, kappa_max), nu)


class TestConfig:
    def test_invariants(self):
        with pytest.raises(ParameterError):
            IntegratorConfig(step=2.0, max_step=1.0)
        with pytest.raises(ParameterError):
            IntegratorConfig(rel_tol=1.0)
        with pytest.raises(ParameterError):
            IntegratorConfig(abs_tol=0.0)
        with pytest.raises(ParameterError):
            IntegratorConfig(method="euler")
        assert IntegratorConfig.fixed(0.5).method == "rk4"


class TestRhs:
    def test_all_equal(self):
        p = ModelParams(3.0, [0.1, -0.4, 0.3])
        assert np.allclose(rhs(PhaseState([1.0] * 3), p), p.omega.freqs, atol=1e-15)

    def test_adler_difference(self, rng):
        for _ in range(50):
            p = ModelParams(rng.uniform(0, 4), rng.normal(size=2))
            th = rng.uniform(-np.pi, np.pi, 2)
            v = rhs(th, p)
            nu = p.omega.freqs
            assert v[0] - v[1] == pytest.approx(nu[0] - nu[1] - p.kappa * math.sin(th[0] - th[1]), abs=1e-14)

    def test_direct_and_mean_field_agree(self, rng):
        for _ in range(1000):
            n = int(rng.integers(1, 30))
            p = random_params(rng, n, mean_zero=False)
            th = rng.uniform(-20, 20, n)
            assert np.allclose(rhs(th, p), rhs(th, p, method="direct"), atol=1e-12 * n, rtol=0)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            rhs(PhaseState([0.0, 1.0]), ModelParams(1.0, [0.0, 0.0, 0.0]))

    def test_gradient_of_potential(self, rng):
        h = 1e-5
        for _ in range(100):
            n = int(rng.integers(2, 10))
            p = random_params(rng, n)
            th = rng.uniform(-np.pi, np.pi, n)
            grad = np.array([(potential(th + h * e, p) - potential(th - h * e, p)) / (2 * h) for e in np.eye(n)])
            assert np.allclose(-grad, rhs(th, p), atol=1e-7)


class TestIntegrate:
    def test_frozen_when_uncoupled_and_still(self):
        th0 = PhaseState([0.3, -1.2, 2.0])
        traj = integrate(th0, ModelParams(0.0, np.zeros(3)), horizon=5.0, sample_dt=0.5)
        assert np.array_equal(traj.phases[-1], th0.phases)

    @pytest.mark.parametrize("method", ["rk45", "rk4"])
    def test_total_phase_conserved(self, rng, method):
        p = random_params(rng, 8, 3.0)
        cfg = IntegratorConfig() if method == "rk45" else IntegratorConfig.fixed(0.01)
        traj = integrate(PhaseState(rng.uniform(-np.pi, np.pi, 8)), p, cfg, horizon=100.0, sample_dt=0.5)
        assert traj.conservation_drift() <= drift_tolerance(100.0)
        s = traj.phases.sum(axis=1)
        assert np.max(np.abs(s - s[0])) <= drift_tolerance(100.0)

    def test_rk4_fourth_order(self, rng):
        p = random_params(rng, 10, 2.0)
        th0 = PhaseState(rng.uniform(-np.pi, np.pi, 10))
        finals = [integrate(th0, p, IntegratorConfig.fixed(h), horizon=2.0, sample_dt=2.0).phases[-1]
                  for h in (0.1, 0.05, 0.025)]
        e1 = np.max(np.abs(finals[0] - finals[1]))
        e2 = np.max(np.abs(finals[1] - finals[2]))
        order = math.log2(e1 / e2)
        assert 3.7 < order < 4.3

    def test_rk4_bitwise_reproducible(self, rng):
        p = random_params(rng, 6)
        th0 = PhaseState(rng.uniform(-np.pi, np.pi, 6))
        a = integrate(th0, p, IntegratorConfig.fixed(0.01), horizon=3.0, sample_dt=0.1)
        b = integrate(th0, p, IntegratorConfig.fixed(0.01), horizon=3.0, sample_dt=0.1)
        assert a.phases.tobytes() == b.phases.tobytes()

    def test_rk45_matches_fine_rk4(self, rng):
        p = random_params(rng, 5, 2.0)
        th0 = PhaseState(rng.uniform(-np.pi, np.pi, 5))
        a = integrate(th0, p, horizon=5.0, sample_dt=0.25)
        b = integrate(th0, p, IntegratorConfig.fixed(0.001), horizon=5.0, sample_dt=0.25)
        assert np.max(np.abs(a.phases - b.phases)) < 1e-7

    def test_trajectory_shape(self, rng):
        p = random_params(rng, 4)
        traj = integrate(PhaseState(rng.uniform(-1, 1, 4), time=2.0), p, horizon=1.05, sample_dt=0.1)
        assert traj.times[0] == 2.0 and traj.times[-1] == pytest.approx(3.05)
        assert np.all(np.diff(traj.times) > 0)
        for name, series in traj.channels.items():
            assert series.shape == traj.times.shape, name
        for k in (0, 3, len(traj.times) - 1):
            assert np.allclose(traj.state_at(traj.times[k]), traj.phases[k], atol=1e-12)

    def test_energy_non_increasing(self, rng):
        for _ in range(5):
            p = random_params(rng, 7, 3.0)
            traj = integrate(PhaseState(rng.uniform(-np.pi, np.pi, 7)), p, horizon=20.0, sample_dt=0.05)
            assert np.all(np.diff(traj.channels["V"]) <= 1e-8)

    def test_order_parameter_dynamics(self, rng):
        p = random_params(rng, 6, 3.0)
        dt = 1e-3
        traj = integrate(PhaseState(rng.uniform(-1.0, 1.0, 6)), p, horizon=3.0, sample_dt=dt)
        ch = traj.channels
        r, phi = ch["R"], ch["phi"]
        theta = traj.phases
        nu = p.omega.freqs
        s = np.sin(theta - phi[:, None])
        c = np.cos(theta - phi[:, None])
        inner = nu - p.kappa * r[:, None] * s
        r_dot = -(s * inner).mean(axis=1)
        phi_dot = (c * inner).mean(axis=1) / r
        ok = r[1:-1] > 0.1
        fd_r = (r[2:] - r[:-2]) / (2 * dt)
        fd_phi = (phi[2:] - phi[:-2]) / (2 * dt)
        assert np.max(np.abs(fd_r - r_dot[1:-1])[ok]) < 1e-5
        assert np.max(np.abs(fd_phi - phi_dot[1:-1])[ok]) < 1e-5

    def test_permutation_equivariance(self, rng):
        p = random_params(rng, 6)
        th = rng.uniform(-np.pi, np.pi, 6)
        perm = rng.permutation(6)
        cfg = IntegratorConfig.fixed(0.01)
        a = integrate(PhaseState(th), p, cfg, horizon=5.0, sample_dt=0.5)
        b = integrate(PhaseState(th[perm]), ModelParams(p.kappa, p.omega.freqs[perm]), cfg, horizon=5.0, sample_dt=0.5)
        assert np.allclose(a.phases[:, perm], b.phases, atol=1e-12)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_underflow_carries_last_state(self, monkeypatch):
        def failing_step(theta, f0, omega, kappa, h):
            return theta, f0, np.full_like(theta, 1e300)

        monkeypatch.setattr(dynamics, "_dp_step", failing_step)
        with pytest.raises(StepSizeUnderflow) as info:
            integrate(PhaseState([0.0, 1.0]), ModelParams(1.0, [0.5, -0.5]), horizon=1.0, sample_dt=0.1)
        assert np.array_equal(info.value.last_state.phases, [0.0, 1.0])

    def test_bad_horizon(self):
        with pytest.raises(ParameterError):
            integrate(PhaseState([0.0]), ModelParams(1.0, [0.0]), horizon=0.0)


class TestJacobian:
    def test_single_oscillator(self):
        assert np.array_equal(jacobian(PhaseState([0.3]), ModelParams(2.0, [1.0])), [[0.0]])

    def test_trace_is_divergence(self, rng):
        for _ in range(500):
            n = int(rng.integers(1, 20))
            p = random_params(rng, n, 10.0)
            th = rng.uniform(-np.pi, np.pi, n)
            assert np.trace(jacobian(th, p)) == pytest.approx(divergence(th, p), abs=1e-12 * n)

    def test_matches_finite_differences(self, rng):
        h = 1e-6
        for _ in range(50):
            n = int(rng.integers(2, 8))
            p = random_params(rng, n)
            th = rng.uniform(-np.pi, np.pi, n)
            fd = np.column_stack([(rhs(th + h * e, p) - rhs(th - h * e, p)) / (2 * h) for e in np.eye(n)])
            assert np.allclose(jacobian(th, p), fd, atol=1e-8)


class TestCollisions:
    def test_identical_frequencies_never_collide(self):
        for kappa in (0.0, 0.5, 3.0):
            traj = integrate(PhaseState([0.0, 1.0, 2.0]), ModelParams(kappa, [0.2, 0.2, 0.2]), horizon=30, sample_dt=0.1)
            assert detect_collisions(traj) == []

    def test_adler_period_matches_quadrature(self):
        d, kappa = 1.0, 0.5
        period, _ = quad(lambda x: 1.0 / (d - kappa * math.sin(x)), 0.0, 2 * math.pi, epsabs=1e-13, epsrel=1e-13)
        assert period == pytest.approx(ADLER_PERIOD_HALF, abs=1e-10)
        assert period == pytest.approx(2 * math.pi / math.sqrt(d ** 2 - kappa ** 2), abs=1e-10)
        traj = integrate(PhaseState([0.0, 0.3]), ModelParams(kappa, [d / 2, -d / 2]), horizon=80, sample_dt=0.05)
        times = np.array([e.t for e in traj.events])
        assert len(times) >= 10
        assert np.max(np.abs(np.diff(times) - period)) < 1e-4

    def test_one_way_collisions(self, rng):
        for _ in range(5):
            p = ModelParams(rng.uniform(0.1, 1.0), rng.uniform(-2, 2, 5))
            traj = integrate(PhaseState(rng.uniform(-np.pi, np.pi, 5)), p, horizon=30, sample_dt=0.1)
            nu = p.omega.freqs
            for e in traj.events:
                assert e.approach_rate == pytest.approx(nu[e.i] - nu[e.j], abs=1e-6)
                assert nu[e.i] != nu[e.j]

    def test_supercritical_adler_collisions_stop(self):
        traj = integrate(PhaseState([0.0, 2.5]), ModelParams(1.5, [0.5, -0.5]), horizon=200, sample_dt=0.1)
        events = traj.events
        assert len(events) < 5
        assert all(e.t < 20 for e in events)

    def test_events_refined_to_crossing(self):
        traj = integrate(PhaseState([0.0, 0.3]), ModelParams(0.5, [0.5, -0.5]), horizon=30, sample_dt=0.5)
        for e in traj.events:
            y = traj.state_at(e.t)
            diff = y[e.i] - y[e.j]
            assert abs(diff - 2 * math.pi * round(diff / (2 * math.pi))) < 1e-8
