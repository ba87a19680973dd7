import math

import numpy as np
import pytest

from kuralock.diagnostics import (
    aligned_subset,
    detect_phase_locking,
    find_gamma_ensemble,
    gronwall_check,
    majority_ensemble_from_phase,
    r_growth_check,
    subset_diameter_series,
    track_ensemble,
    trailing_window,
    verify_ordering,
    well_prepared_time,
)
from kuralock.dynamics import IntegratorConfig, integrate
from kuralock.errors import ParameterError
from kuralock.experiments import build_scenario, integrate_until_quasistationary
from kuralock.phase import EnsembleSelection, FrequencyVector, ModelParams, PhaseState, wrap_to_pi
from kuralock.thresholds import ordering_constant

from oracles import brute_force_ensemble, subset_arcs, subset_masks


def random_state(rng, n, spread=np.pi):
    return PhaseState(rng.uniform(-spread, spread, n) + rng.uniform(-10, 10))


class TestFindEnsemble:
    def test_all_equal(self):
        sel = find_gamma_ensemble(PhaseState([1.3] * 6), 1.0, 0.1)
        assert sel.indices == tuple(range(6))
        assert sel.arclength == 0.0

    def test_antipodal_quadruple(self):
        theta = PhaseState([0.0, np.pi, 0.7, 0.7 + np.pi])
        for ell in (0.5, 2.0, np.pi - 1e-3):
            assert find_gamma_ensemble(theta, 0.51, ell) is None

    def test_brute_force(self, rng):
        masks = {n: subset_masks(n) for n in range(1, 11)}
        for _ in range(200):
            n = int(rng.integers(1, 11))
            theta = random_state(rng, n, rng.uniform(0.3, np.pi))
            gamma = rng.uniform(0.51, 1.0)
            ell = rng.uniform(0.05, 2 * np.pi - 0.05)
            sel = find_gamma_ensemble(theta, gamma, ell)
            ref = brute_force_ensemble(theta.phases, gamma, ell, masks[n])
            if ref is None:
                assert sel is None
                continue
            assert len(sel.indices) == ref[0]
            assert sel.arclength == pytest.approx(ref[1], abs=1e-12)
            mask = np.zeros(n, dtype=bool)
            mask[list(sel.indices)] = True
            assert subset_arcs(theta.phases, mask[None, :])[0] == pytest.approx(sel.arclength, abs=1e-12)

    def test_ties_prefer_smaller_arc(self):
        # {0, 1.0, 1.1} and {1.0, 1.1, 2.0} both fit; the second is tighter
        theta = PhaseState([0.0, 1.0, 1.1, 2.0])
        sel = find_gamma_ensemble(theta, 0.51, 1.5)
        assert sel.indices == (1, 2, 3)
        assert sel.arclength == pytest.approx(1.0)

    def test_argument_ranges(self):
        with pytest.raises(ParameterError):
            find_gamma_ensemble(PhaseState([0.0]), 0.5, 1.0)
        with pytest.raises(ParameterError):
            find_gamma_ensemble(PhaseState([0.0]), 0.8, 2 * np.pi)


class TestMajority:
    def test_all_at_psi(self):
        a, b = majority_ensemble_from_phase(PhaseState([0.4] * 5), 0.4, 0.3)
        assert a.indices == tuple(range(5)) and b is None

    def test_membership_matches_direct_distance(self, rng):
        for _ in range(300):
            n = int(rng.integers(1, 30))
            theta = random_state(rng, n)
            psi, beta = rng.uniform(-np.pi, np.pi), rng.uniform(0.01, np.pi / 2 - 0.01)
            a, b = majority_ensemble_from_phase(theta, psi, beta)
            # distance on the circle via the chord: |e^{ix} - e^{ipsi}| = 2 sin(d/2)
            chord = np.abs(np.exp(1j * theta.phases) - np.exp(1j * psi))
            expect = set(np.nonzero(chord <= 2 * np.sin(beta / 2))[0].tolist())
            got_a = set(a.indices) if a else set()
            got_b = set(b.indices) if b else set()
            assert got_a == expect
            assert got_a | got_b == set(range(n)) and not got_a & got_b

    def test_beta_range(self):
        with pytest.raises(ParameterError):
            majority_ensemble_from_phase(PhaseState([0.0]), 0.0, np.pi / 2)


class TestAlignment:
    def test_aligned_subset_diameter_is_wrapped(self, rng):
        for _ in range(200):
            n = int(rng.integers(1, 12))
            theta = rng.uniform(-20, 20, (3, n))
            al = aligned_subset(theta, range(n))
            turns = (al - theta) / (2 * np.pi)
            assert np.allclose(turns, np.round(turns), atol=1e-12)
            mask = np.ones((1, n), dtype=bool)
            assert al[0].max() - al[0].min() == pytest.approx(subset_arcs(theta[0], mask)[0], abs=1e-9)


class TestLocking:
    def test_adler_locks_at_arcsin(self):
        traj = integrate(PhaseState([0.0, 0.0]), ModelParams(2.0, [0.5, -0.5]), horizon=60, sample_dt=0.05)
        verdict = detect_phase_locking(traj)
        assert verdict.locked
        assert verdict.rate > 0
        assert traj.phases[-1, 0] - traj.phases[-1, 1] == pytest.approx(np.pi / 6, abs=1e-6)
        assert verdict.asymptotic_diameter_estimate == pytest.approx(np.pi / 6, abs=1e-6)

    @pytest.mark.parametrize("kappa", [0.5, 1.0, 5.0])
    def test_nonsync_not_locked(self, kappa):
        # the antipodal state is linearly unstable and round-off leaves it after roughly 35/kappa
        # seconds, so the horizon stays inside the stretch where the exact solution is tracked
        sc = build_scenario("nonsync4", {"kappa": kappa})
        traj = integrate(sc.initial_state(), sc.params(), horizon=min(30.0, 20.0 / kappa), sample_dt=0.01)
        verdict = detect_phase_locking(traj)
        assert not verdict.locked
        assert np.all(traj.channels["R"] <= 1e-9)
        assert verdict.final_freq_diameter == pytest.approx(1.0, abs=1e-6)

    def test_identical_frequencies_lock(self, rng):
        for _ in range(3):
            theta = PhaseState(rng.uniform(-np.pi, np.pi, 6))
            traj = integrate(theta, ModelParams(1.0, np.full(6, 0.3)), horizon=200, sample_dt=0.1)
            assert detect_phase_locking(traj).locked

    def test_horizon_too_short(self):
        traj = integrate(PhaseState([0.0, 0.1]), ModelParams(1.0, [0.1, -0.1]), horizon=3, sample_dt=0.1)
        with pytest.raises(ParameterError):
            detect_phase_locking(traj, window=2.0)

    def test_window_rule(self):
        assert trailing_window(1.0, 200) == pytest.approx(40)
        assert trailing_window(1.0, 50) == pytest.approx(50 / 3)
        assert trailing_window(10.0, 100) == pytest.approx(20)

    def test_locked_means_collisions_stop(self, rng):
        for kappa in (0.5, 0.9, 1.1, 2.0):
            sc = build_scenario("adler2", {"kappa": kappa, "theta0": [0.0, 0.4]})
            traj, verdict = integrate_until_quasistationary(sc.initial_state(), sc.params(), 100.0)
            assert verdict.locked == (verdict.window_collisions == 0)
            assert verdict.locked == (kappa > 1)


class TestInequalities:
    def test_gronwall_trivial_case(self):
        theta = PhaseState([0.2, 0.2, 0.2, 1.5, -2.0])
        params = ModelParams(1.0, [0.1, 0.1, 0.1, 0.6, -0.3])
        traj = integrate(theta, params, horizon=10, sample_dt=0.05)
        sel = EnsembleSelection((0, 1, 2), 5)
        assert np.allclose(subset_diameter_series(traj, sel), 0, atol=1e-12)
        assert gronwall_check(traj, sel, 0.6, params.omega.diameter, 1.0) <= 0

    def test_gronwall_random(self, rng):
        for _ in range(20):
            n = int(rng.integers(3, 21))
            params = ModelParams(rng.uniform(0.2, 5.0), rng.uniform(-1, 1, n))
            traj = integrate(random_state(rng, n), params, horizon=10, sample_dt=0.01)
            size = int(rng.integers(n // 2 + 1, n + 1))
            sel = EnsembleSelection(tuple(rng.choice(n, size, replace=False).tolist()), n)
            gamma = rng.uniform(0.5 + 1e-6, size / n)
            assert gronwall_check(traj, sel, gamma, params.omega.diameter, params.kappa) <= 0

    def test_gronwall_sine_case(self):
        # gamma = 1 inside a half circle: the classical inequality with f = sin
        params = ModelParams(2.0, [0.3, -0.2, 0.1, -0.2])
        traj = integrate(PhaseState([0.0, 0.4, 1.0, 1.4]), params, horizon=10, sample_dt=0.01)
        sel = EnsembleSelection(tuple(range(4)), 4)
        diam = subset_diameter_series(traj, sel)
        fd = np.diff(diam) / 0.01
        assert np.all(fd <= 0.5 - 2.0 * np.sin(diam[:-1]) + 0.05)
        assert gronwall_check(traj, sel, 1.0, 0.5, 2.0) <= 0

    def test_r_growth_sync_equality(self):
        traj = integrate(PhaseState([0.7] * 4), ModelParams(1.0, np.zeros(4)), horizon=5, sample_dt=0.1)
        assert np.allclose(traj.channels["R"], 1.0)
        assert r_growth_check(traj, 0.0, 1.0) <= 0

    def test_r_growth_identical_non_decreasing(self, rng):
        traj = integrate(random_state(rng, 8), ModelParams(1.5, np.full(8, 0.2)), horizon=10, sample_dt=0.02)
        r = traj.channels["R"]
        assert np.all(np.diff(r) >= -1e-12)
        assert r_growth_check(traj, 0.0, 1.5) <= 0

    def test_r_growth_random(self, rng):
        for _ in range(20):
            params = ModelParams(rng.uniform(0.2, 5.0), rng.uniform(-1, 1, 15))
            traj = integrate(random_state(rng, 15), params, horizon=10, sample_dt=0.01)
            assert r_growth_check(traj, params.omega.diameter, params.kappa) <= 0

    def test_nothing_checked(self):
        traj = integrate(PhaseState([0.0, np.pi]), ModelParams(0.0, np.zeros(2)), horizon=1, sample_dt=0.1)
        assert r_growth_check(traj, 0.0, 0.0) == -math.inf


class TestWellPrepared:
    def test_already_prepared(self):
        traj = integrate(PhaseState([0.0, 0.01, -0.01]), ModelParams(5.0, [0.1, 0.0, -0.1]),
                         horizon=2, sample_dt=0.1)
        r0 = traj.channels["R"][0]
        assert well_prepared_time(traj, r0, 0.2, 5.0) == 0.0

    def test_identical_oscillators(self, rng):
        traj = integrate(random_state(rng, 6), ModelParams(0.1, np.zeros(6)), horizon=2, sample_dt=0.1)
        assert well_prepared_time(traj, traj.channels["R"][0], 0.0, 0.1) == 0.0

    def test_found_at_twice_the_bound(self):
        for seed in range(5):
            sc = build_scenario("target_r0", {"n": 20, "r0": 0.5, "d_omega": 1.0}, seed=seed)
            kappa = 2 * 1.6 / 0.5 ** 2
            traj = integrate(sc.initial_state(), sc.params(kappa), horizon=20, sample_dt=0.01)
            r0 = traj.channels["R"][0]
            assert well_prepared_time(traj, r0, 1.0, kappa) is not None


class TestOrdering:
    def test_adler(self):
        traj = integrate(PhaseState([0.0, 0.0]), ModelParams(2.0, [0.5, -0.5]), horizon=60, sample_dt=0.05)
        c = ordering_constant(1.0, 2.0, 1.0)
        assert 0.5 <= np.pi / 6 <= c * 0.5
        res = verify_ordering(traj, EnsembleSelection((0, 1), 2), traj.params.omega, 2.0, c)
        assert res.ordered
        assert res.slack[(0, 1)] == pytest.approx(min(np.pi / 6 - 0.5 + 1e-3, c * 0.5 + 1e-3 - np.pi / 6), abs=1e-6)

    def test_equal_frequencies_merge(self, rng):
        nu = [0.2, 0.2, 0.2, -0.4, 0.1]
        traj = integrate(random_state(rng, 5, 1.0), ModelParams(6.0, nu), horizon=40, sample_dt=0.05)
        sel = EnsembleSelection((0, 1, 2), 5)
        res = verify_ordering(traj, sel, FrequencyVector(nu), 6.0, 10.0)
        assert res.ordered
        assert set(res.slack) == {(0, 1), (0, 2), (1, 2)}

    def test_permutation_invariance(self, rng):
        n = 6
        nu = rng.uniform(-0.5, 0.5, n)
        theta = rng.uniform(-0.5, 0.5, n)
        perm = rng.permutation(n)
        kappa = 8.0
        c = ordering_constant(0.9, kappa, np.ptp(nu))
        cfg = IntegratorConfig.fixed(0.01)
        a = integrate(PhaseState(theta), ModelParams(kappa, nu), cfg, horizon=30, sample_dt=0.05)
        b = integrate(PhaseState(theta[perm]), ModelParams(kappa, nu[perm]), cfg, horizon=30, sample_dt=0.05)
        ra = verify_ordering(a, EnsembleSelection(tuple(range(n)), n), a.params.omega, kappa, c)
        rb = verify_ordering(b, EnsembleSelection(tuple(range(n)), n), b.params.omega, kappa, c)
        assert ra.ordered == rb.ordered
        assert ra.worst == pytest.approx(rb.worst, abs=1e-12)

    def test_violation_detected(self):
        traj = integrate(PhaseState([0.0, 0.0]), ModelParams(2.0, [0.5, -0.5]), horizon=60, sample_dt=0.05)
        res = verify_ordering(traj, EnsembleSelection((0, 1), 2), traj.params.omega, 2.0, 1.0)
        assert not res.ordered and res.worst < 0

    def test_track_ensemble(self):
        params = ModelParams(6.0, [0.2, 0.1, 0.0, -0.1, -0.2])
        traj = integrate(PhaseState([0.0, 0.3, 0.2, -0.1, 3.0]), params, horizon=40, sample_dt=0.05)
        sel = find_gamma_ensemble(traj.sample(0), 0.8, 0.5)
        rep = track_ensemble(traj, sel, 0.8, 0.4)
        assert rep.limsup_diameter <= rep.sup_diameter
        assert rep.sup_diameter <= 0.5 + 1e-3
        assert rep.limsup_diameter <= rep.phi1_bound + 1e-3
        assert rep.ordered


def test_not_locked_keeps_order_parameter_small(rng):
    # a trajectory that never locks cannot have R above sqrt(1.6 D / kappa) at any sample
    checked = 0
    for _ in range(30):
        n = int(rng.integers(3, 8))
        nu = rng.uniform(-0.5, 0.5, n)
        kappa = rng.uniform(0.2, 2.0) * np.ptp(nu)
        traj, verdict = integrate_until_quasistationary(random_state(rng, n), ModelParams(kappa, nu), 100.0)
        if verdict.locked:
            continue
        checked += 1
        bound = math.sqrt(1.6 * np.ptp(nu) / kappa)
        assert np.all(traj.channels["R"] <= bound + 1e-6)
    sc = build_scenario("nonsync4", {"kappa": 10.0})
    traj = integrate(sc.initial_state(), sc.params(), horizon=1.0, sample_dt=0.01)
    assert not detect_phase_locking(traj).locked
    assert np.all(traj.channels["R"] <= math.sqrt(1.6 / 10.0))
    assert checked > 0
