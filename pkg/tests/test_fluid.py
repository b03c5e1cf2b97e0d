"""Unit tests for fluid module."""
import json
import unittest

import numpy as np

from src.config import TOLERANCES
from src.fluid import (
    InvalidInitialState,
    MaximaState,
    PhaseSolution,
    SingularPhase,
    UnsupportedPolicy,
    _consistent,
    dominating_sets,
    hold_at_zero,
    integrate,
    maxima,
    resolve_jump,
    solve_phase_ldq,
    solve_phase_lq,
)
from src.network import derive, network_from_arrays
from tests.test_network import line_network, random_network

X0 = [40, 30, 20, 10]


def cycle_network():
    return network_from_arrays([[0, 1], [0.6, 0]], [0.2, 0], [1, 1], [[0], [1]])


def random_acyclic_network(rng, K, J):
    """Random stable network whose routing follows a random queue order."""
    net = random_network(rng, K, J)
    rank = np.empty(K, dtype=int)
    rank[rng.permutation(K)] = np.arange(K)
    R = np.where(rank[:, None] < rank[None, :], net.R, 0.0)
    return network_from_arrays(R, net.lam, net.mu, [list(g) for g in net.groups])


def group_emptied_at(traj, members):
    """First segment end time at which every queue in members is zero."""
    for seg in traj.segments:
        if all(seg.X_end[i] <= 1e-9 for i in members):
            return seg.t_end
    return None


class TestMaximaState(unittest.TestCase):
    """Test maxima state helpers."""

    def test_label(self):
        """Test 1-based labels with the empty-set marker."""
        self.assertEqual(MaximaState(((0, 1), ())).label(), "(1,2,∅)")
        self.assertEqual(MaximaState(((1,), (3,))).label(), "(2,4)")

    def test_maxima_with_ties_and_empty_group(self):
        """Test argmax sets per group; an all-zero group is empty."""
        net = line_network()
        self.assertEqual(maxima([3, 3, 1, 0], net).sets, ((0, 1), (2,)))
        self.assertEqual(maxima([2, 1, 0, 0], net).sets, ((0,), ()))
        self.assertTrue(maxima([0, 0, 0, 0], net).is_zero)

    def test_with_queue_and_group(self):
        """Test states are rebuilt immutably."""
        S = MaximaState(((0,), (2,)))
        self.assertEqual(S.with_queue(1, 3).sets, ((0,), (2, 3)))
        self.assertEqual(S.with_group(0, ()).empty_groups(), (0,))
        self.assertEqual(S.sets, ((0,), (2,)))

    def test_dominating_sets(self):
        """Test a queue feeding a strictly longer maximum is dominated."""
        net = line_network(mu=(1, 1, 1, 1))
        X = np.array([10.0, 5.0, 20.0, 1.0])
        S = maxima(X, net)
        self.assertEqual(dominating_sets(net, X, S), ((1,), (2, 3)))
        X = np.array([20.0, 5.0, 20.0, 1.0])
        self.assertEqual(dominating_sets(net, X, maxima(X, net)), ((0, 1), (2, 3)))


class TestLqPhase(unittest.TestCase):
    """Test the LQ phase block system."""

    def setUp(self):
        """Set up the line network of the LQ example."""
        self.net = line_network()
        self.dq = derive(self.net)

    def test_single_maxima(self):
        """Test each group serving its single maximum at full rate."""
        phase = solve_phase_lq(self.net, self.dq, MaximaState(((0,), (2,))))
        np.testing.assert_allclose(phase.Tdot, [1, 0, 1, 0], atol=1e-12)
        self.assertAlmostEqual(phase.alpha[0], -2.6, places=12)
        self.assertAlmostEqual(phase.alpha[1], 2.0, places=12)
        self.assertTrue(phase.feasible)

    def test_tied_group_time_sharing(self):
        """Test queues 1 and 2 tied with queue 4 alone in its group."""
        phase = solve_phase_lq(self.net, self.dq, MaximaState(((0, 1), (3,))))
        self.assertAlmostEqual(phase.Tdot[0], 0.1, places=12)
        self.assertAlmostEqual(phase.Tdot[1], 0.9, places=12)
        self.assertAlmostEqual(phase.drift[0], phase.drift[1], places=12)

    def test_infeasible_state_jumps(self):
        """Test a fast queue 4 makes (1,2,4) infeasible and the jump lands on (2,4)."""
        net = line_network(mu=(3, 1, 1, 2))
        dq = derive(net)
        S = MaximaState(((0, 1), (3,)))
        phase = solve_phase_lq(net, dq, S)
        self.assertFalse(phase.feasible)
        self.assertAlmostEqual(phase.Tdot[0], -0.15, places=12)
        target = resolve_jump(net, dq, S, 1)
        self.assertEqual(target, MaximaState(((1,), (3,))))
        landed = solve_phase_lq(net, dq, target)
        self.assertAlmostEqual(landed.alpha[0], 1.0, places=12)

    def test_removed_queue_must_fall_behind(self):
        """Test a removed queue level with its group maximum rejects the sub-state."""
        S = MaximaState(((1,), (3,)))
        level = PhaseSolution(Tdot=np.zeros(4), alpha=np.array([0.5, -0.1]),
                              drift=np.array([0.5, 0.5, 0.0, -0.1]), feasible=True)
        self.assertFalse(_consistent(self.net, S, level, [0], 1e-9))
        behind = PhaseSolution(Tdot=np.zeros(4), alpha=np.array([0.5, -0.1]),
                               drift=np.array([0.2, 0.5, 0.0, -0.1]), feasible=True)
        self.assertTrue(_consistent(self.net, S, behind, [0], 1e-9))

    def test_zero_state_holds_nominal_load(self):
        """Test the zero state serves each queue at nu / mu."""
        phase = solve_phase_lq(self.net, self.dq, MaximaState.zero(self.net))
        np.testing.assert_allclose(phase.Tdot, self.dq.nu / self.net.mu, atol=1e-12)
        np.testing.assert_allclose(phase.drift, 0.0, atol=1e-12)
        self.assertEqual(phase.overloaded, ())

    def test_empty_group_held(self):
        """Test group 1 held empty while queues 3 and 4 drain together."""
        phase = solve_phase_lq(self.net, self.dq, MaximaState(((), (2, 3))))
        np.testing.assert_allclose(phase.Tdot, [0.4 / 3, 1.6 / 3, 1.4 / 3, 1.6 / 3], atol=1e-12)
        self.assertAlmostEqual(phase.alpha[1], -0.2 / 3, places=12)
        self.assertEqual(phase.overloaded, ())

    def test_hold_at_zero_overload(self):
        """Test an empty group whose inflow exceeds capacity is flagged."""
        self.assertFalse(hold_at_zero(self.net, 0, [0.4, 0.4]).overloaded)
        allocation = hold_at_zero(self.net, 1, [0.6, 0.6])
        self.assertTrue(allocation.overloaded)
        self.assertAlmostEqual(allocation.load, 1.2)

    def test_feasible_phases_have_a_draining_group(self):
        """Test every feasible phase of a stable network has a negative group drift."""
        rng = np.random.default_rng(11)
        checked = 0
        for _ in range(1000):
            K = int(rng.integers(2, 9))
            J = int(rng.integers(1, K + 1))
            net = random_network(rng, K, J)
            dq = derive(net)
            sets = []
            for members in net.groups:
                pick = [i for i in members if rng.random() < 0.5]
                sets.append(tuple(pick) if pick else (members[0],))
            try:
                phase = solve_phase_lq(net, dq, MaximaState(tuple(sets)))
            except SingularPhase:
                continue
            if not phase.feasible:
                continue
            checked += 1
            self.assertLess(float(np.min(phase.alpha)), 1e-12)
        self.assertGreater(checked, 500)


class TestLdqPhase(unittest.TestCase):
    """Test the LDQ phase programme."""

    def test_untied_levels(self):
        """Test each group serves its longest dominating queue."""
        net = line_network(mu=(1, 1, 1, 1))
        phase = solve_phase_ldq(net, derive(net), X0)
        np.testing.assert_allclose(phase.drift, [-0.6, 0, 0, 1], atol=1e-9)
        np.testing.assert_allclose(phase.Tdot, [1, 0, 1, 0], atol=1e-9)

    def test_all_tied(self):
        """Test four tied queues share a drift of -0.04."""
        net = line_network(mu=(1, 1, 1, 1))
        phase = solve_phase_ldq(net, derive(net), [10, 10, 10, 10])
        np.testing.assert_allclose(phase.drift, [-0.04] * 4, atol=1e-8)
        np.testing.assert_allclose(phase.Tdot, [0.44, 0.56, 0.48, 0.52], atol=1e-8)

    def test_dominated_group_idles(self):
        """Test a queue feeding a longer maximum is not served."""
        net = cycle_network()
        phase = solve_phase_ldq(net, derive(net), [20, 10])
        np.testing.assert_allclose(phase.Tdot, [1, 0], atol=1e-9)
        np.testing.assert_allclose(phase.drift, [-0.8, 1.0], atol=1e-9)

    def test_cycle_tie_balances(self):
        """Test tied queues on a routing cycle split service evenly with zero drift."""
        net = cycle_network()
        phase = solve_phase_ldq(net, derive(net), [15, 15])
        np.testing.assert_allclose(phase.Tdot, [0.5, 0.5], atol=1e-8)
        np.testing.assert_allclose(phase.drift, [0, 0], atol=1e-8)


class TestLqTrajectory(unittest.TestCase):
    """Test LQ fluid integration on the line network."""

    @classmethod
    def setUpClass(cls):
        """Integrate once for the whole class."""
        cls.net = line_network()
        cls.traj = integrate(cls.net, X0, "LQ")

    def test_drains(self):
        """Test the trajectory drains in finite time."""
        self.assertTrue(self.traj.status.drained)
        self.assertGreater(self.traj.status.time, 500)
        self.assertLess(self.traj.status.time, 800)
        self.assertTrue(self.traj.state_path()[-1].is_zero)

    def test_first_phases(self):
        """Test the opening phase and the tie of queues 1 and 2."""
        first, second = self.traj.segments[0], self.traj.segments[1]
        self.assertEqual(first.state, MaximaState(((0,), (2,))))
        self.assertAlmostEqual(first.t_end, 10 / 2.6, places=9)
        self.assertEqual(second.state, MaximaState(((0, 1), (2,))))
        self.assertAlmostEqual(second.phase.Tdot[0], 0.35, places=9)
        self.assertAlmostEqual(second.phase.alpha[0], -0.65, places=9)
        self.assertAlmostEqual(second.phase.alpha[1], 0.05, places=9)

    def test_group_one_empties_first(self):
        """Test group 1 reaches zero before the network drains and group 2 then drains."""
        t_empty = group_emptied_at(self.traj, (0, 1))
        self.assertIsNotNone(t_empty)
        self.assertLess(t_empty, self.traj.status.time)
        self.assertIn(MaximaState(((), (2, 3))), self.traj.state_path())
        for seg in self.traj.segments:
            if seg.t_start >= t_empty and seg.state.sets[1]:
                self.assertLess(seg.phase.alpha[1], 0.0)

    def test_residuals_and_tied_drifts(self):
        """Test segments satisfy the fluid equation and group maxima move together."""
        self.assertLessEqual(self.traj.max_residual(), 1e-8)
        for seg in self.traj.segments:
            for j, members in enumerate(seg.state.sets):
                for i in members:
                    self.assertAlmostEqual(seg.phase.drift[i], seg.phase.alpha[j], delta=1e-9)

    def test_evaluation(self):
        """Test X(t) interpolation at the ends."""
        np.testing.assert_allclose(self.traj.at(0.0), X0)
        np.testing.assert_allclose(self.traj.at(self.traj.end_time + 1.0), 0.0, atol=1e-9)
        t_mid = self.traj.segments[0].t_end / 2
        np.testing.assert_allclose(self.traj.at(t_mid)[0], 40 - 2.6 * t_mid, atol=1e-9)

    def test_to_json(self):
        """Test the trajectory summary serializes."""
        parsed = json.loads(self.traj.to_json())
        self.assertEqual(parsed["status"], "Drained")
        self.assertEqual(parsed["state_path"][0], "(1,3)")


class TestLdqTrajectory(unittest.TestCase):
    """Test LDQ fluid integration."""

    def test_acyclic_drains_together(self):
        """Test the line network equalizes and all queues reach zero together."""
        net = line_network(mu=(1, 1, 1, 1))
        traj = integrate(net, X0, "LDQ")
        self.assertTrue(traj.status.drained)
        last = [s for s in traj.segments if s.duration > 0][-1]
        self.assertLess(np.ptp(last.X_start), 1e-6 * max(1.0, float(np.max(last.X_start))))
        np.testing.assert_allclose(last.X_end, 0.0, atol=1e-9)
        np.testing.assert_allclose(last.phase.drift, [-0.04] * 4, atol=1e-8)
        levels = [v for _, v in traj.max_norm()]
        for before, after in zip(levels, levels[1:]):
            self.assertLessEqual(after, before + 1e-9 * (1 + before))
        self.assertLessEqual(traj.max_residual(), 1e-8)

    def test_cycle_stalls(self):
        """Test the two-queue cycle equalizes and then stays constant."""
        traj = integrate(cycle_network(), [20, 10], "LDQ")
        self.assertEqual(traj.status.kind, "Stalled")
        self.assertAlmostEqual(traj.segments[0].t_end, 10 / 1.8, places=9)
        final = traj.segments[-1]
        np.testing.assert_allclose(final.X_end, [20 - 0.8 * 10 / 1.8] * 2, atol=1e-7)
        self.assertLessEqual(float(np.max(np.abs(final.phase.drift))), 1e-9)
        np.testing.assert_allclose(final.phase.Tdot, [0.5, 0.5], atol=1e-8)


class TestTrajectoryProperties(unittest.TestCase):
    """Test invariants of LQ and LDQ trajectories on random scenarios."""

    @classmethod
    def setUpClass(cls):
        """Draw the random scenarios once for the whole class."""
        rng = np.random.default_rng(31)
        cls.scenarios = []
        for _ in range(200):
            K = int(rng.integers(2, 7))
            J = int(rng.integers(1, min(K, 3) + 1))
            cls.scenarios.append((random_network(rng, K, J), rng.uniform(0, 100, K)))

    def test_lq_segments(self):
        """Test LQ segments follow the fluid equation with equal drifts among group maxima."""
        for net, x0 in self.scenarios:
            traj = integrate(net, x0, "LQ")
            self.assertLessEqual(traj.max_residual(), TOLERANCES.segment_residual)
            A = np.eye(net.K) - net.R.T
            for seg in traj.segments:
                phase = seg.phase
                np.testing.assert_allclose(phase.drift, net.lam - A @ (net.mu * phase.Tdot), atol=1e-9)
                for members in seg.state.sets:
                    if members:
                        self.assertLessEqual(float(np.ptp(phase.drift[list(members)])), 1e-9)

    def test_ldq_segments(self):
        """Test LDQ segments meet the residual bound and serve only dominating queues."""
        for net, x0 in self.scenarios:
            traj = integrate(net, x0, "LDQ")
            self.assertLessEqual(traj.max_residual(), TOLERANCES.segment_residual)
            for seg in traj.segments:
                if seg.duration <= 0:
                    continue
                allowed = dominating_sets(net, seg.X_start, maxima(seg.X_start, net))
                for i in np.flatnonzero(seg.phase.Tdot > TOLERANCES.lp_active):
                    self.assertIn(int(i), allowed[net.group_of[i]])

    def test_ldq_max_never_increases_on_acyclic_networks(self):
        """Test the longest queue never grows under LDQ when routing is acyclic."""
        rng = np.random.default_rng(37)
        for _ in range(100):
            K = int(rng.integers(2, 7))
            net = random_acyclic_network(rng, K, int(rng.integers(1, min(K, 3) + 1)))
            traj = integrate(net, rng.uniform(0, 100, K), "LDQ")
            levels = [v for _, v in traj.max_norm()]
            for before, after in zip(levels, levels[1:]):
                self.assertLessEqual(after, before + 1e-9 * (1 + before))


class TestIntegrateErrors(unittest.TestCase):
    """Test integrate preconditions and terminal states."""

    def setUp(self):
        """Set up the line network."""
        self.net = line_network()

    def test_bad_initial_state(self):
        """Test wrong shapes and negative levels are rejected."""
        with self.assertRaises(InvalidInitialState):
            integrate(self.net, [1, 2, 3])
        with self.assertRaises(InvalidInitialState):
            integrate(self.net, [1, -2, 3, 4])

    def test_bad_horizon(self):
        """Test a non-positive horizon is rejected."""
        with self.assertRaises(InvalidInitialState):
            integrate(self.net, X0, horizon=0.0)

    def test_unsupported_policy(self):
        """Test static priority has no fluid phase model."""
        with self.assertRaises(UnsupportedPolicy):
            integrate(self.net, X0, "StaticPriority")

    def test_zero_start_is_drained(self):
        """Test X0 = 0 is drained at time zero."""
        traj = integrate(self.net, [0, 0, 0, 0], "LQ")
        self.assertEqual(traj.status.kind, "Drained")
        self.assertEqual(traj.status.time, 0.0)

    def test_horizon_reached(self):
        """Test a short horizon stops the integration early."""
        traj = integrate(self.net, X0, "LQ", horizon=10.0)
        self.assertEqual(traj.status.kind, "HorizonReached")
        self.assertAlmostEqual(traj.end_time, 10.0, places=9)

    def test_random_two_by_two_networks(self):
        """Test LQ drains random stable two-by-two networks with exact segments."""
        rng = np.random.default_rng(5)
        for _ in range(25):
            net = random_network(rng, 4, 2)
            if not net.is_two_by_two():
                continue
            traj = integrate(net, rng.uniform(0, 100, 4), "LQ")
            self.assertTrue(traj.status.drained)
            self.assertLessEqual(traj.max_residual(), 1e-8)


if __name__ == '__main__':
    unittest.main()
