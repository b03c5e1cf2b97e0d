"""Unit tests for dessim module."""
import json
import unittest
from dataclasses import replace

import numpy as np

from src.config import SUBSTREAM_LAYOUT
from src.dessim import (
    DETERMINISTIC,
    UNIFORM,
    InsufficientData,
    Process,
    SimConfig,
    SimConfigError,
    config_hash,
    detect_instability,
    fluid_scaling_check,
    replicate,
    run,
    run_metadata,
    substreams,
)
from src.fluid import integrate
from src.network import network_from_arrays
from src.policies import LQ, STATIC_PRIORITY, PolicyConfig
from tests.test_network import line_network


def single_queue(lam, mu):
    return network_from_arrays([[0.0]], [lam], [mu], [[0]])


class TestProcess(unittest.TestCase):
    """Test renewal families."""

    def test_deterministic(self):
        """Test deterministic gaps equal the mean."""
        gaps = Process(DETERMINISTIC).draw(np.random.default_rng(0), 4.0, 5)
        np.testing.assert_allclose(gaps, 0.25)

    def test_uniform_range(self):
        """Test uniform gaps stay within the spread around the mean."""
        gaps = Process(UNIFORM, spread=0.5).draw(np.random.default_rng(0), 2.0, 1000)
        self.assertGreaterEqual(gaps.min(), 0.25)
        self.assertLessEqual(gaps.max(), 0.75)
        self.assertAlmostEqual(float(gaps.mean()), 0.5, delta=0.02)

    def test_validation(self):
        """Test unknown families and bad spreads are rejected."""
        with self.assertRaises(SimConfigError):
            Process("pareto").validate()
        with self.assertRaises(SimConfigError):
            Process(UNIFORM, spread=1.5).validate()


class TestSimConfig(unittest.TestCase):
    """Test simulation configuration."""

    def test_default_interval(self):
        """Test snapshots default to a fixed number per horizon."""
        sim = SimConfig(horizon=1000.0)
        self.assertAlmostEqual(sim.interval, 0.5)

    def test_invalid(self):
        """Test bad horizons and per-queue lists are rejected."""
        net = single_queue(1.0, 2.0)
        with self.assertRaises(SimConfigError):
            SimConfig(horizon=0.0).validate_for(net)
        with self.assertRaises(SimConfigError):
            SimConfig(arrivals=(Process(), Process())).validate_for(net)

    def test_document_round_trip(self):
        """Test the document form parses back to an equal config."""
        sim = SimConfig(seed=9, horizon=50.0, sample_interval=0.5,
                        service=Process(UNIFORM, spread=0.2), audit=True)
        self.assertEqual(SimConfig.from_dict(sim.to_dict()), sim)

    def test_substreams(self):
        """Test the seed spawns one generator per layout entry."""
        streams = substreams(42)
        self.assertEqual(tuple(streams), SUBSTREAM_LAYOUT)
        self.assertNotEqual(streams["arrivals"].random(), streams["services"].random())


class TestRun(unittest.TestCase):
    """Test single simulation runs."""

    def test_no_arrivals(self):
        """Test an empty network with no arrivals stays empty."""
        net = network_from_arrays([[0.0]], [0.0], [1.0], [[0]])
        result = run(net, PolicyConfig(LQ), SimConfig(horizon=100.0))
        self.assertEqual(result.events, 0)
        self.assertEqual(int(result.snapshots.sum()), 0)

    def test_mm1_busy_fraction(self):
        """Test the M/M/1 server is busy half the time at rho = 0.5."""
        result = run(single_queue(1.0, 2.0), PolicyConfig(LQ), SimConfig(seed=1, horizon=1e5))
        self.assertAlmostEqual(float(result.busy_fraction[0]), 0.5, delta=0.02)
        self.assertFalse(detect_instability(result).unstable)

    def test_overloaded_queue_grows(self):
        """Test an overloaded queue grows at the excess rate."""
        result = run(single_queue(2.0, 1.0), PolicyConfig(LQ), SimConfig(seed=2, horizon=1e5))
        verdict = detect_instability(result)
        self.assertTrue(verdict.unstable)
        self.assertAlmostEqual(verdict.slope, 1.0, delta=0.05)
        self.assertEqual(verdict.batches, 20)

    def test_conservation_and_snapshots(self):
        """Test jobs are conserved and snapshots are sampled on the grid."""
        net = line_network()
        result = run(net, PolicyConfig(LQ), SimConfig(seed=3, horizon=200.0, sample_interval=1.0),
                     X0=[4, 3, 2, 1])
        self.assertEqual(result.arrivals + result.initial, result.departures + result.in_system)
        self.assertEqual(result.initial, 10)
        self.assertEqual(len(result.times), 201)
        np.testing.assert_array_equal(result.snapshots[0], [4, 3, 2, 1])
        self.assertEqual(int(result.snapshots[-1].sum()), result.in_system)
        self.assertTrue(np.all(result.snapshots >= 0))

    def test_determinism(self):
        """Test equal seeds give identical results and different seeds differ."""
        net = line_network()
        sim = SimConfig(seed=5, horizon=500.0)
        first = run(net, PolicyConfig(LQ), sim, X0=[5, 5, 5, 5])
        second = run(net, PolicyConfig(LQ), sim, X0=[5, 5, 5, 5])
        np.testing.assert_array_equal(first.snapshots, second.snapshots)
        np.testing.assert_array_equal(first.busy_fraction, second.busy_fraction)
        other = run(net, PolicyConfig(LQ), replace(sim, seed=6), X0=[5, 5, 5, 5])
        self.assertFalse(np.array_equal(first.snapshots, other.snapshots))

    def test_policy_does_not_perturb_arrivals(self):
        """Test switching the policy keeps the arrival sample path."""
        net = line_network(lam=1.0, mu=(5, 1.8, 1.8, 5))
        sim = SimConfig(seed=8, horizon=300.0)
        lq = run(net, PolicyConfig(LQ), sim)
        priority = run(net, PolicyConfig(STATIC_PRIORITY, priority_order=((1, 0), (2, 3))), sim)
        self.assertEqual(lq.arrivals, priority.arrivals)

    def test_audit_mode(self):
        """Test the audit finds no violation for LQ and static priority."""
        net = line_network()
        sim = SimConfig(seed=4, horizon=300.0, audit=True)
        run(net, PolicyConfig(LQ), sim, X0=[6, 2, 4, 1])
        run(net, PolicyConfig(STATIC_PRIORITY, priority_order=((1, 0), (2, 3))), sim, X0=[6, 2, 4, 1])

    def test_invalid_initial_state(self):
        """Test negative or fractional X0 is rejected."""
        net = line_network()
        with self.assertRaises(SimConfigError):
            run(net, PolicyConfig(LQ), SimConfig(horizon=10.0), X0=[1, -1, 0, 0])
        with self.assertRaises(SimConfigError):
            run(net, PolicyConfig(LQ), SimConfig(horizon=10.0), X0=[1.5, 0, 0, 0])


class TestDetectInstability(unittest.TestCase):
    """Test the growth-slope verdict."""

    def test_insufficient_data(self):
        """Test too few snapshots in the last half raise InsufficientData."""
        result = run(single_queue(1.0, 2.0), PolicyConfig(LQ),
                     SimConfig(seed=1, horizon=100.0, sample_interval=1.0))
        with self.assertRaises(InsufficientData):
            detect_instability(result)

    def test_mild_overload_detected(self):
        """Test slow steady growth of a strongly autocorrelated path is reported."""
        result = run(single_queue(1.1, 1.0), PolicyConfig(LQ), SimConfig(seed=3, horizon=1e5))
        verdict = detect_instability(result)
        self.assertTrue(verdict.unstable)
        self.assertAlmostEqual(verdict.slope, 0.1, delta=0.03)
        self.assertGreater(verdict.slope, 3.0 * verdict.stderr)

    def test_empty_path_is_stable(self):
        """Test a constant path has zero slope."""
        net = network_from_arrays([[0.0]], [0.0], [1.0], [[0]])
        verdict = detect_instability(run(net, PolicyConfig(LQ), SimConfig(horizon=1000.0)))
        self.assertFalse(verdict.unstable)
        self.assertEqual(verdict.slope, 0.0)


class TestReplicationAndScaling(unittest.TestCase):
    """Test replications, metadata and the fluid-scaling harness."""

    def test_replicate_keeps_seed_order(self):
        """Test results come back in the order of the seeds."""
        results = replicate(single_queue(1.0, 2.0), PolicyConfig(LQ), SimConfig(horizon=200.0),
                            None, [3, 1, 2])
        self.assertEqual([r.seed for r in results], [3, 1, 2])

    def test_parallel_matches_serial(self):
        """Test process-pool replications equal in-process ones."""
        net = single_queue(1.0, 2.0)
        sim = SimConfig(horizon=200.0)
        serial = replicate(net, PolicyConfig(LQ), sim, None, [1, 2])
        parallel = replicate(net, PolicyConfig(LQ), sim, None, [1, 2], jobs=2)
        for a, b in zip(serial, parallel):
            np.testing.assert_array_equal(a.snapshots, b.snapshots)

    def test_metadata(self):
        """Test the metadata names the seed layout and hashes the inputs."""
        net = line_network()
        sim = SimConfig(seed=11, horizon=10.0)
        record = run_metadata(net, PolicyConfig(LQ), sim, None)
        self.assertEqual(record["seed"], 11)
        self.assertEqual(record["substreams"]["layout"], list(SUBSTREAM_LAYOUT))
        self.assertEqual(len(record["config_hash"]), 64)
        self.assertEqual(record["config_hash"], config_hash(net, PolicyConfig(LQ), sim, None))
        self.assertNotEqual(record["config_hash"],
                            config_hash(net, PolicyConfig(LQ), replace(sim, seed=12), None))
        json.dumps(record)

    def test_scaling_report_shape(self):
        """Test one averaged error per scaling factor."""
        net = line_network()
        x0 = [4, 3, 2, 1]
        traj = integrate(net, x0, "LQ")
        report = fluid_scaling_check(net, PolicyConfig(LQ), x0, [2, 5], SimConfig(seed=1), traj,
                                     seeds=[1, 2])
        self.assertEqual([p.r for p in report.points], [2.0, 5.0])
        self.assertEqual(len(report.points[0].per_seed), 2)
        self.assertTrue(all(np.isfinite(report.errors)))

    def test_scaling_zero_start(self):
        """Test a stable network started empty stays near the zero fluid path."""
        net = line_network()
        traj = integrate(net, [0, 0, 0, 0], "LQ")
        report = fluid_scaling_check(net, PolicyConfig(LQ), [0, 0, 0, 0], [100], SimConfig(seed=1), traj)
        self.assertLess(report.errors[0], 0.5)


if __name__ == '__main__':
    unittest.main()
