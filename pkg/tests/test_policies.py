"""Unit tests for policies module."""
import unittest

import numpy as np

from src.network import network_from_arrays
from src.policies import (
    FIXED,
    LDQ,
    LQ,
    RANDOM,
    STATIC_PRIORITY,
    Idle,
    PolicyConfig,
    PolicyConfigError,
    decide,
    decide_group,
    ldq_decide,
    lq_decide,
    priority_decide,
)
from tests.test_network import line_network


class TestLongestQueue(unittest.TestCase):
    """Test LQ decisions."""

    def setUp(self):
        """Set up the line network."""
        self.net = line_network()

    def test_serves_longest(self):
        """Test each group serves its longest queue."""
        self.assertEqual(decide(self.net, [5, 2, 0, 7], PolicyConfig(LQ)), (0, 3))

    def test_natural_tiebreak(self):
        """Test ties go to the lowest-numbered queue."""
        self.assertEqual(lq_decide(self.net, 0, [3, 3, 0, 0], PolicyConfig(LQ)), 0)

    def test_fixed_tiebreak(self):
        """Test ties follow the configured order."""
        cfg = PolicyConfig(LQ, tiebreak=FIXED, fixed_order=((1, 0), (2, 3)))
        self.assertEqual(lq_decide(self.net, 0, [3, 3, 0, 0], cfg), 1)

    def test_random_tiebreak(self):
        """Test random ties pick only tied queues and use the generator."""
        cfg = PolicyConfig(LQ, tiebreak=RANDOM)
        rng = np.random.default_rng(1)
        picks = {lq_decide(self.net, 0, [3, 3, 0, 0], cfg, rng) for _ in range(50)}
        self.assertEqual(picks, {0, 1})
        with self.assertRaises(PolicyConfigError):
            lq_decide(self.net, 0, [3, 3, 0, 0], cfg)

    def test_empty_group_idles(self):
        """Test an empty group returns Idle."""
        self.assertIs(lq_decide(self.net, 1, [3, 3, 0, 0], PolicyConfig(LQ)), Idle)


class TestLongestDominatingQueue(unittest.TestCase):
    """Test LDQ decisions."""

    def test_skips_dominated_queue(self):
        """Test queue 1 feeding the longer queue 3 is passed over."""
        net = line_network(mu=(1, 1, 1, 1))
        self.assertEqual(decide(net, [10, 5, 20, 1], PolicyConfig(LDQ)), (1, 2))

    def test_equal_lengths_do_not_dominate(self):
        """Test a queue tied with the maximum it feeds stays eligible."""
        net = line_network(mu=(1, 1, 1, 1))
        self.assertEqual(ldq_decide(net, 0, [20, 5, 20, 1], PolicyConfig(LDQ)), 0)

    def test_idles_non_empty_group(self):
        """Test LDQ may idle a group whose only queue is dominated."""
        net = network_from_arrays([[0, 1], [0.6, 0]], [0.2, 0], [1, 1], [[0], [1]])
        self.assertEqual(decide(net, [20, 10], PolicyConfig(LDQ)), (0, Idle))


class TestStaticPriority(unittest.TestCase):
    """Test static priority decisions."""

    def setUp(self):
        """Set up the priority order favouring queues 2 and 3."""
        self.net = line_network(lam=1.0, mu=(5, 1.8, 1.8, 5))
        self.cfg = PolicyConfig(STATIC_PRIORITY, priority_order=((1, 0), (2, 3))).validate_for(self.net)

    def test_priority_order(self):
        """Test the first non-empty queue in priority order is served."""
        self.assertEqual(priority_decide(self.net, 0, [4, 1, 0, 0], self.cfg), 1)
        self.assertEqual(priority_decide(self.net, 0, [4, 0, 0, 0], self.cfg), 0)
        self.assertEqual(decide_group(self.net, 1, [0, 0, 0, 9], self.cfg), 3)
        self.assertIs(decide_group(self.net, 1, [1, 1, 0, 0], self.cfg), Idle)


class TestPolicyConfig(unittest.TestCase):
    """Test policy configuration checks and document form."""

    def setUp(self):
        """Set up the line network."""
        self.net = line_network()

    def test_unknown_kind(self):
        """Test unknown kinds and tie-breaks are rejected."""
        with self.assertRaises(PolicyConfigError):
            PolicyConfig("FIFO").validate_for(self.net)
        with self.assertRaises(PolicyConfigError):
            PolicyConfig(LQ, tiebreak="coin").validate_for(self.net)

    def test_priority_needs_permutations(self):
        """Test priority orders must permute each group."""
        with self.assertRaises(PolicyConfigError):
            PolicyConfig(STATIC_PRIORITY).validate_for(self.net)
        with self.assertRaises(PolicyConfigError) as context:
            PolicyConfig(STATIC_PRIORITY, priority_order=((0, 2), (1, 3))).validate_for(self.net)
        self.assertIn("group 1", str(context.exception))

    def test_document_round_trip(self):
        """Test 1-based document form and back."""
        cfg = PolicyConfig(STATIC_PRIORITY, priority_order=((1, 0), (2, 3)))
        doc = cfg.to_dict()
        self.assertEqual(doc["priority_order"], [[2, 1], [3, 4]])
        self.assertEqual(PolicyConfig.from_dict(doc), cfg)


if __name__ == '__main__':
    unittest.main()
