import unittest

from hypothesis import given, strategies as st
import numpy as np

from parathink import prng

SEEDS = st.integers(min_value=0, max_value=prng.MASK64)


class SplitMix64TestCase(unittest.TestCase):

    def test_known_first_output(self):
        # reference value of splitmix64 seeded with 0
        self.assertEqual(prng.SplitMix64(0).next_u64(), 0xE220A8397B1DCDAF)

    @given(SEEDS)
    def test_same_seed_same_stream(self, seed):
        first, second = prng.SplitMix64(seed), prng.SplitMix64(seed)
        self.assertListEqual([first.next_u64() for _ in range(8)],
                             [second.next_u64() for _ in range(8)])

    @given(SEEDS, st.integers(min_value=1, max_value=64))
    def test_uniform_array_matches_next_float(self, seed, count):
        bulk, single = prng.SplitMix64(seed), prng.SplitMix64(seed)
        values = bulk.uniform_array(count, -0.02, 0.02)
        expectation = [-0.02 + 0.04 * single.next_float()
                       for _ in range(count)]
        np.testing.assert_array_equal(values, np.array(expectation))
        self.assertEqual(bulk.state, single.state)

    @given(SEEDS)
    def test_floats_in_unit_interval(self, seed):
        stream = prng.SplitMix64(seed)
        for _ in range(16):
            value = stream.next_float()
            self.assertGreaterEqual(value, 0.0)
            self.assertLess(value, 1.0)

    @given(SEEDS)
    def test_choice_skips_zero_weights(self, seed):
        stream = prng.SplitMix64(seed)
        for _ in range(16):
            self.assertIn(stream.choice([0.0, 1.0, 0.0, 2.0]), (1, 3))


class DeriveSeedTestCase(unittest.TestCase):

    @given(SEEDS)
    def test_streams_are_distinct(self, seed):
        derived = {prng.derive_seed(seed, index) for index in range(17)}
        self.assertEqual(len(derived), 17)

    @given(SEEDS, st.integers(min_value=0, max_value=16))
    def test_derivation_is_stable(self, seed, index):
        self.assertEqual(prng.derive_seed(seed, index),
                         prng.derive_seed(seed, index))
        self.assertLessEqual(prng.derive_seed(seed, index), prng.MASK64)
