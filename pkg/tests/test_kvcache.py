import unittest

import numpy as np

from parathink import constants, exceptions, kvcache


class BlockStoreTestCase(unittest.TestCase):

    def setUp(self):
        self.store = kvcache.BlockStore(1, 1, 2, block_size=4,
                                        record_access=True)

    def entry(self, value):
        return np.full((1, 1, 2), float(value))

    def fill(self, seq, values, start=0):
        for pos, value in enumerate(values, start):
            self.store.append(seq, self.entry(value), self.entry(-value),
                              pos)

    def keys(self, seq):
        return [float(k) for k in self.store.gather(seq, 0)[0][:, 0, 0]]

    def shared(self, count=6):
        seq = self.store.new_sequence()
        self.fill(seq, range(count))
        return seq

    def test_append_fills_blocks(self):
        seq = self.shared()
        self.assertEqual(seq.length, 6)
        self.assertEqual(len(seq.block_ids), 2)
        self.assertEqual(self.store.stats().blocks_allocated, 2)
        self.assertEqual(self.store.stats().decode_steps, 6)
        self.assertListEqual(self.keys(seq), [0, 1, 2, 3, 4, 5])
        values = self.store.gather(seq, 0)[1][:, 0, 0]
        np.testing.assert_array_equal(values, -np.arange(6.0))

    def test_fork_shares_full_blocks(self):
        seq = self.shared()
        full, tail = seq.block_ids
        children = self.store.fork(seq, 3)
        self.assertEqual(self.store.blocks[full].ref_count, 4)
        self.assertEqual(self.store.blocks[tail].ref_count, 1)
        stats = self.store.stats()
        self.assertEqual(stats.blocks_shared, 1)
        self.assertEqual(stats.blocks_allocated, 5)
        copies = set()
        for k, child in enumerate(children, 1):
            self.assertEqual(child.path, k)
            self.assertEqual(child.parent, seq.seq_id)
            self.assertEqual(child.block_ids[0], full)
            copies.add(child.block_ids[1])
            block = self.store.blocks[child.block_ids[1]]
            self.assertEqual(block.tag, constants.TAG_PATH.format(k))
            self.assertListEqual(self.keys(child), self.keys(seq))
        self.assertEqual(len(copies), 3)

    def test_fork_without_tail(self):
        seq = self.shared(4)
        child, = self.store.fork(seq, 1)
        self.assertListEqual(child.block_ids, seq.block_ids)
        self.assertEqual(self.store.stats().blocks_allocated, 1)

    def test_fork_limits(self):
        seq = self.shared()
        for n in (0, constants.MAX_PATHS + 1):
            with self.assertRaises(exceptions.CacheError):
                self.store.fork(seq, n)

    def test_children_are_isolated(self):
        seq = self.shared()
        first, second = self.store.fork(seq, 2)
        self.fill(first, [10, 11, 12], 6)
        self.fill(second, [20], 6)
        self.assertListEqual(self.keys(first), [0, 1, 2, 3, 4, 5, 10, 11, 12])
        self.assertListEqual(self.keys(second), [0, 1, 2, 3, 4, 5, 20])
        self.assertListEqual(self.keys(seq), [0, 1, 2, 3, 4, 5])

    def test_append_after_full_shared_block(self):
        seq = self.shared(4)
        child, = self.store.fork(seq, 1)
        self.fill(child, [9], 4)
        self.assertEqual(len(child.block_ids), 2)
        self.assertListEqual(self.keys(seq), [0, 1, 2, 3])

    def test_merge_for_summary(self):
        seq = self.shared()
        first, second = self.store.fork(seq, 2)
        self.fill(first, [10, 11], 6)
        self.fill(second, [20, 21, 22], 6)
        view = self.store.merge_for_summary(seq, [first, second])
        self.assertTrue(view.read_only)
        self.assertEqual(view.last_pos, 8)
        self.assertListEqual(self.keys(view),
                             [0, 1, 2, 3, 4, 5, 10, 11, 20, 21, 22])
        with self.assertRaises(exceptions.CacheError):
            self.store.append(view, self.entry(1), self.entry(1), 9)
        summary = self.store.continue_from(view)
        self.fill(summary, [30], 9)
        self.assertListEqual(self.keys(summary)[-2:], [22, 30])
        self.assertListEqual(self.keys(second), [0, 1, 2, 3, 4, 5, 20, 21, 22])

    def test_merge_checks_lineage(self):
        seq = self.shared()
        other = self.shared()
        child, = self.store.fork(other, 1)
        with self.assertRaises(exceptions.CacheError):
            self.store.merge_for_summary(seq, [child])

    def test_release_returns_blocks(self):
        seq = self.shared()
        children = self.store.fork(seq, 2)
        view = self.store.merge_for_summary(seq, children)
        for handle in [seq, *children, view]:
            self.store.release(handle)
        self.assertEqual(self.store.blocks_in_use, 0)
        self.assertEqual(self.store.stats().blocks_released, 4)
        with self.assertRaises(exceptions.CacheError):
            self.store.gather(seq, 0)

    def test_released_blocks_are_reused(self):
        seq = self.shared(4)
        self.store.release(seq)
        self.shared(4)
        self.assertEqual(self.store.stats().blocks_allocated, 2)
        self.assertEqual(self.store.blocks_in_use, 1)

    def test_pool_exhausted(self):
        store = kvcache.BlockStore(1, 1, 2, block_size=2, num_blocks=1)
        seq = store.new_sequence()
        for pos in range(2):
            store.append(seq, self.entry(pos), self.entry(pos), pos)
        with self.assertRaises(exceptions.PoolExhaustedError):
            store.append(seq, self.entry(2), self.entry(2), 2)

    def test_position_regression(self):
        seq = self.shared()
        with self.assertRaises(exceptions.CacheError):
            self.store.append(seq, self.entry(1), self.entry(1), 5)

    def test_access_log(self):
        seq = self.shared(2)
        self.store.gather(seq, 0)
        ops = [record.op for record in self.store.access_log]
        self.assertListEqual(ops, [kvcache.WRITE, kvcache.WRITE,
                                   kvcache.READ])

    def test_invalid_pool(self):
        with self.assertRaises(exceptions.CacheError):
            kvcache.BlockStore(1, 1, 2, block_size=0)

    def test_empty_gather(self):
        keys, values = self.store.gather(self.store.new_sequence(), 0)
        self.assertEqual(keys.shape, (0, 1, 2))
