import io
import unittest

import faker
from hypothesis import given, settings, strategies as st

from parathink import datakit, exceptions, layout

VOCAB = layout.SpecialVocab.default()

grids = st.builds(datakit.TokenGrid, st.integers(min_value=2, max_value=32),
                  st.integers(min_value=2, max_value=32))


class PartitionTestCase(unittest.TestCase):

    @settings(deadline=None)
    @given(grids)
    def test_block_partition_covers_grid(self, grid):
        regions = datakit.block_partition(grid)
        self.assertListEqual([region.label for region in regions],
                             list(datakit.Quadrant))
        cells = set()
        for region in regions:
            self.assertTrue(region.cells)
            self.assertFalse(cells & region.cells)
            cells |= region.cells
        self.assertEqual(len(cells), grid.size)

    @settings(deadline=None)
    @given(grids, st.sampled_from(list(datakit.ScanOrder)))
    def test_scan_permutation_is_bijection(self, grid, order):
        permutation = datakit.scan_permutation(grid, order)
        self.assertListEqual(sorted(permutation), list(range(grid.size)))

    def test_quadrant_split(self):
        grid = datakit.TokenGrid(3, 5)
        top_left = datakit.block_partition(grid)[0]
        self.assertEqual(top_left.cells, frozenset(
            (r, c) for r in range(2) for c in range(3)))

    def test_small_grid(self):
        with self.assertRaises(exceptions.LayoutError):
            datakit.block_partition(datakit.TokenGrid(1, 4))
        with self.assertRaises(exceptions.LayoutError):
            datakit.TokenGrid(0, 2)

    def test_scan_orders(self):
        grid = datakit.TokenGrid(2, 3)
        expectations = {
            datakit.ScanOrder.LEFT_TO_RIGHT: [0, 1, 2, 3, 4, 5],
            datakit.ScanOrder.TOP_TO_BOTTOM: [0, 3, 1, 4, 2, 5],
            datakit.ScanOrder.RIGHT_TO_LEFT: [2, 1, 0, 5, 4, 3],
            datakit.ScanOrder.BOTTOM_TO_TOP: [3, 0, 4, 1, 5, 2]}
        for order, expectation in expectations.items():
            self.assertListEqual(datakit.scan_permutation(grid, order),
                                 expectation)

    def test_token_helpers(self):
        grid = datakit.TokenGrid(2, 2)
        tokens = [10, 11, 12, 13]
        self.assertListEqual(
            datakit.scan_tokens(tokens, grid,
                                datakit.ScanOrder.TOP_TO_BOTTOM),
            [10, 12, 11, 13])
        bottom_right = datakit.block_partition(grid)[3]
        self.assertListEqual(
            datakit.region_tokens(tokens, grid, bottom_right), [13])
        with self.assertRaises(exceptions.LayoutError):
            datakit.scan_tokens(tokens[:3], grid,
                                datakit.ScanOrder.LEFT_TO_RIGHT)

    def test_strategy(self):
        self.assertEqual(datakit.select_strategy(datakit.TaskKind.COUNTING),
                         datakit.Strategy.SCAN_ORDER)
        self.assertEqual(datakit.select_strategy(datakit.TaskKind.GROUNDING),
                         datakit.Strategy.BLOCK_BASED)
        self.assertListEqual(
            datakit.path_instructions(datakit.Strategy.BLOCK_BASED),
            ['Top-Left:', 'Top-Right:', 'Bottom-Left:', 'Bottom-Right:'])
        self.assertEqual(
            datakit.path_instructions(datakit.Strategy.SCAN_ORDER)[3],
            'Scanning Bottom-to-Top:')

    def test_render(self):
        grid = datakit.TokenGrid(2, 2)
        self.assertEqual(datakit.render_grid(grid), '0 1\n2 3')
        self.assertEqual(datakit.render_regions(grid), 'TL TR\nBL BR')


class SampleTestCase(unittest.TestCase):

    def setUp(self):
        self.fake = faker.Faker()
        self.fake.seed_instance(1)
        self.question = self.fake.sentence()
        self.paths = [self.fake.sentence() for _ in range(4)]
        self.answer = self.fake.word()
        self.sample = datakit.build_sample(
            self.question, self.paths, self.answer, VOCAB)

    def test_layout(self):
        parsed = self.sample.layout(VOCAB)
        self.assertEqual(parsed.n_paths, 4)
        tokenizer = datakit.ByteTokenizer(VOCAB)
        self.assertEqual(parsed.shared_len,
                         len(tokenizer.encode(self.question)) + 3)

    def test_loss_mask_zeros(self):
        tokens, loss_mask = self.sample.token_ids, self.sample.loss_mask
        self.assertEqual(len(tokens), len(loss_mask))
        zeros = {index for index, value in enumerate(loss_mask) if not value}
        parsed = self.sample.layout(VOCAB)
        expectation = set(range(parsed.shared_len)) | {
            parsed.path_start(k) for k in range(1, 5)}
        self.assertSetEqual(zeros, expectation)
        for k in range(1, 5):
            self.assertEqual(tokens[parsed.path_start(k)],
                             VOCAB.think_open(k))

    def test_summary_boxes_answer(self):
        self.assertIn('\\boxed{{{}}}'.format(self.answer),
                      self.sample.summary)
        self.assertTrue(self.sample.summary.startswith(
            'By analyzing multiple reasoning processes above'))

    def test_decode(self):
        tokenizer = datakit.ByteTokenizer(VOCAB)
        text = tokenizer.decode(self.sample.token_ids)
        self.assertTrue(text.startswith('<|User|>' + self.question))
        self.assertIn('<think3>' + self.paths[2] + '</think3>', text)
        self.assertTrue(text.endswith('</summary>'))

    def test_wrong_path_count(self):
        with self.assertRaises(exceptions.SampleError):
            datakit.build_sample(self.question, self.paths[:3], self.answer)

    def test_empty_path(self):
        with self.assertRaises(exceptions.SampleError):
            datakit.build_sample(self.question, ['', *self.paths[1:]],
                                 self.answer)

    def test_bad_answers(self):
        for answer in ('', 'a}b', '<think1>', 'x\\boxed{y'):
            with self.assertRaises(exceptions.SampleError):
                datakit.build_sample(self.question, self.paths, answer)

    def test_custom_summary_must_box_answer(self):
        with self.assertRaises(exceptions.SampleError):
            datakit.build_sample(self.question, self.paths, self.answer,
                                 summary='no answer here')

    def test_records(self):
        samples = [self.sample, datakit.build_sample(
            self.fake.sentence(), self.paths, 'ünïcode')]
        sink = io.StringIO()
        self.assertEqual(datakit.emit_records(samples, sink), 2)
        lines = sink.getvalue().splitlines()
        self.assertEqual(len(lines), 2)
        self.assertIn('ünïcode', lines[1])
        self.assertListEqual(datakit.read_records(io.StringIO(
            sink.getvalue())), samples)
