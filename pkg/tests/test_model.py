import dataclasses
import math
import unittest

import numpy as np

from parathink import (constants, exceptions, kvcache, layout, mask, model,
                       rope)
from tests import SMALL, small_model


def random_tokens(seed, count, high=constants.BYTE_VOCAB):
    return [int(t) for t in
            np.random.default_rng(seed).integers(0, high, count)]


class ModelConfigTestCase(unittest.TestCase):

    def test_defaults(self):
        config = model.ModelConfig()
        self.assertEqual(config.model_dim, 64)
        self.assertEqual(config.dtype, np.dtype(np.float64))
        self.assertEqual(config.rotary, rope.RotaryParams(16, 10000.0))

    def test_invalid(self):
        for overrides in ({'head_dim': 7}, {'n_layers': 0},
                          {'precision': 'fp16'}, {'vocab_size': 256},
                          {'max_paths': 17}, {'seed': -1},
                          {'rope_base': 0.0}):
            with self.assertRaises(exceptions.ConfigError):
                dataclasses.replace(SMALL, **overrides)

    def test_weight_shapes(self):
        shapes = list(model.weight_shapes(SMALL))
        self.assertEqual(len(shapes), 2 + 8 * SMALL.n_layers + 1)
        self.assertEqual(shapes[0], ('token_embedding', (300, 16)))
        self.assertEqual(shapes[1], ('layers.0.attn_norm', (16,)))
        self.assertEqual(shapes[7], ('layers.0.w_up', (16, 64)))
        self.assertEqual(shapes[-1], ('unembedding', (16, 300)))


class InitWeightsTestCase(unittest.TestCase):

    def test_deterministic(self):
        first, second = small_model(), small_model()
        for (name, a), (_, b) in zip(first.tensors(), second.tensors()):
            np.testing.assert_array_equal(a, b, name)

    def test_seed_changes_weights(self):
        first, second = small_model(), small_model(seed=1)
        self.assertFalse(np.array_equal(first.token_embedding,
                                        second.token_embedding))

    def test_range(self):
        for name, value in small_model().tensors():
            self.assertLessEqual(np.abs(value).max(), constants.INIT_SCALE)

    def test_path_table_starts_at_zero(self):
        decoder = small_model()
        self.assertEqual(decoder.paths.e.shape, (16, 8))
        self.assertFalse(decoder.paths.e.any())

    def test_missing_tensor(self):
        tensors = dict(small_model().tensors())
        del tensors['final_norm']
        with self.assertRaises(exceptions.ShapeError):
            model.ToyDecoder(SMALL, tensors)

    def test_wrong_shape(self):
        tensors = dict(small_model().tensors())
        tensors['final_norm'] = np.zeros(3)
        with self.assertRaises(exceptions.ShapeError):
            model.ToyDecoder(SMALL, tensors)

    def test_wrong_path_table(self):
        tensors = dict(small_model().tensors())
        with self.assertRaises(exceptions.ShapeError):
            model.ToyDecoder(SMALL, tensors,
                             rope.PathEmbeddingTable.zeros(4, 8))


class ForwardTestCase(unittest.TestCase):

    def setUp(self):
        self.model = small_model()
        self.model.paths = rope.PathEmbeddingTable(
            np.random.default_rng(7).uniform(-0.5, 0.5, (16, 8)))
        self.layout = layout.SegmentLayout(3, (4, 3), 2)
        self.tokens = random_tokens(1, self.layout.total)
        self.mask = mask.build_pa_mask(self.layout)
        self.plan = rope.assign_positions(self.layout)

    def test_shape(self):
        logits = self.model.forward_full(self.tokens, self.mask, self.plan)
        self.assertEqual(logits.shape, (self.layout.total, 300))
        self.assertEqual(logits.dtype, np.float64)

    def test_length_mismatch(self):
        with self.assertRaises(exceptions.ShapeError):
            self.model.forward_full(self.tokens[:-1], self.mask, self.plan)

    def test_token_outside_vocabulary(self):
        tokens = list(self.tokens)
        tokens[0] = 300
        with self.assertRaises(exceptions.VocabError):
            self.model.forward_full(tokens, self.mask, self.plan)

    def test_path_isolation(self):
        changed = list(self.tokens)
        start = self.layout.path_start(2)
        changed[start:start + 3] = random_tokens(2, 3)
        before = self.model.forward_full(self.tokens, self.mask, self.plan)
        after = self.model.forward_full(changed, self.mask, self.plan)
        np.testing.assert_array_equal(before[:start], after[:start])
        states = self.model.hidden_states(self.tokens, self.mask, self.plan)
        changed_states = self.model.hidden_states(
            changed, self.mask, self.plan)
        self.assertEqual(states.shape, (2, self.layout.total, 16))
        np.testing.assert_array_equal(states[:, :start],
                                      changed_states[:, :start])

    def test_other_path_isolated(self):
        changed = list(self.tokens)
        start, stop = self.layout.path_start(1), self.layout.path_start(2)
        changed[start:stop] = random_tokens(3, stop - start)
        before = self.model.forward_full(self.tokens, self.mask, self.plan)
        after = self.model.forward_full(changed, self.mask, self.plan)
        np.testing.assert_array_equal(
            before[stop:self.layout.summary_start],
            after[stop:self.layout.summary_start])

    def test_zero_table_is_plain_rope(self):
        decoder = small_model()
        with_paths = decoder.forward_full(self.tokens, self.mask, self.plan)
        without = decoder.forward_full(
            self.tokens, self.mask, self.plan, path_embeddings=False)
        np.testing.assert_array_equal(with_paths, without)

    def test_embeddings_only_touch_paths(self):
        with_paths = self.model.forward_full(
            self.tokens, self.mask, self.plan)
        without = self.model.forward_full(
            self.tokens, self.mask, self.plan, path_embeddings=False)
        shared = self.layout.shared_len
        np.testing.assert_array_equal(with_paths[:shared], without[:shared])
        self.assertFalse(np.array_equal(with_paths[shared:],
                                        without[shared:]))

    def test_prefill_keys(self):
        result = self.model.prefill(self.tokens, self.mask, self.plan)
        self.assertEqual(len(result.keys), 1)
        self.assertEqual(result.keys[0].shape, (self.layout.total, 2, 8))
        self.assertEqual(result.values[0].shape,
                         (self.layout.total, 2, 8))


class StepTestCase(unittest.TestCase):

    def setUp(self):
        self.model = small_model()
        self.store = kvcache.BlockStore.for_model(self.model, block_size=4)
        self.tokens = random_tokens(4, 11)

    def test_steps_match_full_forward(self):
        shared = 5
        seq = self.store.prefill_shared(
            self.model, self.tokens[:shared],
            rope.PositionPlan(range(shared), [None] * shared))
        logits = [self.model.forward_step(token, seq, pos)
                  for pos, token in enumerate(self.tokens[shared:], shared)]
        n = len(self.tokens)
        full = self.model.forward_full(
            self.tokens, mask.build_causal_mask(n),
            rope.PositionPlan(range(n), [None] * n))
        np.testing.assert_array_equal(np.stack(logits), full[shared:])

    def test_read_only_view(self):
        seq = self.store.prefill_shared(
            self.model, self.tokens[:2], rope.PositionPlan(range(2),
                                                           [None] * 2))
        child, = self.store.fork(seq, 1)
        view = self.store.merge_for_summary(seq, [child])
        with self.assertRaises(exceptions.CacheError):
            self.model.forward_step(65, view, 5)

    def test_position_must_advance(self):
        seq = self.store.new_sequence()
        self.model.forward_step(65, seq, 3)
        with self.assertRaises(exceptions.CacheError):
            self.model.forward_step(66, seq, 3)

    def test_token_outside_vocabulary(self):
        with self.assertRaises(exceptions.VocabError):
            self.model.forward_step(-1, self.store.new_sequence(), 0)


class LossTestCase(unittest.TestCase):

    def setUp(self):
        self.model = small_model()
        self.layout = layout.SegmentLayout(1, (2, 2), 1)
        self.mask = mask.build_pa_mask(self.layout)
        self.plan = rope.assign_positions(self.layout)
        self.tokens = random_tokens(5, 6)

    def test_predecessors(self):
        np.testing.assert_array_equal(model.predecessors(self.mask),
                                      [-1, 0, 1, 0, 3, 4])

    def test_targets(self):
        self.assertListEqual(
            model.loss_targets(self.tokens, [1] * 6, self.mask),
            [(1, 0), (2, 1), (3, 0), (4, 3), (5, 4)])
        self.assertListEqual(
            model.loss_targets(self.tokens, [1, 0, 1, 0, 1, 0], self.mask),
            [(2, 1), (4, 3)])

    def test_everything_masked(self):
        with self.assertRaises(exceptions.SampleError):
            self.model.loss_masked(self.tokens, [1, 0, 0, 0, 0, 0],
                                   self.mask, self.plan)

    def test_mask_length(self):
        with self.assertRaises(exceptions.SampleError):
            model.loss_targets(self.tokens, [1] * 5, self.mask)

    def test_loss_near_uniform(self):
        loss = self.model.loss_masked(self.tokens, [1] * 6, self.mask,
                                      self.plan)
        self.assertAlmostEqual(loss, math.log(300), delta=0.5)

    def test_log_softmax(self):
        logits = np.array([0.0, math.log(3.0)])
        self.assertAlmostEqual(model.log_softmax_at(logits, 1),
                               math.log(0.75))

    def test_ordered_dot(self):
        x = np.random.default_rng(6).uniform(-1, 1, (3, 5))
        w = np.random.default_rng(7).uniform(-1, 1, (5, 4))
        np.testing.assert_allclose(model.ordered_dot(x, w), x @ w)
