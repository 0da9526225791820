"""
The :py:class:`~parathink.model.ToyDecoder` is a small pre-norm decoder-only
transformer with path-aware attention. It has two ways to run: the
monolithic :py:meth:`~parathink.model.ToyDecoder.forward_full`, which takes a
whole flattened sequence with its mask and position plan, and the incremental
:py:meth:`~parathink.model.ToyDecoder.forward_step`, which decodes one token
against a :py:class:`~parathink.kvcache.SequenceCache`.

Both legs share the same kernels. Matrix products and softmax sums are
accumulated in ascending index order and every attention row is evaluated
over exactly the keys it may see, so at 64-bit precision a step replayed
against a cache reproduces the monolithic row bit for bit.

Weights are drawn in the order listed by
:py:func:`~parathink.model.weight_shapes`:

- ``token_embedding`` ``(vocab_size, model_dim)``
- per layer ``l``: ``layers.l.attn_norm``, ``layers.l.wq``, ``layers.l.wk``,
  ``layers.l.wv``, ``layers.l.wo``, ``layers.l.mlp_norm``, ``layers.l.w_up``,
  ``layers.l.w_down``
- ``final_norm`` ``(model_dim,)``
- ``unembedding`` ``(model_dim, vocab_size)``

Norm gains are applied as ``1 + g``. The path-embedding table starts at zero.

"""
from __future__ import annotations

import dataclasses
import logging
import math
import typing

import numpy as np

from parathink import (constants, exceptions, layout as layout_, mask as mask_,
                       prng, rope)

if typing.TYPE_CHECKING:  # pragma: nocover
    from parathink import kvcache

LOGGER = logging.getLogger(__name__)

LAYER_TENSORS = ('attn_norm', 'wq', 'wk', 'wv', 'wo', 'mlp_norm', 'w_up',
                 'w_down')


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    """Shape and seed of a :py:class:`ToyDecoder`

    :var int n_layers: Number of transformer blocks
    :var int n_heads: Attention heads per block
    :var int head_dim: Per-head width, even
    :var int vocab_size: Token vocabulary, larger than every special id
    :var float rope_base: Rotary frequency base
    :var str precision: ``fp32`` or ``fp64``
    :var int seed: Unsigned 64-bit weight seed
    :var int max_paths: Rows of the path-embedding table

    """
    n_layers: int = constants.DEFAULT_N_LAYERS
    n_heads: int = constants.DEFAULT_N_HEADS
    head_dim: int = constants.DEFAULT_HEAD_DIM
    vocab_size: int = constants.DEFAULT_VOCAB_SIZE
    rope_base: float = constants.DEFAULT_ROPE_BASE
    precision: str = constants.PRECISION_FP64
    seed: int = constants.DEFAULT_SEED
    max_paths: int = constants.MAX_PATHS

    def __post_init__(self):
        for key in ('n_layers', 'n_heads', 'head_dim', 'vocab_size',
                    'max_paths'):
            if getattr(self, key) < 1:
                raise exceptions.ConfigError(key, 'must be positive')
        if self.head_dim % 2:
            raise exceptions.ConfigError('head_dim', 'must be even')
        if self.rope_base <= 0:
            raise exceptions.ConfigError('rope_base', 'must be positive')
        if self.precision not in constants.PRECISIONS:
            raise exceptions.ConfigError(
                'precision', 'expected one of {}'.format(
                    ', '.join(constants.PRECISIONS)))
        if not 0 <= self.seed <= prng.MASK64:
            raise exceptions.ConfigError('seed', 'must be an unsigned u64')
        if self.max_paths > constants.MAX_PATHS:
            raise exceptions.ConfigError(
                'max_paths', 'at most {}'.format(constants.MAX_PATHS))
        vocab = layout_.SpecialVocab.default()
        if self.vocab_size <= vocab.max_id:
            raise exceptions.ConfigError(
                'vocab_size', 'must exceed special token id {}'.format(
                    vocab.max_id))

    @property
    def model_dim(self) -> int:
        return self.n_heads * self.head_dim

    @property
    def dtype(self) -> np.dtype:
        if self.precision == constants.PRECISION_FP32:
            return np.dtype(np.float32)
        return np.dtype(np.float64)

    @property
    def rotary(self) -> rope.RotaryParams:
        return rope.RotaryParams(self.head_dim, self.rope_base)


def weight_shapes(config: ModelConfig) -> typing.Iterator[
        typing.Tuple[str, typing.Tuple[int, ...]]]:
    """Yield ``(name, shape)`` for every weight in initialisation order"""
    dim, hidden = config.model_dim, config.model_dim * constants.MLP_RATIO
    yield 'token_embedding', (config.vocab_size, dim)
    for index in range(config.n_layers):
        shapes = ((dim,), (dim, dim), (dim, dim), (dim, dim), (dim, dim),
                  (dim,), (dim, hidden), (hidden, dim))
        for name, shape in zip(LAYER_TENSORS, shapes):
            yield 'layers.{}.{}'.format(index, name), shape
    yield 'final_norm', (dim,)
    yield 'unembedding', (dim, config.vocab_size)


def ordered_dot(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``x @ w`` with the inner sum taken in ascending index order

    ``x`` has shape ``(..., k)`` and ``w`` shape ``(k, n)``.

    """
    acc = x[..., 0, None] * w[0]
    for i in range(1, w.shape[0]):
        acc = acc + x[..., i, None] * w[i]
    return acc


def ordered_sum(x: np.ndarray, axis: int) -> np.ndarray:
    """Sum along ``axis`` strictly left to right"""
    return np.take(np.add.accumulate(x, axis=axis), -1, axis=axis)


def rms_norm(h: np.ndarray, gain: np.ndarray) -> np.ndarray:
    squares = ordered_sum(h * h, -1)
    r = np.sqrt(squares / h.shape[-1] + constants.NORM_EPS)
    return h / r[..., None] * (1 + gain)


def silu(u: np.ndarray) -> np.ndarray:
    with np.errstate(over='ignore'):
        return u / (1 + np.exp(np.ascontiguousarray(-u)))


def attend(q: np.ndarray, keys: np.ndarray, values: np.ndarray,
           scale: float) -> np.ndarray:
    """Attention of one query over its visible keys

    :param numpy.ndarray q: ``(heads, head_dim)``
    :param numpy.ndarray keys: ``(t, heads, head_dim)``, ``t >= 1``
    :param numpy.ndarray values: ``(t, heads, head_dim)``
    :rtype: numpy.ndarray

    """
    scores = ordered_sum(keys * q, -1) * scale
    scores = scores - scores.max(axis=0)
    weights = np.exp(scores)
    probs = weights / ordered_sum(weights, 0)
    return ordered_sum(probs[:, :, None] * values, 0)


def log_softmax_at(logits: np.ndarray, target: int) -> float:
    """Log-probability of ``target`` under ``logits``"""
    top = logits.max()
    total = ordered_sum(np.exp(logits - top), -1)
    return float(logits[target] - top - np.log(total))


def predecessors(mask: mask_.PaMask) -> np.ndarray:
    """Row predicting each token: the last earlier token it may see

    ``-1`` marks tokens with no earlier visible token; they are never
    loss targets.

    """
    prior = np.tril(mask.bits, -1)
    result = np.full(mask.n, -1, dtype=np.int64)
    for i in range(mask.n):
        columns = np.flatnonzero(prior[i])
        if columns.size:
            result[i] = columns[-1]
    return result


@dataclasses.dataclass
class Layer:
    """Weights of one transformer block"""
    attn_norm: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    mlp_norm: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray


class PrefillResult(typing.NamedTuple):
    """Logits plus the post-LPRoPE keys and values of every layer, each
    ``(n, heads, head_dim)``"""
    logits: np.ndarray
    keys: typing.List[np.ndarray]
    values: typing.List[np.ndarray]


class ToyDecoder:
    """A seeded toy decoder with path-aware attention

    :param ModelConfig config: Model shape and precision
    :param dict tensors: Weights by name, see :py:func:`weight_shapes`
    :param paths: The path-embedding table (Default: zeros)
    :type paths: parathink.rope.PathEmbeddingTable or None
    :raises: :py:exc:`~parathink.exceptions.ShapeError`

    """
    def __init__(self, config: ModelConfig,
                 tensors: typing.Dict[str, np.ndarray],
                 paths: typing.Optional[rope.PathEmbeddingTable] = None):
        self.config = config
        self.rotary = config.rotary
        self.scale = 1.0 / math.sqrt(config.head_dim)
        dtype = config.dtype
        for name, shape in weight_shapes(config):
            if name not in tensors:
                raise exceptions.ShapeError('Missing tensor {}'.format(name))
            if tuple(tensors[name].shape) != shape:
                raise exceptions.ShapeError(
                    'Tensor {} has shape {}, expected {}'.format(
                        name, tensors[name].shape, shape))
        self.token_embedding = tensors['token_embedding'].astype(dtype)
        self.layers = [
            Layer(*(tensors['layers.{}.{}'.format(index, name)].astype(dtype)
                    for name in LAYER_TENSORS))
            for index in range(config.n_layers)]
        self.final_norm = tensors['final_norm'].astype(dtype)
        self.unembedding = tensors['unembedding'].astype(dtype)
        self.paths = paths or rope.PathEmbeddingTable.zeros(
            config.max_paths, config.head_dim)
        if self.paths.e.shape != (config.max_paths, config.head_dim):
            raise exceptions.ShapeError(
                'Path embeddings must be {}x{}'.format(
                    config.max_paths, config.head_dim))

    def __repr__(self) -> str:
        return '<ToyDecoder layers={} heads={} head_dim={} {}>'.format(
            self.config.n_layers, self.config.n_heads, self.config.head_dim,
            self.config.precision)

    def tensors(self) -> typing.Iterator[typing.Tuple[str, np.ndarray]]:
        """Yield every weight in initialisation order"""
        yield 'token_embedding', self.token_embedding
        for index, layer in enumerate(self.layers):
            for name in LAYER_TENSORS:
                yield 'layers.{}.{}'.format(index, name), getattr(layer, name)
        yield 'final_norm', self.final_norm
        yield 'unembedding', self.unembedding

    def forward_full(self, tokens: typing.Sequence[int],
                     mask: mask_.PaMask, plan: rope.PositionPlan,
                     path_embeddings: bool = True) -> np.ndarray:
        """Run the whole flattened sequence, returning ``(n, vocab)``
        logits

        With ``path_embeddings`` disabled the forward is plain RoPE.

        :raises: :py:exc:`~parathink.exceptions.ShapeError`
        :raises: :py:exc:`~parathink.exceptions.VocabError`

        """
        return self.prefill(tokens, mask, plan, path_embeddings).logits

    def prefill(self, tokens: typing.Sequence[int], mask: mask_.PaMask,
                plan: rope.PositionPlan,
                path_embeddings: bool = True) -> PrefillResult:
        """Run the whole sequence, keeping the per-layer keys and values"""
        x, keys, values = self._run(tokens, mask, plan, path_embeddings)
        return PrefillResult(self._logits(x), keys, values)

    def hidden_states(self, tokens: typing.Sequence[int],
                      mask: mask_.PaMask,
                      plan: rope.PositionPlan) -> np.ndarray:
        """Residual stream after every block, ``(n_layers + 1, n, dim)``"""
        states: typing.List[np.ndarray] = []
        self._run(tokens, mask, plan, True, states)
        return np.stack(states)

    def forward_step(self, token: int, seq: kvcache.SequenceCache, pos: int,
                     path: typing.Optional[int] = None) -> np.ndarray:
        """Decode one token against ``seq`` and append its keys and values

        ``seq`` must hold exactly the keys this token may see, in flattened
        order.

        :raises: :py:exc:`~parathink.exceptions.CacheError`
        :raises: :py:exc:`~parathink.exceptions.VocabError`

        """
        self._check_tokens([token])
        if seq.read_only:
            raise exceptions.CacheError(
                'Sequence {} is a read-only view'.format(seq.seq_id))
        if seq.last_pos is not None and pos <= seq.last_pos:
            raise exceptions.CacheError(
                'Position {} does not advance past {}'.format(
                    pos, seq.last_pos))
        emb = self._embeddings([path], True)
        x = self.token_embedding[[token]]
        new_keys, new_values = [], []
        for index, layer in enumerate(self.layers):
            q, k, v = self._project(layer, x, emb, [pos])
            cached_keys, cached_values = seq.store.gather(seq, index)
            out = attend(q[0], np.concatenate([cached_keys, k]),
                         np.concatenate([cached_values, v]), self.scale)
            x = self._mlp(layer, x, out[None])
            new_keys.append(k[0])
            new_values.append(v[0])
        seq.store.append(seq, np.stack(new_keys), np.stack(new_values), pos)
        return self._logits(x)[0]

    def loss_masked(self, tokens: typing.Sequence[int],
                    loss_mask: typing.Sequence[int], mask: mask_.PaMask,
                    plan: rope.PositionPlan) -> float:
        """Mean cross-entropy over the targets ``loss_mask`` selects

        Token ``t`` is predicted by the logits of its predecessor, see
        :py:func:`predecessors`.

        :raises: :py:exc:`~parathink.exceptions.SampleError`

        """
        targets = loss_targets(tokens, loss_mask, mask)
        logits = self.forward_full(tokens, mask, plan)
        losses = np.array([-log_softmax_at(logits[row], tokens[t])
                           for t, row in targets], dtype=np.float64)
        return float(ordered_sum(losses, 0) / len(targets))

    def _run(self, tokens, mask, plan, path_embeddings, states=None):
        tokens = list(tokens)
        if not len(tokens) == mask.n == len(plan):
            raise exceptions.ShapeError(
                'tokens ({}), mask ({}) and plan ({}) differ in length'.format(
                    len(tokens), mask.n, len(plan)))
        self._check_tokens(tokens)
        n = len(tokens)
        emb = self._embeddings(plan.path_of, path_embeddings)
        x = self.token_embedding[tokens]
        if states is not None:
            states.append(x)
        keys, values = [], []
        for layer in self.layers:
            q, k, v = self._project(layer, x, emb, plan.pos)
            out = np.empty_like(q)
            for i in range(n):
                columns = mask.visible_columns(i)
                assert columns.size, 'row {} sees nothing'.format(i)
                out[i] = attend(q[i], k[columns], v[columns], self.scale)
            x = self._mlp(layer, x, out)
            if states is not None:
                states.append(x)
            keys.append(k)
            values.append(v)
        return x, keys, values

    def _embeddings(self, path_of, enabled):
        if not enabled:
            return None
        return self.paths.gather(path_of, self.config.dtype)

    def _project(self, layer, x, emb, positions):
        shape = (x.shape[0], self.config.n_heads, self.config.head_dim)
        hn = rms_norm(x, layer.attn_norm)
        q = ordered_dot(hn, layer.wq).reshape(shape)
        k = ordered_dot(hn, layer.wk).reshape(shape)
        v = ordered_dot(hn, layer.wv).reshape(shape)
        return (rope.rotate_rows(q, positions, self.rotary),
                rope.lprope_keys(k, positions, emb, self.rotary),
                rope.lprope_values(v, emb))

    def _mlp(self, layer, x, attended):
        x = x + ordered_dot(attended.reshape(x.shape[0], -1), layer.wo)
        hn = rms_norm(x, layer.mlp_norm)
        return x + ordered_dot(silu(ordered_dot(hn, layer.w_up)),
                               layer.w_down)

    def _logits(self, x):
        return ordered_dot(rms_norm(x, self.final_norm), self.unembedding)

    def _check_tokens(self, tokens):
        for token in tokens:
            if not 0 <= token < self.config.vocab_size:
                raise exceptions.VocabError(
                    'Token {} outside vocabulary of {}'.format(
                        token, self.config.vocab_size))


def loss_targets(tokens: typing.Sequence[int],
                 loss_mask: typing.Sequence[int],
                 mask: mask_.PaMask) -> typing.List[typing.Tuple[int, int]]:
    """Return ``(target index, predicting row)`` pairs

    :raises: :py:exc:`~parathink.exceptions.SampleError`

    """
    if len(loss_mask) != len(tokens):
        raise exceptions.SampleError(
            'Loss mask has {} entries for {} tokens'.format(
                len(loss_mask), len(tokens)))
    rows = predecessors(mask)
    targets = [(t, int(rows[t])) for t in range(len(tokens))
               if loss_mask[t] and rows[t] >= 0]
    if not targets:
        raise exceptions.SampleError('Every loss target is masked')
    return targets


def init_weights(config: ModelConfig) -> ToyDecoder:
    """Draw every weight from ``U[-0.02, 0.02]`` with a splitmix64 stream
    seeded by ``config.seed``; path embeddings start at zero

    :rtype: ToyDecoder

    """
    stream = prng.SplitMix64(config.seed)
    tensors = {}
    for name, shape in weight_shapes(config):
        count = int(np.prod(shape))
        tensors[name] = stream.uniform_array(
            count, -constants.INIT_SCALE,
            constants.INIT_SCALE).reshape(shape)
    LOGGER.debug('Initialised %i tensors from seed %#x', len(tensors),
                 config.seed)
    return ToyDecoder(config, tensors)
