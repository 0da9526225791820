"""
Gradients of the masked loss with respect to the path embeddings.

:py:func:`grad_path_embeddings` runs its own dense forward pass, keeping
every intermediate, and then walks the network backwards by hand. Finite
differences over :py:meth:`~parathink.model.ToyDecoder.loss_masked` serve as
the independent check. :py:func:`train_path_embeddings` is a plain gradient
descent loop that updates nothing but the path-embedding table.

"""
import dataclasses
import logging
import typing

import numpy as np

from parathink import (constants, exceptions, mask as mask_, model as model_,
                       rope)

LOGGER = logging.getLogger(__name__)


@dataclasses.dataclass
class _LayerTape:
    x_in: np.ndarray
    q_rot: np.ndarray
    k_rot: np.ndarray
    v: np.ndarray
    probs: np.ndarray
    x_mid: np.ndarray
    u: np.ndarray


class GradientCheck(typing.NamedTuple):
    """Outcome of comparing analytic and numeric gradients"""
    ok: bool
    max_abs_error: float
    max_rel_error: float
    analytic: np.ndarray
    numeric: np.ndarray


def _rms_back(h: np.ndarray, gain: np.ndarray, dy: np.ndarray) -> np.ndarray:
    w = 1 + gain
    r = np.sqrt(np.mean(h * h, axis=-1, keepdims=True) + constants.NORM_EPS)
    inner = np.sum(dy * w * h, axis=-1, keepdims=True)
    return w * dy / r - h * inner / (h.shape[-1] * r ** 3)


def _rms(h: np.ndarray, gain: np.ndarray) -> np.ndarray:
    r = np.sqrt(np.mean(h * h, axis=-1, keepdims=True) + constants.NORM_EPS)
    return h / r * (1 + gain)


def _sigmoid(u: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-u))


def _rotate_back(grad: np.ndarray, positions, params) -> np.ndarray:
    return rope.rotate_rows(grad, [-p for p in positions], params)


def _forward(model, tokens, mask, plan):
    config = model.config
    n, heads, head_dim = len(tokens), config.n_heads, config.head_dim
    shape = (n, heads, head_dim)
    emb = model.paths.gather(plan.path_of)[:, None, :]
    x = model.token_embedding.astype(np.float64)[list(tokens)]
    hidden = np.where(mask.bits, 0.0, -np.inf)
    tapes = []
    for layer in model.layers:
        x_in = x
        a = _rms(x_in, layer.attn_norm)
        q = (a @ layer.wq).reshape(shape)
        k = (a @ layer.wk).reshape(shape) + emb
        v = (a @ layer.wv).reshape(shape) + emb
        q_rot = rope.rotate_rows(q, plan.pos, model.rotary)
        k_rot = rope.rotate_rows(k, plan.pos, model.rotary)
        scores = np.einsum('ihd,jhd->hij', q_rot, k_rot) * model.scale
        scores = scores + hidden
        scores = scores - scores.max(axis=-1, keepdims=True)
        probs = np.exp(scores)
        probs /= probs.sum(axis=-1, keepdims=True)
        out = np.einsum('hij,jhd->ihd', probs, v).reshape(n, -1)
        x_mid = x_in + out @ layer.wo
        u = _rms(x_mid, layer.mlp_norm) @ layer.w_up
        x = x_mid + (u * _sigmoid(u)) @ layer.w_down
        tapes.append(_LayerTape(x_in, q_rot, k_rot, v, probs, x_mid, u))
    return x, tapes


def grad_path_embeddings(model: model_.ToyDecoder,
                         tokens: typing.Sequence[int],
                         loss_mask: typing.Sequence[int], mask: mask_.PaMask,
                         plan: rope.PositionPlan) -> np.ndarray:
    """Analytic gradient of the masked loss for every path embedding

    :returns: Array shaped like the path-embedding table
    :raises: :py:exc:`~parathink.exceptions.SampleError`

    """
    tokens = list(tokens)
    targets = model_.loss_targets(tokens, loss_mask, mask)
    n = len(tokens)
    config = model.config
    x, tapes = _forward(model, tokens, mask, plan)

    final = _rms(x, model.final_norm)
    logits = final @ model.unembedding
    d_logits = np.zeros_like(logits)
    for t, row in targets:
        shifted = np.exp(logits[row] - logits[row].max())
        d_logits[row] += shifted / shifted.sum()
        d_logits[row, tokens[t]] -= 1.0
    d_logits /= len(targets)

    dx = _rms_back(x, model.final_norm, d_logits @ model.unembedding.T)
    d_emb = np.zeros((n, config.head_dim))
    for layer, tape in zip(reversed(model.layers), reversed(tapes)):
        sig = _sigmoid(tape.u)
        du = (dx @ layer.w_down.T) * sig * (1 + tape.u * (1 - sig))
        dx = dx + _rms_back(tape.x_mid, layer.mlp_norm, du @ layer.w_up.T)

        d_out = (dx @ layer.wo.T).reshape(n, config.n_heads, config.head_dim)
        d_probs = np.einsum('ihd,jhd->hij', d_out, tape.v)
        d_v = np.einsum('hij,ihd->jhd', tape.probs, d_out)
        d_scores = tape.probs * (
            d_probs - (tape.probs * d_probs).sum(axis=-1, keepdims=True))
        d_scores *= model.scale
        d_q = _rotate_back(
            np.einsum('hij,jhd->ihd', d_scores, tape.k_rot), plan.pos,
            model.rotary)
        d_k = _rotate_back(
            np.einsum('hij,ihd->jhd', d_scores, tape.q_rot), plan.pos,
            model.rotary)
        d_emb += d_k.sum(axis=1) + d_v.sum(axis=1)

        da = (d_q.reshape(n, -1) @ layer.wq.T +
              d_k.reshape(n, -1) @ layer.wk.T +
              d_v.reshape(n, -1) @ layer.wv.T)
        dx = dx + _rms_back(tape.x_in, layer.attn_norm, da)

    grad = np.zeros_like(model.paths.e)
    for t, path in enumerate(plan.path_of):
        if path is not None:
            grad[path - 1] += d_emb[t]
    return grad


def finite_difference(model: model_.ToyDecoder, tokens: typing.Sequence[int],
                      loss_mask: typing.Sequence[int], mask: mask_.PaMask,
                      plan: rope.PositionPlan,
                      step: float = constants.FD_STEP) -> np.ndarray:
    """Central differences of the masked loss over every path embedding
    entry the plan uses; rows of absent paths are zero

    The table is perturbed in place and restored afterwards.

    """
    table = model.paths.e
    grad = np.zeros_like(table)
    used = sorted({path for path in plan.path_of if path is not None})
    for path in used:
        for d in range(table.shape[1]):
            original = table[path - 1, d]
            try:
                table[path - 1, d] = original + step
                upper = model.loss_masked(tokens, loss_mask, mask, plan)
                table[path - 1, d] = original - step
                lower = model.loss_masked(tokens, loss_mask, mask, plan)
            finally:
                table[path - 1, d] = original
            grad[path - 1, d] = (upper - lower) / (2 * step)
    return grad


def check_path_gradients(model: model_.ToyDecoder,
                         tokens: typing.Sequence[int],
                         loss_mask: typing.Sequence[int], mask: mask_.PaMask,
                         plan: rope.PositionPlan,
                         step: float = constants.FD_STEP,
                         rel_tolerance: float = constants.FD_REL_TOLERANCE,
                         abs_floor: float = constants.FD_ABS_FLOOR
                         ) -> GradientCheck:
    """Compare :py:func:`grad_path_embeddings` with
    :py:func:`finite_difference` elementwise

    An entry passes when its absolute error is at most ``abs_floor`` or its
    relative error at most ``rel_tolerance``. ``max_rel_error`` is taken
    over every entry where either gradient is non-zero, floored or not.

    :raises: :py:exc:`~parathink.exceptions.ConfigError`

    """
    if model.config.precision != constants.PRECISION_FP64:
        raise exceptions.ConfigError(
            'precision', 'gradient checks need {}'.format(
                constants.PRECISION_FP64))
    analytic = grad_path_embeddings(model, tokens, loss_mask, mask, plan)
    numeric = finite_difference(model, tokens, loss_mask, mask, plan, step)
    error = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    relative = np.divide(error, scale, out=np.zeros_like(error),
                         where=scale > 0)
    passed = (error <= abs_floor) | (relative <= rel_tolerance)
    result = GradientCheck(
        bool(passed.all()), float(error.max()), float(relative.max()),
        analytic, numeric)
    LOGGER.debug('Gradient check ok=%s max_abs=%.3g max_rel=%.3g',
                 result.ok, result.max_abs_error, result.max_rel_error)
    return result


class TrainingSample(typing.NamedTuple):
    tokens: typing.List[int]
    loss_mask: typing.List[int]
    mask: mask_.PaMask
    plan: rope.PositionPlan


def train_path_embeddings(model: model_.ToyDecoder,
                          samples: typing.Sequence[TrainingSample],
                          learning_rate: float = 0.5,
                          epochs: int = 1) -> typing.List[float]:
    """Gradient descent on the path embeddings alone

    :returns: The loss of each sample before its update, in visiting order
    :raises: :py:exc:`ValueError` when the table is frozen

    """
    if not model.paths.trainable:
        raise ValueError('The path-embedding table is frozen')
    losses = []
    for epoch in range(epochs):
        for sample in samples:
            losses.append(model.loss_masked(*sample))
            grad = grad_path_embeddings(model, *sample)
            model.paths.e -= learning_rate * grad
        LOGGER.info('Epoch %i mean loss %.6f', epoch,
                    float(np.mean(losses[-len(samples):])))
    return losses
