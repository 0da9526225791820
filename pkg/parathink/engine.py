"""
Two-stage decoding: paths reason in parallel over a shared prefix, then a
summary reads all of them.

A :py:class:`~parathink.engine.DecodeSession` moves through the stages
``PREFILL``, ``PARALLEL_REASONING``, ``SUMMARY`` and ``DONE``.
:py:func:`~parathink.engine.start_session` prefills the prompt once and forks
one cache per path. Each :py:func:`~parathink.engine.step_parallel` call is a
lockstep round advancing every unfinished path by one token. Path ``k`` first
emits the forced ``<think k>`` and its path prompt, then samples until it
produces ``</think k>`` or runs out of budget, in which case the closing tag
is forced. Once every path is closed the caches are merged (or recomputed
when reuse is off) and :py:func:`~parathink.engine.step_summary` decodes the
summary after a forced ``<summary>``.

Sequential mode decodes the same tagged structure as one causal chain with
consecutive position ids. Replicated mode runs independent single-path
sequential decodes and votes over their boxed answers.

"""
from __future__ import annotations

import collections
import concurrent.futures
import dataclasses
import enum
import logging
import typing

import numpy as np

from parathink import (constants, exceptions, kvcache, layout as layout_,
                       mask as mask_, model as model_, prng, rope)

LOGGER = logging.getLogger(__name__)

SUMMARY_STREAM = 0
"""Sampling stream index of the summary; paths use their own index"""


class Stage(enum.Enum):
    PREFILL = 'prefill'
    PARALLEL_REASONING = 'parallel_reasoning'
    SUMMARY = 'summary'
    DONE = 'done'


@dataclasses.dataclass(frozen=True)
class Sampling:
    """Token selection rule

    :var str method: ``greedy`` or ``top_k``
    :var int k: Candidates kept by ``top_k``
    :var float temperature: Softmax temperature of ``top_k``
    :var int seed: Session seed; path ``k`` samples from
        ``derive_seed(seed, k)``

    """
    method: str = constants.SAMPLING_GREEDY
    k: int = 8
    temperature: float = 1.0
    seed: int = constants.DEFAULT_SEED

    def __post_init__(self):
        if self.method not in (constants.SAMPLING_GREEDY,
                               constants.SAMPLING_TOP_K):
            raise exceptions.ConfigError(
                'sampling', 'unknown method {!r}'.format(self.method))
        if self.k < 1:
            raise exceptions.ConfigError('top_k', 'must be positive')
        if self.temperature <= 0:
            raise exceptions.ConfigError('temperature', 'must be positive')
        if not 0 <= self.seed <= prng.MASK64:
            raise exceptions.ConfigError('seed', 'must be an unsigned u64')

    def stream(self, index: int) -> prng.SplitMix64:
        return prng.SplitMix64(prng.derive_seed(self.seed, index))


@dataclasses.dataclass(frozen=True)
class SessionConfig:
    """How a prompt is decoded

    :var str mode: ``parallel``, ``sequential`` or ``replicated``
    :var int n_paths: Reasoning paths, or replicas in replicated mode
    :var int max_path_tokens: Sampled tokens per path before ``</think k>``
        is forced
    :var int max_summary_tokens: Sampled summary tokens before
        ``</summary>`` is forced
    :var Sampling sampling: Token selection rule
    :var bool reuse_kv: Merge path caches for the summary instead of
        recomputing them
    :var int block_size: Cache block slots
    :var int workers: Threads evaluating the paths of a round

    """
    mode: str = constants.MODE_PARALLEL
    n_paths: int = 4
    max_path_tokens: int = constants.DEFAULT_MAX_PATH_TOKENS
    max_summary_tokens: int = constants.DEFAULT_MAX_SUMMARY_TOKENS
    sampling: Sampling = dataclasses.field(default_factory=Sampling)
    reuse_kv: bool = True
    block_size: int = constants.BLOCK_SIZE
    workers: int = 1

    def __post_init__(self):
        if self.mode not in constants.MODES:
            raise exceptions.ConfigError(
                'mode',
                'expected one of {}'.format(', '.join(constants.MODES)))
        if not 1 <= self.n_paths <= constants.MAX_PATHS:
            raise exceptions.ConfigError(
                'n_paths', 'must be between 1 and {}'.format(
                    constants.MAX_PATHS))
        for key in ('max_path_tokens', 'max_summary_tokens', 'block_size',
                    'workers'):
            if getattr(self, key) < 1:
                raise exceptions.ConfigError(key, 'must be at least 1')

    @property
    def positions(self) -> str:
        """Position scheme implied by the mode"""
        if self.mode == constants.MODE_PARALLEL:
            return constants.POSITIONS_SHARED
        return constants.POSITIONS_DISJOINT


@dataclasses.dataclass(eq=False)
class SegmentState:
    """Decoding state of one path or of the summary"""
    path: typing.Optional[int]
    close: int
    budget: int
    stream: prng.SplitMix64
    pending: typing.Deque[int]
    seq: typing.Optional[kvcache.SequenceCache] = None
    pos: int = 0
    tokens: typing.List[int] = dataclasses.field(default_factory=list)
    forced: typing.List[bool] = dataclasses.field(default_factory=list)
    logits: typing.List[np.ndarray] = dataclasses.field(
        default_factory=list, repr=False)
    sampled: int = 0
    finished: bool = False


@dataclasses.dataclass
class Transcript:
    """Everything a session emitted

    ``paths[k - 1]`` runs from ``<think k>`` to ``</think k>`` and
    ``summary`` from ``<summary>`` to ``</summary>``. Engine logits are kept
    in memory for verification and are not serialized.

    """
    prompt: typing.List[int]
    paths: typing.List[typing.List[int]]
    summary: typing.List[int]
    path_forced: typing.List[typing.List[bool]]
    summary_forced: typing.List[bool]
    plan: rope.PositionPlan
    config: SessionConfig
    stats: kvcache.CacheStats
    path_logits: typing.List[typing.List[np.ndarray]] = dataclasses.field(
        default_factory=list, repr=False)
    summary_logits: typing.List[np.ndarray] = dataclasses.field(
        default_factory=list, repr=False)

    @property
    def layout(self) -> layout_.SegmentLayout:
        return layout_.SegmentLayout(
            len(self.prompt), [len(path) for path in self.paths],
            len(self.summary))

    @property
    def tokens(self) -> typing.List[int]:
        return layout_.render_tagged(
            layout_.Segments(self.prompt, self.paths, self.summary))

    @property
    def answer(self) -> typing.Optional[str]:
        return extract_boxed_answer(self.summary)


class VerifyResult(typing.NamedTuple):
    """Outcome of replaying a transcript through the monolithic forward

    ``max_abs_diff`` is ``None`` when the transcript carries no engine
    logits; ``mismatches`` lists flat indices of disagreeing tokens.

    """
    ok: bool
    max_abs_diff: typing.Optional[float]
    mismatches: typing.List[int]


class ReplicatedResult(typing.NamedTuple):
    transcripts: typing.List[Transcript]
    answer: typing.Optional[str]
    stats: kvcache.CacheStats


class DecodeSession:
    """State machine of one two-stage decode

    Use :py:func:`start_session` rather than creating it directly.

    """
    def __init__(self, model: model_.ToyDecoder, config: SessionConfig,
                 prompt: typing.Sequence[int],
                 path_prompts: typing.Sequence[typing.Sequence[int]],
                 vocab: layout_.SpecialVocab,
                 store: typing.Optional[kvcache.BlockStore] = None):
        self.model = model
        self.config = config
        self.vocab = vocab
        self.prompt = list(prompt)
        self.store = store or kvcache.BlockStore.for_model(
            model, block_size=config.block_size)
        self.stage = Stage.PREFILL
        self.shared: typing.Optional[kvcache.SequenceCache] = None
        self.paths = [
            SegmentState(
                k, vocab.think_close(k), config.max_path_tokens,
                config.sampling.stream(k),
                collections.deque([vocab.think_open(k), *path_prompts[k - 1]]))
            for k in range(1, len(path_prompts) + 1)]
        self.summary = SegmentState(
            None, vocab.summary_close, config.max_summary_tokens,
            config.sampling.stream(SUMMARY_STREAM),
            collections.deque([vocab.summary_open]))
        self._sequences: typing.List[kvcache.SequenceCache] = []
        self._pool = None
        if config.workers > 1:
            self._pool = concurrent.futures.ThreadPoolExecutor(
                max_workers=config.workers)

    def __repr__(self) -> str:
        return '<DecodeSession {} {} paths={}>'.format(
            self.config.mode, self.stage.value, len(self.paths))

    @property
    def sequential(self) -> bool:
        return self.config.mode != constants.MODE_PARALLEL

    def transition(self, stage: Stage) -> None:
        order = list(Stage)
        previous = order[max(order.index(stage) - 1, 0)]
        if previous != self.stage or stage == order[0]:
            raise exceptions.StageError(previous.value, self.stage.value)
        LOGGER.debug('Session stage %s -> %s', self.stage.value, stage.value)
        self.stage = stage

    def prefill(self) -> None:
        self.shared = self.store.prefill_shared(
            self.model, self.prompt, rope.PositionPlan(
                range(len(self.prompt)), [None] * len(self.prompt)))
        self._sequences.append(self.shared)
        if self.sequential:
            for state in self.paths:
                state.seq = self.shared
        else:
            for state, seq in zip(self.paths, self.store.fork(
                    self.shared, len(self.paths))):
                state.seq = seq
                self._sequences.append(seq)
        for state in self.paths:
            state.pos = len(self.prompt)
        self.transition(Stage.PARALLEL_REASONING)

    def active_paths(self) -> typing.List[SegmentState]:
        """Paths advancing in the next round; a sequential chain has at
        most one, continuing the position ids of the path before it"""
        pending = [state for state in self.paths if not state.finished]
        if not self.sequential or not pending:
            return pending
        current = pending[0]
        index = self.paths.index(current)
        if index and not current.tokens:
            current.pos = self.paths[index - 1].pos
        return [current]

    def round(self, active: typing.Sequence[SegmentState]) -> None:
        """Advance ``active`` by one token each; returns once all are done"""
        if self._pool is None or len(active) < 2:
            for state in active:
                self.advance(state)
            return
        futures = [self._pool.submit(self.advance, state) for state in active]
        for future in futures:
            future.result()

    def advance(self, state: SegmentState) -> None:
        """Emit and feed the next token of one segment"""
        if state.pending:
            token, forced = state.pending.popleft(), True
        elif state.sampled >= state.budget:
            token, forced = state.close, True
            LOGGER.warning('Budget of %i tokens exhausted, forcing %s',
                           state.budget, self.vocab.name(state.close))
        else:
            token = sample(state.logits[-1], self.banned(state),
                           self.config.sampling, state.stream)
            state.sampled += 1
            forced = False
        state.tokens.append(token)
        state.forced.append(forced)
        if token == state.close:
            state.finished = True
        if token != self.vocab.summary_close:
            state.logits.append(self.model.forward_step(
                token, state.seq, state.pos, state.path))
            state.pos += 1

    def banned(self, state: SegmentState) -> typing.FrozenSet[int]:
        return self.vocab.special_ids - {state.close}

    def enter_summary(self) -> None:
        self.transition(Stage.SUMMARY)
        if self.sequential:
            self.summary.pos = self.paths[-1].pos
            if self.config.reuse_kv:
                self.summary.seq = self.shared
                return
            tokens = self.prompt + [t for s in self.paths for t in s.tokens]
            plan = rope.PositionPlan(range(len(tokens)), self._path_of())
            mask = mask_.build_causal_mask(len(tokens))
        else:
            self.summary.pos = max(state.pos for state in self.paths)
            if self.config.reuse_kv:
                view = self.store.merge_for_summary(
                    self.shared, [state.seq for state in self.paths])
                self.summary.seq = self.store.continue_from(view)
                self._sequences.extend([view, self.summary.seq])
                return
            layout = layout_.SegmentLayout(
                len(self.prompt), [len(s.tokens) for s in self.paths])
            tokens = self.prompt + [t for s in self.paths for t in s.tokens]
            plan = rope.assign_positions(layout)
            mask = mask_.build_pa_mask(layout)
        self.summary.seq = self.store.reprefill(self.model, tokens, mask, plan)
        self._sequences.append(self.summary.seq)

    def finish(self) -> Transcript:
        """Release every cache and return the transcript

        :raises: :py:exc:`~parathink.exceptions.StageError`

        """
        if self.stage != Stage.DONE:
            raise exceptions.StageError(Stage.DONE.value, self.stage.value)
        self.close()
        layout = layout_.SegmentLayout(
            len(self.prompt), [len(s.tokens) for s in self.paths],
            len(self.summary.tokens))
        transcript = Transcript(
            self.prompt, [s.tokens for s in self.paths], self.summary.tokens,
            [s.forced for s in self.paths], self.summary.forced,
            rope.assign_positions_for(layout, self.config.positions),
            self.config, self.store.stats(), [s.logits for s in self.paths],
            self.summary.logits)
        LOGGER.info('Session done: %i paths, %i summary tokens, %r',
                    len(self.paths), len(self.summary.tokens),
                    transcript.stats)
        return transcript

    def close(self) -> None:
        """Release the caches and worker threads of the session; safe to
        call more than once"""
        for seq in self._sequences:
            if not seq.released:
                self.store.release(seq)
        self._sequences = []
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def _path_of(self):
        path_of = [None] * len(self.prompt)
        for state in self.paths:
            path_of.extend([state.path] * len(state.tokens))
        return path_of


def sample(logits: np.ndarray, banned: typing.AbstractSet[int],
           sampling: Sampling, stream: prng.SplitMix64) -> int:
    """Choose the next token from ``logits``, never one in ``banned``

    Greedy takes the arg max with ties to the lowest id. Top-k keeps the
    ``k`` best candidates in stable order, applies a tempered softmax and
    draws once from ``stream``.

    """
    scores = logits.astype(np.float64)
    scores[np.fromiter((t for t in banned if t < scores.size), np.intp)] = (
        -np.inf)
    if sampling.method == constants.SAMPLING_GREEDY:
        return int(np.argmax(scores))
    order = np.argsort(-scores, kind='stable')
    order = order[np.isfinite(scores[order])][:sampling.k]
    top = scores[order] / sampling.temperature
    weights = np.exp(top - top[0])
    return int(order[stream.choice(weights.tolist())])


def start_session(model: model_.ToyDecoder, config: SessionConfig,
                  prompt_tokens: typing.Sequence[int],
                  path_prompts: typing.Optional[
                      typing.Sequence[typing.Sequence[int]]] = None,
                  vocab: typing.Optional[layout_.SpecialVocab] = None,
                  store: typing.Optional[kvcache.BlockStore] = None
                  ) -> DecodeSession:
    """Prefill the prompt and fork the paths

    :raises: :py:exc:`~parathink.exceptions.LayoutError`
    :raises: :py:exc:`~parathink.exceptions.VocabError`

    """
    vocab = vocab or layout_.SpecialVocab.default()
    vocab.validate(model.config.vocab_size)
    if config.mode == constants.MODE_REPLICATED:
        raise exceptions.ConfigError(
            'mode', 'replicated sessions are run by run_replicated')
    if config.mode == constants.MODE_PARALLEL and not prompt_tokens:
        raise exceptions.LayoutError('Parallel mode needs a prompt')
    if path_prompts is None:
        path_prompts = [[] for _ in range(config.n_paths)]
    if len(path_prompts) != config.n_paths:
        raise exceptions.LayoutError(
            '{} path prompts given for {} paths'.format(
                len(path_prompts), config.n_paths))
    structural = vocab.special_ids - {vocab.user, vocab.assistant, vocab.pad}
    for tokens in [prompt_tokens, *path_prompts]:
        for token in tokens:
            if token in structural:
                raise exceptions.LayoutError(
                    'Prompt carries structural token {}'.format(
                        vocab.name(token)))
    session = DecodeSession(model, config, prompt_tokens, path_prompts,
                            vocab, store)
    try:
        session.prefill()
    except Exception:
        session.close()
        raise
    return session


def step_parallel(session: DecodeSession,
                  order: typing.Optional[typing.Sequence[int]] = None
                  ) -> DecodeSession:
    """Advance every unfinished path by one token

    When all paths are finished the call moves the session to the summary
    stage instead. ``order`` permutes the path indices visited in a round.

    :raises: :py:exc:`~parathink.exceptions.StageError`

    """
    if session.stage != Stage.PARALLEL_REASONING:
        raise exceptions.StageError(
            Stage.PARALLEL_REASONING.value, session.stage.value)
    active = session.active_paths()
    if not active:
        session.enter_summary()
        return session
    if order is not None:
        rank = {path: index for index, path in enumerate(order)}
        active.sort(key=lambda state: rank[state.path])
    session.round(active)
    return session


def step_summary(session: DecodeSession) -> DecodeSession:
    """Advance the summary by one token

    :raises: :py:exc:`~parathink.exceptions.StageError`

    """
    if session.stage != Stage.SUMMARY:
        raise exceptions.StageError(Stage.SUMMARY.value, session.stage.value)
    session.advance(session.summary)
    if session.summary.finished:
        session.transition(Stage.DONE)
    return session


def run(model: model_.ToyDecoder, config: SessionConfig,
        prompt_tokens: typing.Sequence[int],
        path_prompts: typing.Optional[
            typing.Sequence[typing.Sequence[int]]] = None,
        vocab: typing.Optional[layout_.SpecialVocab] = None,
        store: typing.Optional[kvcache.BlockStore] = None) -> Transcript:
    """Decode a prompt end to end in parallel or sequential mode

    :rtype: Transcript

    """
    session = start_session(
        model, config, prompt_tokens, path_prompts, vocab, store)
    try:
        while session.stage == Stage.PARALLEL_REASONING:
            step_parallel(session)
        while session.stage == Stage.SUMMARY:
            step_summary(session)
        return session.finish()
    finally:
        session.close()


def run_replicated(model: model_.ToyDecoder, config: SessionConfig,
                   prompt_tokens: typing.Sequence[int],
                   path_prompt: typing.Sequence[int] = (),
                   vocab: typing.Optional[layout_.SpecialVocab] = None
                   ) -> ReplicatedResult:
    """Run ``config.n_paths`` independent single-path decodes and vote

    Replica ``r`` samples with seed ``derive_seed(seed, r)``. All replicas
    share one block store, so the shared prompt is computed once per
    replica.

    """
    store = kvcache.BlockStore.for_model(model, block_size=config.block_size)
    transcripts = []
    for replica in range(config.n_paths):
        sampling = dataclasses.replace(
            config.sampling,
            seed=prng.derive_seed(config.sampling.seed, replica))
        single = dataclasses.replace(
            config, mode=constants.MODE_SEQUENTIAL, n_paths=1,
            sampling=sampling)
        transcripts.append(
            run(model, single, prompt_tokens, [list(path_prompt)], vocab,
                store))
    answer = majority_vote([t.answer for t in transcripts])
    LOGGER.info('Replicated %i decodes, majority answer %r',
                len(transcripts), answer)
    return ReplicatedResult(transcripts, answer, store.stats())


def majority_vote(answers: typing.Sequence[typing.Optional[str]]
                  ) -> typing.Optional[str]:
    """Most frequent answer, ties going to the earliest; ``None`` answers
    do not vote"""
    counts = collections.Counter(a for a in answers if a is not None)
    best = None
    for answer in answers:
        if answer is not None and (best is None or
                                   counts[answer] > counts[best]):
            best = answer
    return best


def extract_boxed_answer(tokens: typing.Sequence[int],
                         vocab: typing.Optional[layout_.SpecialVocab] = None
                         ) -> typing.Optional[str]:
    """Return the text inside the last ``\\boxed{...}`` of the byte tokens"""
    vocab = vocab or layout_.SpecialVocab.default()
    data = bytes(t for t in tokens if 0 <= t < constants.BYTE_VOCAB)
    start = data.rfind(vocab.boxed_open)
    if start < 0:
        return None
    start += len(vocab.boxed_open)
    end = data.find(vocab.boxed_close, start)
    if end < 0:
        return None
    return data[start:end].decode('utf-8', errors='replace')


def verify_transcript(model: model_.ToyDecoder, transcript: Transcript,
                      vocab: typing.Optional[layout_.SpecialVocab] = None
                      ) -> VerifyResult:
    """Replay a transcript through the monolithic forward

    Every sampled token must equal the sampler's choice on the oracle
    logits, drawing from freshly seeded streams. When engine logits are
    present they are compared row by row; fp64 requires exact equality and
    fp32 a maximum absolute difference of ``FP32_TOLERANCE``.

    :raises: :py:exc:`~parathink.exceptions.TagError`

    """
    vocab = vocab or layout_.SpecialVocab.default()
    tokens = transcript.tokens
    layout = layout_.layout_from_tagged_tokens(tokens, vocab)
    if layout != transcript.layout:
        raise exceptions.TagError(
            0, 'segments do not match the tagged structure')
    config = transcript.config
    mask = mask_.build_mask_for(layout, config.mode)
    plan = rope.assign_positions_for(layout, config.positions)
    logits = model.forward_full(tokens, mask, plan)

    segments = [(layout.path_start(k), transcript.paths[k - 1],
                 transcript.path_forced[k - 1], vocab.think_close(k),
                 config.sampling.stream(k))
                for k in range(1, layout.n_paths + 1)]
    segments.append((layout.summary_start, transcript.summary,
                     transcript.summary_forced, vocab.summary_close,
                     config.sampling.stream(SUMMARY_STREAM)))
    mismatches = []
    for start, emitted, forced, close, stream in segments:
        banned = vocab.special_ids - {close}
        for offset, (token, was_forced) in enumerate(zip(emitted, forced)):
            if was_forced:
                continue
            flat = start + offset
            choice = sample(logits[flat - 1], banned, config.sampling, stream)
            if choice != token:
                mismatches.append(flat)

    rows = [(layout.path_start(k + 1), engine)
            for k, engine in enumerate(transcript.path_logits)]
    rows.append((layout.summary_start, transcript.summary_logits))
    diff = None
    for start, engine in rows:
        for offset, row in enumerate(engine):
            delta = float(np.max(np.abs(
                logits[start + offset].astype(np.float64) - row)))
            diff = delta if diff is None else max(diff, delta)
    tolerance = (0.0 if model.config.precision == constants.PRECISION_FP64
                 else constants.FP32_TOLERANCE)
    ok = not mismatches and (diff is None or diff <= tolerance)
    if mismatches:
        LOGGER.warning('Transcript disagrees with the oracle at %r',
                       mismatches)
    return VerifyResult(ok, diff, mismatches)
