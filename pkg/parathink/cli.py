"""
The ``parathink`` command.

Subcommands:

- ``demo`` decodes one prompt and prints every path, the summary and the
  cache counters
- ``verify`` replays seeded sessions through the monolithic forward
- ``mask`` writes the attention mask of a layout as a PGM image
- ``grad`` compares analytic path-embedding gradients with finite
  differences
- ``dataset`` emits synthetic partitioned reasoning samples as JSON lines
- ``bench`` prints the cache counters of every decode mode

Exit status is ``0`` on success, ``1`` when a check fails and ``2`` for
usage or configuration errors.

"""
import argparse
import collections
import dataclasses
import logging
import os
from os import path
import sys
import typing

from parathink import (checkpoint, config as config_, constants, converters,
                       datakit, engine, exceptions, gradients,
                       layout as layout_, mask as mask_, model as model_,
                       prng, rope)

LOGGER = logging.getLogger(__name__)
LOGGING_FORMAT = '[%(asctime)-15s] %(levelname)-8s %(message)s'

VERIFY_PATHS = (1, 2, 4)
MAX_RANDOM_PROMPT = 32
GRAD_SHARED_LEN = 4
GRAD_PATH_LEN = 3
GRAD_SUMMARY_LEN = 2
GRID_SIDE = 4
GRID_LETTERS = 'abcd'


def add_logging_options_to_parser(parser):
    """Add logging options to the parser.

    :param argparse.ArgumentParser parser: The parser to add the args to

    """
    group = parser.add_argument_group(title='Logging Options')
    group.add_argument(
        '-L', '--log-file', action='store',
        help='Log to the specified filename. If not specified, '
        'log output is sent to STDERR')
    group.add_argument(
        '-v', '--verbose', action='store_true',
        help='Increase output verbosity')
    group.add_argument(
        '--debug', action='store_true', help='Extra verbose debug logging')


def add_config_options_to_parser(parser):
    """Add the options every subcommand shares.

    Flags left unset do not override the configuration file.

    :param argparse.ArgumentParser parser: The parser to add the args to

    """
    group = parser.add_argument_group(title='Configuration Options')
    group.add_argument(
        '--config', action='store', help='key = value configuration file')
    group.add_argument(
        '--seed', action='store', type=_u64, help='session seed')
    group.add_argument(
        '--mode', action='store', choices=constants.MODES,
        help='decode mode')
    group.add_argument(
        '--paths', action='store', type=int, dest='n_paths',
        help='reasoning paths, or replicas in replicated mode')
    group.add_argument(
        '--precision', action='store', choices=constants.PRECISIONS,
        help='model precision')
    group.add_argument(
        '--no-reuse', action='store_const', const=False, dest='reuse_kv',
        help='recompute the summary prefix instead of reusing path caches')
    group.add_argument(
        '--checkpoint', action='store', help='load the model from a file')
    group.add_argument(
        '--out', action='store', help='write the output to this file')


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    add_config_options_to_parser(common)
    add_logging_options_to_parser(common)

    parser = argparse.ArgumentParser(
        prog='parathink',
        description='Parallel reasoning paths over a shared prefix')
    commands = parser.add_subparsers(dest='command', metavar='COMMAND')
    commands.required = True

    demo = commands.add_parser(
        'demo', parents=[common], help='decode one prompt')
    demo.add_argument('--prompt', action='store', help='prompt text')

    verify = commands.add_parser(
        'verify', parents=[common],
        help='check seeded sessions against the monolithic forward')
    verify.add_argument(
        '--sessions', action='store', type=int, help='sessions to run')
    verify.add_argument(
        '--inject-fault', action='store_const', const=True,
        help='corrupt one engine logit so that the check fails')

    mask = commands.add_parser(
        'mask', parents=[common], help='write a mask as a PGM image')
    mask.add_argument(
        '--shared', action='store', type=int, help='shared context length')
    mask.add_argument(
        '--path-lens', action='store', help='comma separated path lengths')
    mask.add_argument(
        '--summary', action='store', type=int, help='summary length')

    grad = commands.add_parser(
        'grad', parents=[common], help='check path-embedding gradients')
    grad.add_argument(
        '--seeds', action='store', type=int, help='seeded checks to run')

    dataset = commands.add_parser(
        'dataset', parents=[common], help='emit synthetic samples')
    dataset.add_argument(
        '--count', action='store', type=int, help='samples to emit')

    bench = commands.add_parser(
        'bench', parents=[common], help='compare cache counters by mode')
    bench.add_argument('--prompt', action='store', help='prompt text')
    return parser


def configure_logging(args):
    """Configure Python logging.

    :param argparse.namespace args: The parsed cli arguments

    """
    level = logging.WARNING
    if args.verbose:
        level = logging.INFO
    elif args.debug:
        level = logging.DEBUG
    filename = args.log_file if args.log_file else None
    if filename:
        filename = path.abspath(filename)
        if not path.exists(path.dirname(filename)):
            filename = None
    logging.basicConfig(level=level, filename=filename,
                        format=LOGGING_FORMAT)


def _u64(value: str) -> int:
    number = int(value, 0)
    if not 0 <= number <= prng.MASK64:
        raise argparse.ArgumentTypeError('not an unsigned 64-bit integer')
    return number


def _fmt(value: float) -> str:
    return constants.FLOAT_FMT.format(value)


def _write(line: str = '') -> None:
    sys.stdout.write(line + '\n')


def _stats_line(stats) -> str:
    return ' '.join('{}={}'.format(key, value)
                    for key, value in dataclasses.asdict(stats).items())


def _model(settings: config_.CliConfig) -> model_.ToyDecoder:
    if settings.checkpoint:
        return checkpoint.load(settings.checkpoint)
    return model_.init_weights(settings.model_config())


def _prompt(text: str, vocab: layout_.SpecialVocab) -> typing.List[int]:
    tokenizer = datakit.ByteTokenizer(vocab)
    return [vocab.user, *tokenizer.encode(text), vocab.assistant]


def _random_prompt(seed: int,
                   vocab: layout_.SpecialVocab) -> typing.List[int]:
    stream = prng.SplitMix64(seed)
    length = 1 + stream.next_u64() % MAX_RANDOM_PROMPT
    body = [stream.next_u64() % constants.BYTE_VOCAB for _ in range(length)]
    return [vocab.user, *body, vocab.assistant]


def _print_transcript(transcript: engine.Transcript,
                      tokenizer: datakit.ByteTokenizer) -> None:
    for k, tokens in enumerate(transcript.paths, 1):
        _write('path {} {}'.format(k, ' '.join(str(t) for t in tokens)))
        _write('  {!r}'.format(tokenizer.decode(tokens)))
    _write('summary {}'.format(' '.join(str(t) for t in transcript.summary)))
    _write('  {!r}'.format(tokenizer.decode(transcript.summary)))
    _write('answer {}'.format(transcript.answer))


def cmd_demo(settings: config_.CliConfig) -> int:
    """Decode one prompt and print the transcript and cache counters"""
    vocab = layout_.SpecialVocab.default()
    tokenizer = datakit.ByteTokenizer(vocab)
    model = _model(settings)
    prompt = _prompt(settings.prompt, vocab)
    session = settings.session_config()
    _write('mode {} paths {} shared_len {}'.format(
        session.mode, session.n_paths, len(prompt)))
    if session.mode == constants.MODE_REPLICATED:
        result = engine.run_replicated(model, session, prompt, (), vocab)
        for replica, transcript in enumerate(result.transcripts):
            _write('replica {}'.format(replica))
            _print_transcript(transcript, tokenizer)
        _write('majority {}'.format(result.answer))
        _write('stats {}'.format(_stats_line(result.stats)))
        transcripts = result.transcripts
    else:
        transcript = engine.run(model, session, prompt, vocab=vocab)
        _print_transcript(transcript, tokenizer)
        _write('stats {}'.format(_stats_line(transcript.stats)))
        transcripts = [transcript]
    if settings.out:
        converter = converters.TranscriptConverter()
        with open(settings.out, 'w', encoding='utf-8') as handle:
            for transcript in transcripts:
                handle.write(converter.dump(transcript) + '\n')
        LOGGER.info('Wrote %i transcripts to %s', len(transcripts),
                    settings.out)
    return constants.EXIT_OK


def _inject_fault(transcript: engine.Transcript) -> None:
    LOGGER.warning('Injecting a fault into the summary logits')
    row = transcript.summary_logits[0].copy()
    row[0] += 1.0
    transcript.summary_logits[0] = row


def cmd_verify(settings: config_.CliConfig) -> int:
    """Replay seeded sessions through the monolithic forward

    Session ``i`` uses ``derive_seed(seed, i)`` and cycles through 1, 2 and
    4 paths.

    """
    if settings.mode == constants.MODE_REPLICATED:
        raise exceptions.ConfigError(
            'mode', 'verify runs parallel or sequential sessions')
    vocab = layout_.SpecialVocab.default()
    model = _model(settings)
    failed, worst = [], 0.0
    for index in range(settings.sessions):
        seed = prng.derive_seed(settings.seed, index)
        n_paths = VERIFY_PATHS[index % len(VERIFY_PATHS)]
        session = settings.session_config(seed=seed, n_paths=n_paths)
        transcript = engine.run(
            model, session, _random_prompt(seed, vocab), vocab=vocab)
        if settings.inject_fault and index == 0:
            _inject_fault(transcript)
        result = engine.verify_transcript(model, transcript, vocab)
        diff = result.max_abs_diff or 0.0
        worst = max(worst, diff)
        _write('seed {:#018x} paths {} ok {} diff {}'.format(
            seed, n_paths, str(result.ok).lower(), _fmt(diff)))
        if not result.ok:
            failed.append(seed)
    _write('max_abs_diff {}'.format(_fmt(worst)))
    if failed:
        sys.stderr.write('verify failed for seed {:#018x} ({} of {})\n'.format(
            failed[0], len(failed), settings.sessions))
        return constants.EXIT_CHECK_FAILED
    return constants.EXIT_OK


def cmd_mask(settings: config_.CliConfig) -> int:
    """Write the mask of the configured layout as a PGM image"""
    if not settings.out:
        raise exceptions.ConfigError('out', 'mask needs an output file')
    layout = layout_.SegmentLayout(
        settings.shared, tuple(settings.path_lengths()), settings.summary)
    mask = mask_.build_mask_for(layout, settings.mode)
    with open(settings.out, 'wb') as handle:
        handle.write(mask_.mask_to_pgm(mask))
    _write('n {} popcount {}'.format(mask.n, mask.popcount()))
    return constants.EXIT_OK


def _gradient_case(settings: config_.CliConfig, seed: int):
    stream = prng.SplitMix64(seed)
    model = model_.init_weights(dataclasses.replace(
        settings.model_config(), precision=constants.PRECISION_FP64,
        seed=seed))
    table = model.paths.e
    model.paths = rope.PathEmbeddingTable(
        stream.uniform_array(table.size, -0.5, 0.5).reshape(table.shape))
    layout = layout_.SegmentLayout(
        GRAD_SHARED_LEN, (GRAD_PATH_LEN,) * settings.n_paths,
        GRAD_SUMMARY_LEN)
    tokens = [stream.next_u64() % constants.BYTE_VOCAB
              for _ in range(layout.total)]
    loss_mask = [0] * layout.shared_len + [1] * (
        layout.total - layout.shared_len)
    return (model, tokens, loss_mask, mask_.build_pa_mask(layout),
            rope.assign_positions(layout))


def cmd_grad(settings: config_.CliConfig) -> int:
    """Check analytic path-embedding gradients on seeded random layouts"""
    failed = []
    for index in range(settings.seeds):
        seed = prng.derive_seed(settings.seed, index)
        result = gradients.check_path_gradients(
            *_gradient_case(settings, seed))
        _write('seed {:#018x} ok {} max_abs {} max_rel {}'.format(
            seed, str(result.ok).lower(), _fmt(result.max_abs_error),
            _fmt(result.max_rel_error)))
        if not result.ok:
            failed.append(seed)
    if failed:
        sys.stderr.write('gradient check failed for seed {:#018x}\n'.format(
            failed[0]))
        return constants.EXIT_CHECK_FAILED
    return constants.EXIT_OK


def synthetic_sample(seed: int, index: int,
                     vocab: layout_.SpecialVocab) -> datakit.SftSample:
    """A grid of letters split over four paths

    Even samples count a letter with scan-order paths, odd ones name the
    most common letter with one quadrant per path.

    """
    stream = prng.SplitMix64(prng.derive_seed(seed, index))
    grid = datakit.TokenGrid(GRID_SIDE, GRID_SIDE)
    cells = [ord(GRID_LETTERS[stream.next_u64() % len(GRID_LETTERS)])
             for _ in range(grid.size)]
    if index % 2 == 0:
        kind = datakit.TaskKind.COUNTING
        letter = GRID_LETTERS[stream.next_u64() % len(GRID_LETTERS)]
        question = 'How many cells show the letter {}?'.format(letter)
        answer = str(cells.count(ord(letter)))
    else:
        kind = datakit.TaskKind.PERCEPTION
        question = 'Which letter appears most often?'
        counts = collections.Counter(cells)
        answer = chr(max(sorted(counts), key=lambda c: counts[c]))
    strategy = datakit.select_strategy(kind)
    if strategy == datakit.Strategy.SCAN_ORDER:
        parts = [datakit.scan_tokens(cells, grid, order)
                 for order in datakit.ScanOrder]
    else:
        parts = [datakit.region_tokens(cells, grid, region)
                 for region in datakit.block_partition(grid)]
    texts = ['{} {}'.format(instruction, bytes(part).decode('ascii'))
             for instruction, part in zip(
                 datakit.path_instructions(strategy), parts)]
    return datakit.build_sample(question, texts, answer, vocab)


def cmd_dataset(settings: config_.CliConfig) -> int:
    """Emit synthetic samples as JSON lines"""
    vocab = layout_.SpecialVocab.default()
    samples = (synthetic_sample(settings.seed, index, vocab)
               for index in range(settings.count))
    if not settings.out:
        datakit.emit_records(samples, sys.stdout)
        return constants.EXIT_OK
    with open(settings.out, 'w', encoding='utf-8') as handle:
        count = datakit.emit_records(samples, handle)
    _write('wrote {} records to {}'.format(count, settings.out))
    return constants.EXIT_OK


def cmd_bench(settings: config_.CliConfig) -> int:
    """Print the cache counters of every decode mode on one prompt

    Fails when turning cache reuse off changes a transcript.

    """
    vocab = layout_.SpecialVocab.default()
    model = _model(settings)
    prompt = _prompt(settings.prompt, vocab)
    _write('shared_len {} paths {}'.format(len(prompt), settings.n_paths))
    _write('{:<12} {:<6} {:>14} {:>22} {:>12}'.format(
        'mode', 'reuse', 'prefill_tokens', 'summary_prefill_tokens',
        'decode_steps'))
    tokens = {}
    for mode in constants.MODES:
        for reuse in (True, False):
            if mode == constants.MODE_REPLICATED and not reuse:
                continue
            session = settings.session_config(mode=mode, reuse_kv=reuse)
            if mode == constants.MODE_REPLICATED:
                stats = engine.run_replicated(
                    model, session, prompt, (), vocab).stats
            else:
                transcript = engine.run(model, session, prompt, vocab=vocab)
                tokens[mode, reuse] = transcript.tokens
                stats = transcript.stats
            _write('{:<12} {:<6} {:>14} {:>22} {:>12}'.format(
                mode, str(reuse).lower(), stats.prefill_tokens_computed,
                stats.summary_prefill_tokens, stats.decode_steps))
    for mode in (constants.MODE_PARALLEL, constants.MODE_SEQUENTIAL):
        if tokens[mode, True] != tokens[mode, False]:
            sys.stderr.write(
                'bench: {} transcripts differ with reuse off\n'.format(mode))
            return constants.EXIT_CHECK_FAILED
    return constants.EXIT_OK


COMMANDS = {
    'demo': cmd_demo,
    'verify': cmd_verify,
    'mask': cmd_mask,
    'grad': cmd_grad,
    'dataset': cmd_dataset,
    'bench': cmd_bench}

OVERRIDES = ('seed', 'mode', 'n_paths', 'precision', 'reuse_kv',
             'checkpoint', 'out', 'prompt', 'sessions', 'inject_fault',
             'shared', 'path_lens', 'summary', 'seeds', 'count')


def main(argv: typing.Optional[typing.Sequence[str]] = None,
         environ: typing.Optional[typing.Mapping[str, str]] = None) -> int:
    """Run the command line, returning the exit status"""
    args = build_parser().parse_args(argv)
    configure_logging(args)
    overrides = {key: getattr(args, key, None) for key in OVERRIDES}
    try:
        settings = config_.build_config(
            args.config, os.environ if environ is None else environ,
            overrides)
        return COMMANDS[args.command](settings)
    except (exceptions.ConfigError, exceptions.CheckpointError,
            OSError) as error:
        sys.stderr.write('parathink {}: {}\n'.format(args.command, error))
        return constants.EXIT_USAGE
    except exceptions.ParaThinkException as error:
        sys.stderr.write('parathink {}: {}\n'.format(args.command, error))
        return constants.EXIT_CHECK_FAILED
