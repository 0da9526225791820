"""
Command line configuration.

Settings are read from a flat plain-text file of ``key = value`` lines.
Everything after a ``#`` is a comment and blank lines are ignored. Values
are typed by the :py:class:`CliConfig` field they set; booleans accept
``true``, ``false``, ``yes``, ``no``, ``1`` and ``0``.

Later sources win: defaults, the configuration file, the ``PTHK_SEED``
environment variable, then command line flags.

"""
import dataclasses
import logging
import os
import typing

from parathink import constants, engine, exceptions, model

LOGGER = logging.getLogger(__name__)

TRUE_VALUES = frozenset({'true', 'yes', '1'})
FALSE_VALUES = frozenset({'false', 'no', '0'})


@dataclasses.dataclass(frozen=True)
class CliConfig:
    """Every setting a subcommand may read"""
    # model
    n_layers: int = constants.DEFAULT_N_LAYERS
    n_heads: int = constants.DEFAULT_N_HEADS
    head_dim: int = constants.DEFAULT_HEAD_DIM
    vocab_size: int = constants.DEFAULT_VOCAB_SIZE
    rope_base: float = constants.DEFAULT_ROPE_BASE
    precision: str = constants.PRECISION_FP64
    model_seed: int = constants.DEFAULT_SEED
    # session
    seed: int = constants.DEFAULT_SEED
    mode: str = constants.MODE_PARALLEL
    n_paths: int = 4
    max_path_tokens: int = constants.DEFAULT_MAX_PATH_TOKENS
    max_summary_tokens: int = constants.DEFAULT_MAX_SUMMARY_TOKENS
    sampling: str = constants.SAMPLING_GREEDY
    top_k: int = 8
    temperature: float = 1.0
    reuse_kv: bool = True
    block_size: int = constants.BLOCK_SIZE
    workers: int = 1
    # files
    checkpoint: typing.Optional[str] = None
    out: typing.Optional[str] = None
    prompt: str = 'Describe the picture.'
    # subcommands
    sessions: int = 50
    seeds: int = 10
    count: int = 8
    shared: int = 2
    path_lens: str = '2,2'
    summary: int = 1
    inject_fault: bool = False

    def __post_init__(self):
        self.model_config()
        self.session_config()
        for key in ('sessions', 'seeds', 'count'):
            if getattr(self, key) < 1:
                raise exceptions.ConfigError(key, 'must be at least 1')
        for key in ('shared', 'summary'):
            if getattr(self, key) < 0:
                raise exceptions.ConfigError(key, 'must not be negative')
        self.path_lengths()

    def model_config(self) -> model.ModelConfig:
        return model.ModelConfig(
            self.n_layers, self.n_heads, self.head_dim, self.vocab_size,
            self.rope_base, self.precision, self.model_seed)

    def session_config(self, **overrides) -> engine.SessionConfig:
        """The decode settings, with ``overrides`` applied on top"""
        sampling = engine.Sampling(
            self.sampling, self.top_k, self.temperature,
            overrides.pop('seed', self.seed))
        settings = {
            'mode': self.mode,
            'n_paths': self.n_paths,
            'max_path_tokens': self.max_path_tokens,
            'max_summary_tokens': self.max_summary_tokens,
            'sampling': sampling,
            'reuse_kv': self.reuse_kv,
            'block_size': self.block_size,
            'workers': self.workers}
        settings.update(overrides)
        return engine.SessionConfig(**settings)

    def path_lengths(self) -> typing.List[int]:
        try:
            lengths = [int(part) for part in self.path_lens.split(',')]
        except ValueError:
            raise exceptions.ConfigError(
                'path_lens', 'expected comma separated integers')
        if not lengths or any(length < 1 for length in lengths):
            raise exceptions.ConfigError(
                'path_lens', 'expected positive lengths')
        return lengths


def _field_types() -> typing.Dict[str, type]:
    types, hints = {}, typing.get_type_hints(CliConfig)
    for field in dataclasses.fields(CliConfig):
        hint = hints[field.name]
        args = [arg for arg in typing.get_args(hint) if arg is not type(None)]
        types[field.name] = args[0] if args else hint
    return types


def coerce(key: str, value: str) -> typing.Any:
    """Convert the text ``value`` to the type of field ``key``

    :raises: :py:exc:`~parathink.exceptions.ConfigError`

    """
    types = _field_types()
    if key not in types:
        raise exceptions.ConfigError(key, 'unknown setting')
    kind = types[key]
    if kind is bool:
        if value.lower() in TRUE_VALUES:
            return True
        if value.lower() in FALSE_VALUES:
            return False
        raise exceptions.ConfigError(key, 'expected a boolean')
    try:
        if kind is int:
            return int(value, 0)
        if kind is float:
            return float(value)
    except ValueError:
        raise exceptions.ConfigError(
            key, 'expected {}, got {!r}'.format(kind.__name__, value))
    return value


def parse_config(lines: typing.Iterable[str]) -> typing.Dict[str, typing.Any]:
    """Parse ``key = value`` lines into typed settings

    :raises: :py:exc:`~parathink.exceptions.ConfigError`

    """
    settings = {}
    for number, line in enumerate(lines, 1):
        line = line.split('#', 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition('=')
        if not sep:
            raise exceptions.ConfigError(
                'line {}'.format(number), 'expected key = value')
        key = key.strip()
        settings[key] = coerce(key, value.strip())
    return settings


def read_config(path: os.PathLike) -> typing.Dict[str, typing.Any]:
    """Read a configuration file

    :raises: :py:exc:`~parathink.exceptions.ConfigError`
    :raises: :py:exc:`OSError`

    """
    LOGGER.debug('Reading configuration from %s', path)
    with open(path, 'r', encoding='utf-8') as handle:
        return parse_config(handle)


def build_config(path: typing.Optional[os.PathLike] = None,
                 environ: typing.Optional[typing.Mapping[str, str]] = None,
                 overrides: typing.Optional[
                     typing.Mapping[str, typing.Any]] = None) -> CliConfig:
    """Layer the configuration file, environment and flags over the
    defaults

    ``None`` values in ``overrides`` are treated as unset.

    :raises: :py:exc:`~parathink.exceptions.ConfigError`

    """
    settings = read_config(path) if path else {}
    environ = os.environ if environ is None else environ
    if environ.get(constants.SEED_ENV):
        settings['seed'] = coerce('seed', environ[constants.SEED_ENV])
    for key, value in (overrides or {}).items():
        if value is not None:
            settings[key] = value
    try:
        return CliConfig(**settings)
    except TypeError as error:
        raise exceptions.ConfigError('config', str(error))
