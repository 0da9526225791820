"""
parathink specific exceptions

Each concrete exception also derives from the builtin it specialises, so
callers that only care about ``ValueError`` or ``RuntimeError`` can keep
catching those.

"""


class ParaThinkException(Exception):
    """Common Base Exception"""


class LayoutError(ParaThinkException, ValueError):
    """Raised for an invalid segment layout or an index outside of it"""


class TagError(LayoutError):
    """Raised when a tagged token stream is not well formed.

    :param int offset: Token offset at which parsing failed
    :param str reason: What was wrong at that offset

    """

    def __init__(self, offset: int, reason: str):
        super().__init__()
        self.offset = offset
        self.reason = reason

    def __repr__(self) -> str:  # pragma: nocover
        return '<TagError offset={!r} reason={!r}>'.format(
            self.offset, self.reason)

    def __str__(self) -> str:
        return 'Malformed tagged stream at token {}: {}'.format(
            self.offset, self.reason)


class VocabError(ParaThinkException, ValueError):
    """Raised when special-token ids collide or exceed the vocabulary"""


class ShapeError(ParaThinkException, ValueError):
    """Raised on vector or matrix dimension mismatches"""


class ConfigError(ParaThinkException, ValueError):
    """Raised for invalid or unknown configuration values

    :param str key: The offending configuration key
    :param str reason: Why the value was rejected

    """

    def __init__(self, key: str, reason: str):
        super().__init__()
        self.key = key
        self.reason = reason

    def __repr__(self) -> str:  # pragma: nocover
        return '<ConfigError key={!r} reason={!r}>'.format(
            self.key, self.reason)

    def __str__(self) -> str:
        return 'Invalid configuration for {}: {}'.format(self.key, self.reason)


class CacheError(ParaThinkException, RuntimeError):
    """Raised for invalid KV cache handles or illegal cache operations"""


class PoolExhaustedError(CacheError):
    """Raised when the block pool has no free blocks left"""


class StageError(ParaThinkException, RuntimeError):
    """Raised when a decode session operation is invoked in the wrong stage

    :param str expected: The stage the operation requires
    :param str actual: The stage the session is in

    """

    def __init__(self, expected: str, actual: str):
        super().__init__()
        self.expected = expected
        self.actual = actual

    def __str__(self) -> str:
        return 'Expected stage {}, session is in {}'.format(
            self.expected, self.actual)


class SampleError(ParaThinkException, ValueError):
    """Raised when a training sample cannot be built or scored"""


class CheckpointError(ParaThinkException, ValueError):
    """Raised when a checkpoint file is malformed or incomplete"""
