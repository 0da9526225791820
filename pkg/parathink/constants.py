"""
Constants used throughout :py:mod:`parathink`: special-token ids of the toy
vocabulary, default model and session parameters, and the identifiers of the
checkpoint container. There are a few undocumented constants as well, but
they should not be of concern unless you are hacking on the library itself.

"""
import typing

MAGIC: bytes = b'PTHK1'
"""Leading bytes of a checkpoint file"""

BYTE_VOCAB: int = 256
"""Number of plain byte tokens, ids ``0`` through ``255``"""

PAD: int = 256
USER: int = 257
ASSISTANT: int = 258
SUMMARY_OPEN: int = 259
SUMMARY_CLOSE: int = 260
THINK_BASE: int = 261
"""``<think k>`` is ``THINK_BASE + 2 * (k - 1)``, ``</think k>`` follows it"""

MAX_PATHS: int = 16
"""The largest number of reasoning paths a layout may carry"""

BOXED_OPEN: bytes = b'\\boxed{'
BOXED_CLOSE: bytes = b'}'

# Model defaults

DEFAULT_N_LAYERS: int = 2
DEFAULT_N_HEADS: int = 4
DEFAULT_HEAD_DIM: int = 16
DEFAULT_VOCAB_SIZE: int = 512
DEFAULT_ROPE_BASE: float = 10000.0
DEFAULT_SEED: int = 0x5EED
MLP_RATIO: int = 4
NORM_EPS: float = 1e-6
INIT_SCALE: float = 0.02
"""Weights are drawn uniformly from ``[-INIT_SCALE, INIT_SCALE]``"""

PRECISION_FP32: str = 'fp32'
PRECISION_FP64: str = 'fp64'
PRECISIONS: typing.Tuple[str, ...] = (PRECISION_FP32, PRECISION_FP64)

FP32_TOLERANCE: float = 1e-5
IDENTITY_TOLERANCE: float = 1e-10

# KV cache defaults

BLOCK_SIZE: int = 16
NUM_BLOCKS: int = 4096

TAG_SHARED: str = 'shared'
TAG_SUMMARY: str = 'summary'
TAG_PATH: str = 'path:{}'

# Engine

MODE_PARALLEL: str = 'parallel'
MODE_SEQUENTIAL: str = 'sequential'
MODE_REPLICATED: str = 'replicated'
MODES: typing.Tuple[str, ...] = (
    MODE_PARALLEL, MODE_SEQUENTIAL, MODE_REPLICATED)

POSITIONS_SHARED: str = 'shared'
"""Equal path start ids (the LPRoPE plan)"""
POSITIONS_DISJOINT: str = 'disjoint'
"""Consecutive, non-overlapping path id ranges"""

SAMPLING_GREEDY: str = 'greedy'
SAMPLING_TOP_K: str = 'top_k'

DEFAULT_MAX_PATH_TOKENS: int = 32
DEFAULT_MAX_SUMMARY_TOKENS: int = 16

# Gradient check

FD_STEP: float = 1e-5
FD_REL_TOLERANCE: float = 1e-5
FD_ABS_FLOOR: float = 1e-9

# CLI

SEED_ENV: str = 'PTHK_SEED'
EXIT_OK: int = 0
EXIT_CHECK_FAILED: int = 1
EXIT_USAGE: int = 2
FLOAT_FMT: str = '{:.9g}'
