"""Small fixtures shared by the test modules"""
import dataclasses

from parathink import constants, model

SMALL = model.ModelConfig(n_layers=1, n_heads=2, head_dim=8, vocab_size=300)
"""A model small enough for per-token decoding in unit tests"""

PROMPT = [constants.USER, 72, 105, 33, constants.ASSISTANT]


def small_model(**overrides) -> model.ToyDecoder:
    return model.init_weights(dataclasses.replace(SMALL, **overrides))


SMALL_CONFIG = """\
# tiny model for command line tests
n_layers = 1
n_heads = 2
head_dim = 8
vocab_size = 300
max_path_tokens = 3
max_summary_tokens = 3
"""
