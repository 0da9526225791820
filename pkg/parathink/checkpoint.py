"""
Read and write model checkpoints.

A checkpoint starts with the magic bytes ``PTHK1`` followed by tensors until
the end of the file. Each tensor is stored as:

- name length, unsigned 32-bit little endian
- name, UTF-8
- rank, unsigned 32-bit little endian
- one unsigned 64-bit little endian size per dimension
- the values as 64-bit little endian floats in row-major order

The ``config`` tensor carries the :py:class:`~parathink.model.ModelConfig`
(the seed split into two 32-bit halves), ``path_embeddings`` the path
embedding table, and every other tensor is a model weight.

"""
from __future__ import annotations

import logging
import os
import pathlib
import struct
import typing

import numpy as np

from parathink import constants, exceptions, model as model_, rope

LOGGER = logging.getLogger(__name__)

CONFIG = 'config'
PATH_EMBEDDINGS = 'path_embeddings'
FLOAT = np.dtype('<f8')


class Checkpoint:
    """A checkpoint file on disk

    :param os.PathLike path: Where the checkpoint lives

    """
    def __init__(self, path: os.PathLike):
        self.path = pathlib.Path(path)
        self._handle: typing.Optional[typing.BinaryIO] = None

    def __repr__(self) -> str:
        return '<Checkpoint {}>'.format(self.path)

    def save(self, model: model_.ToyDecoder) -> None:
        """Write every tensor of ``model``"""
        LOGGER.debug('Saving %r to %s', model, self.path)
        with open(self.path, 'wb') as self._handle:
            self._handle.write(constants.MAGIC)
            self._write_tensor(CONFIG, _config_vector(model))
            for name, value in model.tensors():
                self._write_tensor(name, value)
            self._write_tensor(PATH_EMBEDDINGS, model.paths.e)
        self._handle = None

    def load(self) -> model_.ToyDecoder:
        """Read the checkpoint back into a model

        :raises: :py:exc:`~parathink.exceptions.CheckpointError`

        """
        if not self.path.exists():
            raise exceptions.CheckpointError(
                'Path {!r} does not exist'.format(str(self.path)))
        LOGGER.debug('Loading checkpoint from %s', self.path)
        tensors = {}
        with open(self.path, 'rb') as self._handle:
            magic = self._handle.read(len(constants.MAGIC))
            if magic != constants.MAGIC:
                raise exceptions.CheckpointError(
                    'Bad magic bytes {!r}'.format(magic))
            while True:
                name = self._read_name()
                if name is None:
                    break
                tensors[name] = self._read_tensor(name)
        self._handle = None
        for name in (CONFIG, PATH_EMBEDDINGS):
            if name not in tensors:
                raise exceptions.CheckpointError(
                    'Missing tensor {}'.format(name))
        config, trainable = _config_from_vector(tensors.pop(CONFIG))
        paths = rope.PathEmbeddingTable(tensors.pop(PATH_EMBEDDINGS),
                                        trainable)
        try:
            return model_.ToyDecoder(config, tensors, paths)
        except exceptions.ShapeError as error:
            raise exceptions.CheckpointError(str(error))

    def _read_exact(self, count: int) -> bytes:
        value = self._handle.read(count)
        if len(value) != count:
            raise exceptions.CheckpointError(
                'Truncated checkpoint at byte {}'.format(self._handle.tell()))
        return value

    def _read_int(self) -> int:
        return struct.unpack('<I', self._read_exact(4))[0]

    def _read_name(self) -> typing.Optional[str]:
        head = self._handle.read(4)
        if not head:
            return None
        if len(head) != 4:
            raise exceptions.CheckpointError('Truncated tensor header')
        length = struct.unpack('<I', head)[0]
        return self._read_exact(length).decode('utf-8')

    def _read_tensor(self, name: str) -> np.ndarray:
        rank = self._read_int()
        shape = tuple(struct.unpack('<Q', self._read_exact(8))[0]
                      for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(self._read_exact(count * FLOAT.itemsize),
                             dtype=FLOAT)
        LOGGER.debug('Read tensor %s %r', name, shape)
        return data.astype(np.float64).reshape(shape)

    def _write_int(self, value: int) -> None:
        self._handle.write(struct.pack('<I', value))

    def _write_tensor(self, name: str, value: np.ndarray) -> None:
        LOGGER.debug('Writing tensor %s %r', name, value.shape)
        encoded = name.encode('utf-8')
        self._write_int(len(encoded))
        self._handle.write(encoded)
        self._write_int(value.ndim)
        for size in value.shape:
            self._handle.write(struct.pack('<Q', size))
        self._handle.write(
            np.ascontiguousarray(value, dtype=FLOAT).tobytes(order='C'))


def _config_vector(model: model_.ToyDecoder) -> np.ndarray:
    config = model.config
    return np.array([
        config.n_layers, config.n_heads, config.head_dim, config.vocab_size,
        config.rope_base, constants.PRECISIONS.index(config.precision),
        config.seed >> 32, config.seed & 0xFFFFFFFF, config.max_paths,
        int(model.paths.trainable)], dtype=np.float64)


def _config_from_vector(
        vector: np.ndarray) -> typing.Tuple[model_.ModelConfig, bool]:
    if vector.shape != (10,):
        raise exceptions.CheckpointError(
            'Config tensor has shape {}'.format(vector.shape))
    values = [int(v) for v in vector]
    try:
        config = model_.ModelConfig(
            n_layers=values[0], n_heads=values[1], head_dim=values[2],
            vocab_size=values[3], rope_base=float(vector[4]),
            precision=constants.PRECISIONS[values[5]],
            seed=(values[6] << 32) | values[7], max_paths=values[8])
    except (IndexError, exceptions.ConfigError) as error:
        raise exceptions.CheckpointError(
            'Invalid config tensor: {}'.format(error))
    return config, bool(values[9])


def save(model: model_.ToyDecoder, path: os.PathLike) -> None:
    """Write ``model`` to ``path``"""
    Checkpoint(path).save(model)


def load(path: os.PathLike) -> model_.ToyDecoder:
    """Read a model from ``path``

    :raises: :py:exc:`~parathink.exceptions.CheckpointError`

    """
    return Checkpoint(path).load()
