"""
parathink decodes several reasoning paths in parallel over one shared prompt
and summarises them, using a path-aware attention mask and path-local rotary
positions on top of a small seeded decoder.

See the :doc:`examples` page for a walk through a session.

"""
version = '1.0.0'


def new(config=None):
    """Create a seeded :py:class:`~parathink.model.ToyDecoder`

    :param config: The model shape and seed
        (Default: :py:class:`parathink.model.ModelConfig`)
    :type config: parathink.model.ModelConfig or None
    :rtype: parathink.model.ToyDecoder

    """
    from parathink import model

    return model.init_weights(config or model.ModelConfig())


def load(filepath):
    """Load a model checkpoint from disk

    :param os.PathLike filepath: The path to the checkpoint to load
    :raises: :py:exc:`~parathink.exceptions.CheckpointError`
    :rtype: parathink.model.ToyDecoder

    """
    from parathink import checkpoint

    return checkpoint.load(filepath)
