"""
Records are written one JSON document per line. A converter turns such a
line into a Python object and back again.

The :py:class:`RecordConverter` base only parses the line into a
:py:class:`dict`, the :py:class:`NoOpConverter` returns the line untouched.
:py:class:`SampleConverter` handles :py:class:`~parathink.datakit.SftSample`
records and :py:class:`TranscriptConverter` handles
:py:class:`~parathink.engine.Transcript` records.

Creating your own converter is easy and should simply extend the
:py:class:`RecordConverter` class.

"""
import dataclasses
import json
import typing

from parathink import (datakit, engine, exceptions, kvcache, layout as layout_,
                       rope)


class RecordConverter:
    """Base record converter

    Keys are written in the order the record lists them; text is written as
    UTF-8 without escaping.

    """
    fields: typing.Tuple[str, ...] = ()

    def convert(self, line: str) -> typing.Any:
        """Convert one line into a record

        :param str line: The line to convert
        :raises: :py:exc:`~parathink.exceptions.SampleError`

        """
        try:
            record = json.loads(line)
        except ValueError as error:
            raise exceptions.SampleError(
                'Malformed record: {}'.format(error))
        missing = [key for key in self.fields if key not in record]
        if missing:
            raise exceptions.SampleError(
                'Record is missing {}'.format(', '.join(missing)))
        return record

    def dump(self, value: typing.Any) -> str:
        """Render a record as a single line"""
        return json.dumps(value, ensure_ascii=False, separators=(',', ':'))


class NoOpConverter:
    """Performs no conversion on the line passed in"""
    @staticmethod
    def convert(line: str) -> str:
        return line

    @staticmethod
    def dump(value: str) -> str:
        return value


class SampleConverter(RecordConverter):
    """Reads and writes :py:class:`~parathink.datakit.SftSample` records

    Field order: question, paths, summary, answer, token_ids, loss_mask.

    """
    fields = ('question', 'paths', 'summary', 'answer', 'token_ids',
              'loss_mask')

    def convert(self, line: str) -> datakit.SftSample:
        record = super().convert(line)
        return datakit.SftSample(**{key: record[key] for key in self.fields})

    def dump(self, value: datakit.SftSample) -> str:
        return super().dump(
            {key: getattr(value, key) for key in self.fields})


class TranscriptConverter(RecordConverter):
    """Reads and writes :py:class:`~parathink.engine.Transcript` records

    The session configuration, the position ids and the cache counters are
    carried along; engine logits are not.

    """
    fields = ('config', 'prompt', 'paths', 'summary', 'path_forced',
              'summary_forced', 'positions', 'stats')

    def convert(self, line: str) -> engine.Transcript:
        record = super().convert(line)
        settings = dict(record['config'])
        settings['sampling'] = engine.Sampling(**settings['sampling'])
        try:
            config = engine.SessionConfig(**settings)
        except TypeError as error:
            raise exceptions.SampleError(
                'Malformed session config: {}'.format(error))
        layout = layout_.SegmentLayout(
            len(record['prompt']), [len(path) for path in record['paths']],
            len(record['summary']))
        plan = rope.PositionPlan(
            record['positions'],
            rope.assign_positions_for(layout, config.positions).path_of)
        return engine.Transcript(
            record['prompt'], record['paths'], record['summary'],
            record['path_forced'], record['summary_forced'], plan, config,
            kvcache.CacheStats(**record['stats']))

    def dump(self, value: engine.Transcript) -> str:
        return super().dump({
            'config': dataclasses.asdict(value.config),
            'prompt': value.prompt,
            'paths': value.paths,
            'summary': value.summary,
            'path_forced': value.path_forced,
            'summary_forced': value.summary_forced,
            'positions': list(value.plan.pos),
            'stats': dataclasses.asdict(value.stats)})
