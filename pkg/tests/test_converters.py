import dataclasses
import json
import unittest

import faker

from parathink import converters, datakit, engine, exceptions
from tests import PROMPT, small_model


class RecordConverterTestCase(unittest.TestCase):

    def test_dump_is_compact_utf8(self):
        converter = converters.RecordConverter()
        self.assertEqual(converter.dump({'b': 'ü', 'a': [1, 2]}),
                         '{"b":"ü","a":[1,2]}')

    def test_malformed_line(self):
        with self.assertRaises(exceptions.SampleError):
            converters.RecordConverter().convert('{"question": ')

    def test_noop_converter(self):
        converter = converters.NoOpConverter()
        value = '{"not": "parsed"'
        self.assertEqual(converter.convert(value), value)
        self.assertEqual(converter.dump(value), value)


class SampleConverterTestCase(unittest.TestCase):

    def setUp(self):
        fake = faker.Faker()
        fake.seed_instance(3)
        self.sample = datakit.build_sample(
            fake.sentence(), [fake.sentence() for _ in range(4)],
            fake.word())
        self.converter = converters.SampleConverter()

    def test_round_trip(self):
        line = self.converter.dump(self.sample)
        self.assertNotIn('\n', line)
        self.assertEqual(self.converter.convert(line), self.sample)

    def test_field_order(self):
        record = json.loads(self.converter.dump(self.sample))
        self.assertListEqual(list(record), list(self.converter.fields))

    def test_missing_field(self):
        record = json.loads(self.converter.dump(self.sample))
        del record['loss_mask']
        with self.assertRaises(exceptions.SampleError) as context:
            self.converter.convert(json.dumps(record))
        self.assertIn('loss_mask', str(context.exception))


class TranscriptConverterTestCase(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.model = small_model()
        cls.transcript = engine.run(
            cls.model, engine.SessionConfig(
                n_paths=2, max_path_tokens=3, max_summary_tokens=3),
            PROMPT)

    def setUp(self):
        self.converter = converters.TranscriptConverter()

    def test_round_trip(self):
        value = self.converter.convert(self.converter.dump(self.transcript))
        for field in ('prompt', 'paths', 'summary', 'path_forced',
                      'summary_forced', 'plan', 'config', 'stats'):
            self.assertEqual(getattr(value, field),
                             getattr(self.transcript, field), field)
        self.assertListEqual(value.path_logits, [])

    def test_reloaded_transcript_verifies(self):
        value = self.converter.convert(self.converter.dump(self.transcript))
        result = engine.verify_transcript(self.model, value)
        self.assertTrue(result.ok, result)
        self.assertIsNone(result.max_abs_diff)

    def test_bad_config(self):
        record = json.loads(self.converter.dump(self.transcript))
        record['config']['beam_width'] = 4
        with self.assertRaises(exceptions.SampleError):
            self.converter.convert(json.dumps(record))

    def test_invalid_config_value(self):
        record = json.loads(self.converter.dump(self.transcript))
        record['config']['n_paths'] = 0
        with self.assertRaises(exceptions.ConfigError):
            self.converter.convert(json.dumps(record))

    def test_config_is_serialized(self):
        record = json.loads(self.converter.dump(self.transcript))
        self.assertDictEqual(record['config'],
                             dataclasses.asdict(self.transcript.config))
