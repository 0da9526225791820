import pathlib
import tempfile
import unittest

from parathink import config, constants, exceptions
from tests import SMALL_CONFIG


class ParseTestCase(unittest.TestCase):

    def test_typed_values(self):
        settings = config.parse_config([
            'n_layers = 3', 'rope_base=500.5', 'mode = sequential',
            'seed = 0x10', 'reuse_kv = no', 'checkpoint = /tmp/x.pthk'])
        self.assertDictEqual(settings, {
            'n_layers': 3, 'rope_base': 500.5, 'mode': 'sequential',
            'seed': 16, 'reuse_kv': False, 'checkpoint': '/tmp/x.pthk'})

    def test_comments_and_blank_lines(self):
        settings = config.parse_config(SMALL_CONFIG.splitlines())
        self.assertEqual(len(settings), 6)
        self.assertEqual(
            config.parse_config(['', '  # nothing', 'seeds = 2 # two']),
            {'seeds': 2})

    def test_booleans(self):
        for text, value in (('TRUE', True), ('yes', True), ('1', True),
                            ('False', False), ('no', False), ('0', False)):
            self.assertIs(config.coerce('inject_fault', text), value)
        with self.assertRaises(exceptions.ConfigError):
            config.coerce('inject_fault', 'maybe')

    def test_unknown_key(self):
        with self.assertRaises(exceptions.ConfigError) as context:
            config.parse_config(['beam_width = 4'])
        self.assertEqual(context.exception.key, 'beam_width')

    def test_bad_line(self):
        with self.assertRaises(exceptions.ConfigError) as context:
            config.parse_config(['seed = 1', 'paths 4'])
        self.assertEqual(context.exception.key, 'line 2')

    def test_bad_number(self):
        for line in ('n_paths = four', 'temperature = warm'):
            with self.assertRaises(exceptions.ConfigError):
                config.parse_config([line])


class CliConfigTestCase(unittest.TestCase):

    def test_defaults(self):
        value = config.CliConfig()
        self.assertEqual(value.model_config().seed, constants.DEFAULT_SEED)
        self.assertListEqual(value.path_lengths(), [2, 2])

    def test_session_config(self):
        value = config.CliConfig(sampling=constants.SAMPLING_TOP_K, top_k=3,
                                 seed=5, reuse_kv=False)
        session = value.session_config(n_paths=2, seed=9)
        self.assertEqual(session.n_paths, 2)
        self.assertFalse(session.reuse_kv)
        self.assertEqual(session.sampling.k, 3)
        self.assertEqual(session.sampling.seed, 9)
        self.assertEqual(value.session_config().sampling.seed, 5)

    def test_invalid(self):
        for overrides in ({'n_paths': 0}, {'precision': 'fp16'},
                          {'sessions': 0}, {'shared': -1},
                          {'path_lens': '2,x'}, {'path_lens': '2,-1'},
                          {'path_lens': '0,2'},
                          {'temperature': 0.0}):
            with self.assertRaises(exceptions.ConfigError):
                config.CliConfig(**overrides)


class BuildConfigTestCase(unittest.TestCase):

    def setUp(self):
        self.tempdir = tempfile.TemporaryDirectory()
        self.path = pathlib.Path(self.tempdir.name) / 'parathink.conf'
        self.path.write_text(SMALL_CONFIG + 'seed = 1\nn_paths = 2\n')

    def tearDown(self):
        self.tempdir.cleanup()

    def test_file(self):
        value = config.build_config(self.path, {})
        self.assertEqual(value.n_layers, 1)
        self.assertEqual(value.seed, 1)
        self.assertEqual(value.n_paths, 2)

    def test_environment_beats_file(self):
        value = config.build_config(self.path, {constants.SEED_ENV: '7'})
        self.assertEqual(value.seed, 7)

    def test_flags_beat_environment(self):
        value = config.build_config(
            self.path, {constants.SEED_ENV: '7'},
            {'seed': 8, 'n_paths': None})
        self.assertEqual(value.seed, 8)
        self.assertEqual(value.n_paths, 2)

    def test_no_file(self):
        self.assertEqual(config.build_config(environ={}), config.CliConfig())

    def test_missing_file(self):
        with self.assertRaises(OSError):
            config.build_config(self.path.with_name('missing.conf'), {})

    def test_unknown_override(self):
        with self.assertRaises(exceptions.ConfigError):
            config.build_config(environ={}, overrides={'beam_width': 4})

    def test_bad_environment_seed(self):
        with self.assertRaises(exceptions.ConfigError):
            config.build_config(environ={constants.SEED_ENV: 'abc'})
