import json
import tempfile
from io import StringIO
from pathlib import Path

from django.core.exceptions import ValidationError
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase

from numcore.storage import tree_digest

from .forms import RunConfigForm, resolve_config

TINY = {
    'synthsite.patients': 10,
    'synthsite.sites': 3,
    'synthsite.vendors': 2,
    'synthsite.image_size': 16,
    'cluster.k': 2,
    'cluster.restarts': 2,
    'taskmodel.pretrain.epochs': 1,
    'taskmodel.finetune.epochs': 1,
    'taskmodel.min_finetune_samples': 2,
    'reduce.components': 3,
    'forest.n_trees': 3,
}


def run(command, *args, **options):
    out = StringIO()
    call_command(command, *args, stdout=out, **options)
    return out.getvalue()


class ConfigTests(SimpleTestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.dir = Path(self.tmp.name)

    def write(self, payload, name='config.json'):
        path = self.dir / name
        path.write_text(payload if isinstance(payload, str) else json.dumps(payload), encoding='utf-8')
        return path

    def test_defaults_resolve(self):
        config = resolve_config()
        self.assertEqual(set(config), set(RunConfigForm.FIELDS))
        self.assertEqual(config['cluster.k'], 5)
        self.assertEqual(config['reduce.components'], 32)

    def test_precedence(self):
        path = self.write({'cluster.k': 3, 'run.seed': 9, 'forest.n_trees': 50})
        config = resolve_config(path, k=4)
        self.assertEqual(config['cluster.k'], 4)
        self.assertEqual(config['run.seed'], 9)
        self.assertEqual(config['forest.n_trees'], 50)

    def test_resolved_config_is_logged(self):
        with self.assertLogs('cli', level='INFO') as logs:
            resolve_config(seed=13)
        self.assertIn('"run.seed": 13', logs.output[0])

    def test_unknown_key_is_named(self):
        with self.assertRaises(ValidationError) as ctx:
            resolve_config(self.write({'cluster.kk': 3}))
        self.assertIn('cluster.kk', ' '.join(ctx.exception.messages))

    def test_out_of_range_values(self):
        for key, value in (('cluster.k', 0), ('synthsite.train_fraction', 1.0),
                           ('taskmodel.pretrain.learning_rate', 0.0), ('pipeline.baseline', 'ensemble')):
            with self.assertRaises(ValidationError) as ctx:
                resolve_config(self.write({key: value}))
            self.assertIn(key, ' '.join(ctx.exception.messages))

    def test_malformed_file(self):
        with self.assertRaises(ValidationError):
            resolve_config(self.write('{"cluster.k": '))
        with self.assertRaises(ValidationError):
            resolve_config(self.write('[1, 2]'))


class CommandTests(SimpleTestCase):

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.tmp = tempfile.TemporaryDirectory()
        cls.dir = Path(cls.tmp.name)
        cls.config = cls.dir / 'tiny.json'
        cls.config.write_text(json.dumps(TINY), encoding='utf-8')
        cls.cohort = cls.dir / 'cohort'
        run('generate', config=str(cls.config), seed=5, out=str(cls.cohort))
        cls.bundle = cls.dir / 'bundle'
        run('fit', str(cls.cohort / 'train.jsonl'), config=str(cls.config), seed=5, out=str(cls.bundle))

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()
        super().tearDownClass()

    def test_generate_writes_manifests(self):
        for name in ('manifest.jsonl', 'train.jsonl', 'test.jsonl'):
            self.assertTrue((self.cohort / name).is_file())
        self.assertEqual(len(list((self.cohort / 'images').glob('*.tns'))), 30)

    def test_generate_is_deterministic(self):
        again = self.dir / 'again'
        run('generate', config=str(self.config), seed=5, out=str(again), threads=3)
        self.assertEqual(tree_digest(again), tree_digest(self.cohort))

    def test_generate_rejects_unknown_key(self):
        bad = self.dir / 'bad.json'
        bad.write_text(json.dumps({'synthsite.patient': 4}), encoding='utf-8')
        with self.assertRaises(CommandError) as ctx:
            run('generate', config=str(bad), out=str(self.dir / 'never'))
        self.assertEqual(ctx.exception.returncode, 2)
        self.assertIn('synthsite.patient', str(ctx.exception))
        self.assertFalse((self.dir / 'never').exists())

    def test_fit_writes_one_directory_per_pdsm(self):
        self.assertEqual(sorted(p.name for p in (self.bundle / 'pdsm').iterdir()), ['1', '2'])
        self.assertTrue((self.bundle / 'bundle.json').is_file())

    def test_fit_k_flag(self):
        target = self.dir / 'k1'
        run('fit', str(self.cohort / 'train.jsonl'), config=str(self.config), seed=5, k=1, out=str(target))
        self.assertEqual([p.name for p in (target / 'pdsm').iterdir()], ['1'])

    def test_fit_missing_manifest(self):
        target = self.dir / 'missing'
        with self.assertRaises(CommandError) as ctx:
            run('fit', str(self.dir / 'nope.jsonl'), config=str(self.config), out=str(target))
        self.assertEqual(ctx.exception.returncode, 1)
        self.assertFalse(target.exists())

    def test_evaluate_modes(self):
        for mode in ('pdsm', 'single_visit'):
            reports = self.dir / f'reports-{mode}'
            output = run('evaluate', str(self.bundle), str(self.cohort / 'test.jsonl'), mode=mode, out=str(reports))
            report = json.loads((reports / f'report_{mode}.json').read_text(encoding='utf-8'))
            self.assertEqual(report['mode'], mode)
            self.assertTrue({'r2', 'mse', 'n_test', 'mode'} <= set(report))
            self.assertIn(mode, output)

    def test_evaluate_unknown_mode(self):
        with self.assertRaises(CommandError) as ctx:
            run('evaluate', str(self.bundle), str(self.cohort / 'test.jsonl'), mode='ensemble', out=str(self.dir))
        self.assertEqual(ctx.exception.returncode, 2)

    def test_evaluate_single_model_on_multi_domain_bundle(self):
        with self.assertRaises(CommandError) as ctx:
            run('evaluate', str(self.bundle), str(self.cohort / 'test.jsonl'), mode='single_model', out=str(self.dir))
        self.assertEqual(ctx.exception.returncode, 1)


class BenchmarkCommandTests(SimpleTestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.dir = Path(self.tmp.name)
        self.config = self.dir / 'tiny.json'
        self.config.write_text(json.dumps(TINY), encoding='utf-8')

    def rows(self, out):
        return json.loads((out / 'benchmark.json').read_text(encoding='utf-8'))['rows']

    def test_single_seed_and_repeatability(self):
        first, second = self.dir / 'first', self.dir / 'second'
        run('benchmark', config=str(self.config), seeds='42', out=str(first))
        run('benchmark', config=str(self.config), seeds='42', out=str(second))
        self.assertEqual([row['seed'] for row in self.rows(first)], [42, 'mean'])
        self.assertEqual((first / 'benchmark.txt').read_bytes(), (second / 'benchmark.txt').read_bytes())
        self.assertEqual((first / 'benchmark.json').read_bytes(), (second / 'benchmark.json').read_bytes())

    def test_three_seeds(self):
        out = self.dir / 'three'
        run('benchmark', config=str(self.config), seeds='1,2,3', out=str(out))
        self.assertEqual([row['seed'] for row in self.rows(out)], [1, 2, 3, 'mean'])

    def test_bad_seeds(self):
        with self.assertRaises(CommandError) as ctx:
            run('benchmark', config=str(self.config), seeds='1,x', out=str(self.dir / 'bad'))
        self.assertEqual(ctx.exception.returncode, 2)
