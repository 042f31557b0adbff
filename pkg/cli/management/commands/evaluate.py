from django.core.management.base import CommandError

from pipeline.evaluation import evaluate, write_report
from pipeline.fitting import load_bundle
from pipeline.models import MODES
from synthsite.models import read_manifest

from cli.base import CONFIG_ERROR, PdsmCommand


class Command(PdsmCommand):
    help = 'Evaluate a bundle on a test manifest (R2 and MSE)'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('bundle', help='bundle directory written by fit')
        parser.add_argument('manifest', help='test manifest (test.jsonl)')
        parser.add_argument('--mode', default='pdsm', help=f"one of {', '.join(MODES)}")

    def run(self, config, **options):
        mode = options['mode']
        if mode not in MODES:
            raise CommandError(f"unknown mode {mode!r}; expected one of {', '.join(MODES)}", returncode=CONFIG_ERROR)
        bundle = load_bundle(options['bundle'])
        report = evaluate(bundle, read_manifest(options['manifest']), mode, threads=config['run.threads'])
        write_report(report, options['out'])
        self.stdout.write(report.to_text())
        self.done(f"{mode}: R2 {report.r2:.4f}, MSE {report.mse:.4f} (n={report.n_test})")
