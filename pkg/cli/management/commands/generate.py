from pathlib import Path

from pipeline.models import cohort_config
from synthsite.generator import generate_cohort, split_train_test
from synthsite.models import write_manifest

from cli.base import PdsmCommand


class Command(PdsmCommand):
    help = 'Generate a synthetic multi-site cohort with manifest.jsonl, train.jsonl and test.jsonl'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--previews', action='store_true', help='also write PNG previews of week-0 images')

    def run(self, config, **options):
        out = Path(options['out'])
        cohort, train_fraction = cohort_config(config)
        seed = config['run.seed']
        manifest = generate_cohort(cohort, seed, out, threads=config['run.threads'], previews=options['previews'])
        train, test = split_train_test(manifest, train_fraction, seed)
        write_manifest(train, out / 'train.jsonl')
        write_manifest(test, out / 'test.jsonl')
        self.done(
            f'{len(manifest.patient_ids)} patients ({len(train.patient_ids)} train, '
            f'{len(test.patient_ids)} test) written to {out}'
        )
