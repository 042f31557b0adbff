from django.core.management.base import CommandError

from pipeline.evaluation import run_benchmark

from cli.base import CONFIG_ERROR, PdsmCommand


def parse_seeds(text):
    try:
        seeds = [int(part) for part in text.split(',') if part.strip()]
    except ValueError:
        raise CommandError(f'--seeds must be comma-separated integers, got {text!r}', returncode=CONFIG_ERROR)
    if not seeds or any(seed < 0 for seed in seeds):
        raise CommandError('--seeds needs at least one non-negative seed', returncode=CONFIG_ERROR)
    return seeds


class Command(PdsmCommand):
    help = 'PDSM vs. single model vs. single visit over seeded synthetic cohorts'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--seeds', help='comma-separated seeds (default: run.seed)')
        parser.add_argument('--k', type=int, help='number of pseudo-domains (overrides cluster.k)')
        parser.add_argument('--baseline', help='overrides pipeline.baseline')

    def run(self, config, **options):
        seeds = parse_seeds(options['seeds']) if options['seeds'] else [config['run.seed']]
        table = run_benchmark(config, seeds, options['out'], threads=config['run.threads'])
        self.stdout.write(table.to_text())
        self.done(f"benchmark over {len(seeds)} seed(s) written to {options['out']}")
