from pipeline.fitting import fit_pipeline, save_bundle
from pipeline.models import BASELINES, PipelineConfig
from synthsite.models import read_manifest

from cli.base import PdsmCommand


class Command(PdsmCommand):
    help = 'Fit a PDSM bundle on a training manifest'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('manifest', help='training manifest (train.jsonl)')
        parser.add_argument('--k', type=int, help='number of pseudo-domains (overrides cluster.k)')
        parser.add_argument('--baseline', help=f"one of {', '.join(BASELINES)} (overrides pipeline.baseline)")
        parser.add_argument('--single-model', action='store_true',
                            help='fit the single-model baseline instead (k = 1)')

    def run(self, config, **options):
        manifest = read_manifest(options['manifest'])
        pipeline_config = PipelineConfig.from_dotted(config)
        if options['single_model']:
            pipeline_config = pipeline_config.single_model()
        bundle = fit_pipeline(manifest, pipeline_config)
        save_bundle(bundle, options['out'])
        self.done(f"bundle with {bundle.k} PDSM(s) written to {options['out']}")
