from django.core.management.base import BaseCommand, CommandError

from skvq.config import RunConfig
from skvq.exceptions import SkvqError

# RunConfig key -> help for its named flag
FLAG_HELP = {
    'model': 'model file (SKVM)',
    'artifact': 'calibration artifact file (SKVC)',
    'output': 'output file',
    'key_bits': 'key cache bits: 1, 2, 3, 4, 8, 16 or ternary',
    'value_bits': 'value cache bits: 1, 2, 3, 4, 8, 16 or ternary',
    'group_size': 'channels per quantization group',
    'param_format': 'scale/zero-point storage: fp16 or fp8',
    'window': 'full-precision sliding window, in tokens',
    'sinks': 'leading tokens kept at full precision',
    'seed': 'random seed',
    'prompt': 'comma-separated prompt token ids',
    'n_new': 'number of tokens to generate',
    'snapshot': 'write the final cache state to this file',
    'strategies': 'comma-separated strategy names (default: the ablation ladder)',
    'eval_seeds': 'comma-separated seeds, one toy model each',
    'batches': 'comma-separated batch sizes',
    'seqs': 'comma-separated sequence lengths in tokens',
}

COMMON_FLAGS = ('model', 'artifact', 'output', 'key_bits', 'value_bits', 'group_size', 'param_format', 'window',
                'sinks', 'seed')


class SkvqCommand(BaseCommand):
    """Base for commands driven by a RunConfig: --config FILE, repeated --set key=value and named flags."""
    flags = COMMON_FLAGS
    background = False

    def add_arguments(self, parser):
        parser.add_argument('-c', '--config', help='key = value configuration file')
        parser.add_argument('--set', action='append', default=[], metavar='KEY=VALUE', dest='assignments',
                            help='override one configuration key; may be repeated')
        for name in self.flags:
            parser.add_argument('--' + name.replace('_', '-'), dest=name, help=FLAG_HELP[name])
        if self.background:
            parser.add_argument('--background', action='store_true',
                                help='queue the job on a celery worker and print the task id')

    def run_config(self, options):
        cfg = RunConfig.load(options['config']) if options.get('config') else RunConfig()
        cfg = cfg.override(options.get('assignments') or [])
        return cfg.override(['%s=%s' % (name, options[name]) for name in self.flags if options.get(name) is not None])

    def handle(self, *args, **options):
        try:
            cfg = self.run_config(options)
            if options.get('background'):
                result = self.enqueue(cfg)
                self.stdout.write('Queued task %s' % result.id)
                return
            self.run(cfg, **options)
        except SkvqError as e:
            raise CommandError(e.one_line())

    def enqueue(self, cfg):
        raise NotImplementedError()

    def run(self, cfg, **options):
        raise NotImplementedError()
