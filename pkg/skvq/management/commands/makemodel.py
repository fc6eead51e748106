from skvq.management.base import SkvqCommand
from skvq.runner import run_makemodel

SHAPE = (('layers', 'n_layers'), ('hidden', 'hidden'), ('heads', 'n_heads'), ('kv_heads', 'n_kv_heads'),
         ('vocab', 'vocab'), ('mlp_hidden', 'mlp_hidden'))


class Command(SkvqCommand):
    help = 'writes a seeded toy model with heavy-tailed key/value channels'
    flags = ('model', 'output', 'seed')

    def add_arguments(self, parser):
        super().add_arguments(parser)
        for flag, _ in SHAPE:
            parser.add_argument('--' + flag.replace('_', '-'), type=int, dest=flag)
        parser.add_argument('--rope', action='store_true', default=None, help='use rotary position embeddings')

    def run(self, cfg, **options):
        overrides = {name: options[flag] for flag, name in SHAPE if options.get(flag) is not None}
        if options.get('rope'):
            overrides['rope'] = True
        model = run_makemodel(cfg, **overrides)
        self.stdout.write('Wrote %s: %r' % (cfg.model or cfg.output, model))
