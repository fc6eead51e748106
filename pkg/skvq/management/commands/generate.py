from skvq.management.base import COMMON_FLAGS, SkvqCommand
from skvq.runner import run_generate


class Command(SkvqCommand):
    help = 'greedily decodes from a prompt through the quantized KV cache'
    flags = COMMON_FLAGS + ('prompt', 'n_new', 'snapshot')

    def run(self, cfg, **options):
        result = run_generate(cfg)
        self.stdout.write('tokens: %s' % ' '.join(map(str, result.tokens)))
        self.stdout.write('declared bits: key %.4g, value %.4g' % result.declared_bits)
        for name in ('key', 'value'):
            stats = result.stats[name]
            self.stdout.write('%s cache: %d quantized, %d retained, %d window tokens; %d code + %d param + %d fp '
                              'bytes; %.4g bits per quantized element' %
                              (name, stats.quantized_tokens, stats.retained_tokens, stats.window_tokens,
                               stats.code_bytes, stats.param_bytes, stats.fp_bytes, stats.quantized_bits))
        self.stdout.write('retained tokens: %d' % len(result.retained))
