from skvq.management.base import SkvqCommand
from skvq.roofline import format_text, write_csv
from skvq.runner import run_roofline


class Command(SkvqCommand):
    help = 'estimates KV cache memory and decode latency for a Llama-7B shaped model'
    flags = ('output', 'key_bits', 'value_bits', 'group_size', 'param_format', 'batches', 'seqs')

    def run(self, cfg, **options):
        report = run_roofline(cfg)
        self.stdout.write(format_text(report.rows), ending='')
        for batch, label, tokens in report.capacity:
            self.stdout.write('batch %d, %s: fits %d tokens per sequence' % (batch, label, tokens))
        if cfg.output:
            with open(cfg.output, 'w') as f:
                write_csv(report.rows, f)
            self.stdout.write('Wrote %s' % cfg.output)
