from skvq.evaluation import format_text, write_csv
from skvq.management.base import COMMON_FLAGS, SkvqCommand
from skvq.runner import run_eval


class Command(SkvqCommand):
    help = 'compares quantization strategies against the full-precision cache'
    background = True
    flags = COMMON_FLAGS + ('strategies', 'eval_seeds')

    def enqueue(self, cfg):
        from skvq.tasks import compare_strategies_task
        return compare_strategies_task.delay(cfg.serialize())

    def run(self, cfg, **options):
        report = run_eval(cfg)
        self.stdout.write(format_text(report.rows), ending='')
        if cfg.output:
            with open(cfg.output, 'w') as f:
                write_csv(report.rows, f)
            self.stdout.write('Wrote %s' % cfg.output)
