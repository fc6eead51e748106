import io

from celery import shared_task

from skvq.config import RunConfig
from skvq.evaluation import write_csv
from skvq.runner import run_eval
from skvq.utils.progress import Progress

__all__ = ('compare_strategies_task',)


@shared_task(bind=True)
def compare_strategies_task(self, config_text):
    cfg = RunConfig.parse(config_text)
    with Progress(self, 1, stage='Preparing') as p:
        report = run_eval(cfg, p)

    out = io.StringIO()
    write_csv(report.rows, out)
    if cfg.output:
        with open(cfg.output, 'w') as f:
            f.write(out.getvalue())
    return out.getvalue()
