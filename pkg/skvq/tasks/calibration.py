from celery import shared_task

from skvq.config import RunConfig
from skvq.runner import run_calibrate
from skvq.utils.progress import Progress

__all__ = ('calibrate_model',)


@shared_task(bind=True)
def calibrate_model(self, config_text):
    cfg = RunConfig.parse(config_text)
    with Progress(self, 1, stage='Loading model') as p:
        artifact = run_calibrate(cfg, p)
    return {
        'artifact': cfg.artifact,
        'plan_checksum': artifact.plan.checksum(),
        'losses': artifact.metadata['losses'],
    }
