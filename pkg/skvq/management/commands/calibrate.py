from skvq.management.base import SkvqCommand
from skvq.runner import run_calibrate


class Command(SkvqCommand):
    help = 'builds the channel reorder plan and clipping scales for a model and writes a calibration artifact'
    background = True

    def enqueue(self, cfg):
        from skvq.tasks import calibrate_model
        return calibrate_model.delay(cfg.serialize())

    def run(self, cfg, **options):
        artifact = run_calibrate(cfg)
        self.stdout.write('Wrote %s: %s keys, %s values, plan %08x' %
                          (cfg.artifact, artifact.key_spec, artifact.value_spec, artifact.plan.checksum()))
        for index, (before, after) in enumerate(artifact.metadata['losses']):
            key, value = artifact.schedule.layers[index]
            self.stdout.write('  layer %d: loss %.6g -> %.6g, clipped %d/%d key and %d/%d value groups' %
                              (index, before, after, (key < 1).sum(), len(key), (value < 1).sum(), len(value)))
