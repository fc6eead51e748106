"""SKVC calibration artifacts.

One file binds the reorder plan, the clipping schedule and the smoothing factors
to the model they were calibrated on. Layout (all little-endian):

    magic "SKVC", u16 version
    32 byte SHA-256 model checksum
    key QuantSpec, value QuantSpec
    reorder plan
    clipping schedule
    u32 layer count, per layer: u32 + f32 key factors, u32 + f32 value factors
    string JSON metadata
    u32 CRC32
"""
import json
import logging

import numpy as np

from skvq.calibration import ClipSchedule
from skvq.exceptions import FormatError, ModelError, PlanError, SkvqError
from skvq.quant.spec import QuantSpec
from skvq.reorder import ReorderPlan
from skvq.utils.binary import BinaryReader, BinaryWriter

logger = logging.getLogger('skvq.artifacts')
json_logger = logging.getLogger('skvq.json.artifacts')

ARTIFACT_MAGIC = b'SKVC'
ARTIFACT_VERSION = 1
CHECKSUM_SIZE = 32


class Artifact(object):
    def __init__(self, model_checksum, key_spec, value_spec, plan, schedule, smoothing, metadata=None):
        if len(model_checksum) != CHECKSUM_SIZE:
            raise FormatError('model checksum must be %d bytes' % CHECKSUM_SIZE)
        self.model_checksum = bytes(model_checksum)
        self.key_spec = key_spec
        self.value_spec = value_spec
        self.plan = plan
        self.schedule = schedule
        self.smoothing = [(np.asarray(key, dtype=np.float32), np.asarray(value, dtype=np.float32))
                          for key, value in smoothing]
        self.metadata = dict(metadata or {})
        if (schedule.key_spec, schedule.value_spec) != (key_spec, value_spec):
            raise PlanError('clipping schedule was searched for %s / %s, artifact declares %s / %s' %
                            (schedule.key_spec, schedule.value_spec, key_spec, value_spec))
        schedule.check(plan)
        if len(self.smoothing) != plan.n_layers:
            raise PlanError('%d layers of smoothing factors for a %d layer plan' % (len(self.smoothing),
                                                                                    plan.n_layers))

    def check(self, model):
        if model.checksum() != self.model_checksum:
            raise ModelError('calibration artifact was produced for a different model')
        self.plan.check(model.config)

    def write(self, path):
        writer = BinaryWriter(ARTIFACT_MAGIC, ARTIFACT_VERSION)
        writer.raw(self.model_checksum)
        self.key_spec.write(writer)
        self.value_spec.write(writer)
        self.plan.write(writer)
        self.schedule.write(writer)
        writer.u32(len(self.smoothing))
        for pair in self.smoothing:
            for factors in pair:
                writer.u32(len(factors))
                writer.array(factors, '<f4')
        writer.string(json.dumps(self.metadata, sort_keys=True, separators=(',', ':')))

        data = writer.write(path)
        logger.info('Wrote calibration artifact %s (%d bytes)', path, len(data))
        json_logger.info(json.dumps({'event': 'artifact_written', 'path': str(path), 'bytes': len(data),
                                     'plan_checksum': self.plan.checksum()}, separators=(',', ':')))
        return data

    @classmethod
    def read(cls, path):
        reader = BinaryReader.from_path(path, ARTIFACT_MAGIC, (ARTIFACT_VERSION,))
        try:
            checksum = reader.raw(CHECKSUM_SIZE)
            key_spec = QuantSpec.read(reader)
            value_spec = QuantSpec.read(reader)
            plan = ReorderPlan.read(reader)
            schedule = ClipSchedule.read(reader)
            smoothing = []
            for _ in range(reader.u32()):
                key = reader.array('<f4', reader.u32())
                smoothing.append((key, reader.array('<f4', reader.u32())))
            metadata = json.loads(reader.string())
            reader.finish()
            return cls(checksum, key_spec, value_spec, plan, schedule, smoothing, metadata)
        except FormatError:
            raise
        except SkvqError as e:
            raise FormatError('artifact %s is inconsistent: %s' % (path, e.message))
        except ValueError as e:
            raise FormatError('artifact %s has unreadable metadata: %s' % (path, e))

    def codecs(self):
        return self.schedule.codecs(self.plan)

    def __eq__(self, other):
        return (isinstance(other, Artifact) and self.model_checksum == other.model_checksum and
                self.key_spec == other.key_spec and self.value_spec == other.value_spec and
                self.plan == other.plan and self.schedule == other.schedule and self.metadata == other.metadata and
                len(self.smoothing) == len(other.smoothing) and
                all(np.array_equal(a, c) and np.array_equal(b, d)
                    for (a, b), (c, d) in zip(self.smoothing, other.smoothing)))

    def __ne__(self, other):
        return not self == other
