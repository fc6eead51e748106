"""SKVM model files: configuration header, tensor table, raw little-endian float32 data."""
import logging

import numpy as np

from skvq.engine.model import LayerWeights, Model, ModelConfig
from skvq.exceptions import FormatError, ModelError
from skvq.utils.binary import BinaryReader, BinaryWriter

logger = logging.getLogger('skvq.engine')

MODEL_MAGIC = b'SKVM'
MODEL_VERSION = 1

_CONFIG_INTS = ('n_layers', 'hidden', 'n_heads', 'n_kv_heads', 'vocab', 'mlp_hidden')


def write_model(model, path):
    config = model.config
    writer = BinaryWriter(MODEL_MAGIC, MODEL_VERSION)
    for name in _CONFIG_INTS:
        writer.u32(getattr(config, name))
    writer.u8(int(config.rope))
    writer.f64(config.rope_base)

    tensors = list(model.tensors())
    writer.u32(len(tensors))
    offset = 0
    for name, tensor in tensors:
        writer.string(name)
        writer.u8(tensor.ndim)
        for dim in tensor.shape:
            writer.u32(dim)
        writer.u64(offset)
        offset += tensor.size * 4
    writer.u64(offset)
    for name, tensor in tensors:
        writer.array(tensor, '<f4')

    data = writer.write(path)
    logger.info('Wrote model %s (%d bytes, %d tensors)', path, len(data), len(tensors))
    return data


def read_model(path):
    reader = BinaryReader.from_path(path, MODEL_MAGIC, (MODEL_VERSION,))
    values = {name: reader.u32() for name in _CONFIG_INTS}
    values['rope'] = bool(reader.u8())
    values['rope_base'] = reader.f64()
    try:
        config = ModelConfig(**values)
    except ModelError as e:
        raise FormatError('model header is invalid: %s' % e.message)

    table = []
    for _ in range(reader.u32()):
        name = reader.string()
        shape = tuple(reader.u32() for _ in range(reader.u8()))
        table.append((name, shape, reader.u64()))
    data_size = reader.u64()
    data = reader.raw(data_size)
    reader.finish()

    tensors = {}
    for name, shape, offset in table:
        count = int(np.prod(shape, dtype=np.int64))
        if offset + count * 4 > data_size:
            raise FormatError('tensor %s runs past the end of the data section' % name)
        tensors[name] = np.frombuffer(data, dtype='<f4', count=count, offset=offset).reshape(shape).astype(np.float32)

    try:
        layers = [LayerWeights(**{name: tensors['layers.%d.%s' % (index, name)] for name in LayerWeights.TENSORS})
                  for index in range(config.n_layers)]
        return Model(config, tensors['embed'], layers, tensors['w_out'])
    except KeyError as e:
        raise FormatError('model file is missing tensor %s' % e.args[0])
    except ModelError as e:
        raise FormatError('model file is inconsistent: %s' % e.message)
