import json
import logging
import os
import struct
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import torch

from engine.diffcore import AdamState, ParamVector
from engine.errors import FormatError
from engine.models import ModelSpec, build

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b'GBDYN1'
CHECKPOINT_VERSION = 1
CHECKPOINT_NAME = 'model.gbdyn'


@dataclass
class Checkpoint:
    """ A model with the spec it was built from and the state needed to resume training """
    model: torch.nn.Module
    spec: ModelSpec
    dt: Optional[float] = None
    epoch: int = 0
    history: List[dict] = field(default_factory=list)
    adam: Optional[AdamState] = None


def _to_le(values):
    return np.ascontiguousarray(values.detach().numpy(), dtype='<f8').tobytes()


def save_model(path, model, spec, dt=None, epoch=0, history=None, adam=None):
    """
    Writes a GBDYN1 checkpoint: magic, length-prefixed JSON descriptor, the flat trainable
    parameters as little-endian float64 and, when given, the Adam moments (and per-element
    learning rates).
    """
    params = ParamVector.from_module(model)
    descriptor = {
        'version': CHECKPOINT_VERSION,
        'spec': spec.to_dict(),
        'dt': dt,
        'epoch': epoch,
        'history': history or [],
        'adam': None,
    }
    blobs = [_to_le(params.values)]
    if adam is not None:
        scalar_lr = not isinstance(adam.lr, torch.Tensor)
        descriptor['adam'] = {'lr': float(adam.lr) if scalar_lr else None, 'beta1': adam.beta1,
                              'beta2': adam.beta2, 'eps': adam.eps, 'step': adam.step}
        blobs += [_to_le(adam.m), _to_le(adam.v)]
        if not scalar_lr:
            blobs.append(_to_le(adam.lr))

    header = json.dumps(descriptor).encode('utf-8')
    with open(path, 'wb') as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack('<I', len(header)))
        f.write(header)
        f.write(struct.pack('<Q', len(params)))
        for blob in blobs:
            f.write(blob)
    logger.debug('Saved %s checkpoint (%d parameters, epoch %d) to %s', spec.name, len(params), epoch, path)


def load_model(path):
    """
    Loads a checkpoint written by `save_model`; `path` may also be a directory holding `model.gbdyn`.

    :return: Checkpoint
    """
    fname = os.path.join(path, CHECKPOINT_NAME) if os.path.isdir(path) else path
    with open(fname, 'rb') as f:
        data = f.read()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise FormatError(f'{fname} is not a GBDYN1 checkpoint')
    offset = len(CHECKPOINT_MAGIC)

    def take(nbytes):
        nonlocal offset
        if offset + nbytes > len(data):
            raise FormatError(f'{fname}: truncated checkpoint')
        chunk = data[offset:offset + nbytes]
        offset += nbytes
        return chunk

    (header_len,) = struct.unpack('<I', take(4))
    try:
        descriptor = json.loads(take(header_len).decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise FormatError(f'{fname}: corrupt descriptor ({err})') from err
    if descriptor.get('version') != CHECKPOINT_VERSION:
        raise FormatError(f'{fname}: unsupported checkpoint version {descriptor.get("version")}')

    spec = ModelSpec.from_dict(descriptor['spec'])
    model = build(spec)
    template = ParamVector.from_module(model)
    (count,) = struct.unpack('<Q', take(8))
    if count != len(template):
        raise FormatError(f'{fname}: {count} stored parameters, but a {spec.name} model has {len(template)}')

    def vector():
        return torch.from_numpy(np.frombuffer(take(8 * count), dtype='<f8').astype(np.float64))

    template.with_values(vector()).assign_to(model)

    adam = None
    if descriptor['adam'] is not None:
        meta = descriptor['adam']
        m, v = vector(), vector()
        lr = meta['lr'] if meta['lr'] is not None else vector()
        adam = AdamState(m=m, v=v, lr=lr, beta1=meta['beta1'], beta2=meta['beta2'], eps=meta['eps'], step=meta['step'])
    if offset != len(data):
        raise FormatError(f'{fname}: {len(data) - offset} trailing bytes')

    return Checkpoint(model, spec, descriptor['dt'], descriptor['epoch'], descriptor['history'], adam)
