import logging
import struct

import numpy as np
import pandas as pd
import torch
from torch.utils.data import Dataset

from engine.diffcore import DTYPE
from engine.errors import FormatError, InputShapeError

logger = logging.getLogger(__name__)

DATASET_MAGIC = b'GBDS1'
_HEADER = struct.Struct('<IIdQB')  # N, M, dt, count, provenance
PROVENANCES = ('iid', 'trajectory')

FIELDS = ('q', 'qdot', 'u', 'q_next', 'qdot_next')


class TransitionDataset(Dataset):
    """
    Ordered transitions (q, qdot, u) -> (q', qdot') sharing dimensions and time step.

    Indexing with an int returns one sample, indexing with a list/array/tensor of ints returns a
    whole batch; both as dicts of tensors keyed by `FIELDS`.
    """

    def __init__(self, q, qdot, u, q_next, qdot_next, dt, provenance='iid'):
        """
        :param q, qdot, q_next, qdot_next: Arrays of shape (count, N)
        :param u: Array of shape (count, M)
        :param dt: Time step between (q, qdot) and (q', qdot')
        :param provenance: 'iid' (independently sampled) or 'trajectory' (consecutive rollout steps)
        """
        tensors = [torch.as_tensor(x, dtype=DTYPE) for x in (q, qdot, u, q_next, qdot_next)]
        count = tensors[0].shape[0]
        if any(t.dim() != 2 or t.shape[0] != count for t in tensors):
            raise InputShapeError('Transition arrays must be 2D with a common length')
        n = tensors[0].shape[1]
        if any(t.shape[1] != n for t in tensors[:2] + tensors[3:]):
            raise InputShapeError('State arrays must share the number of coordinates')
        if dt <= 0:
            raise ValueError(f'Time step must be positive, got {dt}')
        if provenance not in PROVENANCES:
            raise ValueError(f'Unknown provenance {provenance}')
        self.q, self.qdot, self.u, self.q_next, self.qdot_next = tensors
        self.dt = float(dt)
        self.provenance = provenance

    @property
    def n(self):
        return self.q.shape[1]

    @property
    def m(self):
        return self.u.shape[1]

    def __len__(self):
        return self.q.shape[0]

    def __getitem__(self, idx):
        if not isinstance(idx, (int, np.integer)):
            idx = torch.as_tensor(idx, dtype=torch.long)
        return {name: getattr(self, name)[idx] for name in FIELDS}

    def batch(self):
        """ The whole dataset as one batch """
        return {name: getattr(self, name) for name in FIELDS}

    @classmethod
    def from_rollout(cls, states, controls, dt):
        """
        Consecutive transitions of a trajectory.

        :param states: GeneralizedState with a leading time axis of length T + 1
        :param controls: Inputs of shape (T, M)
        """
        if len(states) != len(controls) + 1:
            raise InputShapeError(f'{len(states)} states do not match {len(controls)} controls')
        return cls(states.q[:-1], states.qdot[:-1], controls, states.q[1:], states.qdot[1:], dt, 'trajectory')

    def concat(self, other):
        if (self.n, self.m) != (other.n, other.m) or self.dt != other.dt:
            raise InputShapeError(f'Cannot concatenate datasets with (N, M, dt) = {(self.n, self.m, self.dt)} '
                                  f'and {(other.n, other.m, other.dt)}')
        provenance = self.provenance if self.provenance == other.provenance else 'trajectory'
        return TransitionDataset(*(torch.cat([getattr(self, f), getattr(other, f)]) for f in FIELDS),
                                 dt=self.dt, provenance=provenance)

    def rows(self):
        """ Flat float64 array with one row (q, qdot, u, q', qdot') per transition """
        return torch.cat([getattr(self, f) for f in FIELDS], dim=1).numpy()

    def to_dataframe(self):
        n, m = self.n, self.m
        columns = ([f'q{i + 1}' for i in range(n)] + [f'qdot{i + 1}' for i in range(n)] + [f'u{i + 1}' for i in range(m)]
                   + [f'q{i + 1}_next' for i in range(n)] + [f'qdot{i + 1}_next' for i in range(n)])
        return pd.DataFrame(self.rows(), columns=columns)


def save_dataset(dataset, path):
    """ Writes the dataset as a GBDS1 file: magic, header (N, M, dt, count, provenance), little-endian rows """
    header = _HEADER.pack(dataset.n, dataset.m, dataset.dt, len(dataset), PROVENANCES.index(dataset.provenance))
    with open(path, 'wb') as f:
        f.write(DATASET_MAGIC)
        f.write(header)
        f.write(np.ascontiguousarray(dataset.rows(), dtype='<f8').tobytes())
    logger.debug('Saved %d transitions to %s', len(dataset), path)


def load_dataset(path):
    with open(path, 'rb') as f:
        data = f.read()
    if not data.startswith(DATASET_MAGIC):
        raise FormatError(f'{path} is not a GBDS1 dataset file')
    offset = len(DATASET_MAGIC)
    if len(data) < offset + _HEADER.size:
        raise FormatError(f'{path}: truncated header')
    n, m, dt, count, provenance = _HEADER.unpack_from(data, offset)
    offset += _HEADER.size
    width = 4 * n + m
    if provenance >= len(PROVENANCES):
        raise FormatError(f'{path}: unknown provenance tag {provenance}')
    if len(data) - offset != 8 * width * count:
        raise FormatError(f'{path}: expected {count} rows of {width} values, found {len(data) - offset} bytes')
    rows = np.frombuffer(data, dtype='<f8', offset=offset).reshape(count, width).astype(np.float64)
    splits = np.cumsum([n, n, m, n])
    return TransitionDataset(*np.split(rows, splits, axis=1), dt=dt, provenance=PROVENANCES[provenance])
