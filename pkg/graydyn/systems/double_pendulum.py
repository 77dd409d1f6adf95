import logging
from dataclasses import asdict, dataclass, replace

import torch

from engine.diffcore import DTYPE
from engine.dynamics import (DynModel, PhysicalParams, WhiteBoxAffineForce, WhiteBoxDoublePendulumMass,
                             WhiteBoxDoublePendulumPotential)
from engine.errors import ConfigError

logger = logging.getLogger(__name__)

MASS_PARAMS = ('m1', 'm2', 'l1', 'l2')
POTENTIAL_PARAMS = MASS_PARAMS + ('g',)


@dataclass(frozen=True)
class DoublePendulumParams:
    """
    Actuated double pendulum of two uniform rods. Coordinates are absolute angle of the first
    link and relative angle of the second, zero hanging down. The generalized force is
    b * u + eta * qdot, so a negative eta damps.
    """
    m1: float = 10.0
    m2: float = 10.0
    l1: float = 1.0
    l2: float = 1.0
    g: float = 10.0
    b1: float = 1.0
    b2: float = 1.0
    eta1: float = -0.5
    eta2: float = -0.5

    def __post_init__(self):
        for name in MASS_PARAMS:
            if not getattr(self, name) > 0:
                raise ConfigError(f'{name} must be strictly positive, got {getattr(self, name)}')

    @classmethod
    def nominal(cls):
        """ Nominal parameters of the swing-up experiments """
        return cls()

    def with_damping(self, eta):
        return replace(self, eta1=eta, eta2=eta)

    def as_dict(self):
        return asdict(self)

    @property
    def b(self):
        return (self.b1, self.b2)

    @property
    def eta(self):
        return (self.eta1, self.eta2)


def true_system(params=None, trainable=False):
    """
    White-box double pendulum. With `trainable=False` it is the ground-truth simulator, with
    `trainable=True` it is the fully white-box learnable model with 9 free parameters.
    """
    params = DoublePendulumParams.nominal() if params is None else params
    store = PhysicalParams({k: getattr(params, k) for k in POTENTIAL_PARAMS}, trainable=trainable)
    return DynModel(WhiteBoxDoublePendulumMass(store), WhiteBoxDoublePendulumPotential(store),
                    WhiteBoxAffineForce(params.b, params.eta, trainable=trainable), physical=store)


def end_effector(params, q):
    """
    Cartesian tip position (x, y) with the pivot at the origin and y up.

    :param q: Coordinates of shape (..., 2)
    :return: Positions of shape (..., 2)
    """
    q = torch.as_tensor(q, dtype=DTYPE)
    q1, q12 = q[..., 0], q[..., 0] + q[..., 1]
    x = params.l1 * torch.sin(q1) + params.l2 * torch.sin(q12)
    y = -params.l1 * torch.cos(q1) - params.l2 * torch.cos(q12)
    return torch.stack([x, y], -1)
