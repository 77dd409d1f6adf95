import logging
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn

from engine.diffcore import Mlp
from engine.dynamics import (ControlAffineForce, DynModel, GenericForce, LearnedCholesky, LearnedPotential,
                             PhysicalParams, WhiteBoxAffineForce, WhiteBoxDoublePendulumMass,
                             WhiteBoxDoublePendulumPotential)
from engine.errors import ConfigError, InputShapeError
from misc.utils import derive_seed
from systems.double_pendulum import MASS_PARAMS, POTENTIAL_PARAMS, DoublePendulumParams

logger = logging.getLogger(__name__)

WHITE_BOX = 'white-box'
LEARNED = 'learned'
CONTROL_AFFINE = 'control-affine'
GENERIC = 'generic'
NAIVE = 'Naive'

# name -> (mass matrix, potential, generalized force)
MODEL_COMPONENTS = OrderedDict([
    ('W-B', (WHITE_BOX, WHITE_BOX, WHITE_BOX)),
    ('B', (WHITE_BOX, WHITE_BOX, CONTROL_AFFINE)),
    ('F', (WHITE_BOX, WHITE_BOX, GENERIC)),
    ('V', (WHITE_BOX, LEARNED, WHITE_BOX)),
    ('M', (LEARNED, WHITE_BOX, WHITE_BOX)),
    ('MB', (LEARNED, WHITE_BOX, CONTROL_AFFINE)),
    ('VB', (WHITE_BOX, LEARNED, CONTROL_AFFINE)),
    ('MV', (LEARNED, LEARNED, WHITE_BOX)),
    ('MVB', (LEARNED, LEARNED, CONTROL_AFFINE)),
    ('MVF', (LEARNED, LEARNED, GENERIC)),
])
MODEL_NAMES = tuple(MODEL_COMPONENTS) + (NAIVE,)

COMPONENT_HIDDEN = (32, 32, 32)
NAIVE_HIDDEN = (64, 64, 64)


@dataclass
class ModelSpec:
    """
    Declarative description of a model.

    :param name: One of `MODEL_NAMES`
    :param hidden: Hidden widths of every network (defaults: 3x32 for components, 3x64 for Naive)
    :param delta: Diagonal offset of the learned Cholesky factor
    :param initial_guess: Physical parameters the white-box components start from; sampled
                          as nominal * U(0.5, 2) from the seed when None
    """
    name: str
    n: int = 2
    m: int = 2
    hidden: Optional[Tuple[int, ...]] = None
    delta: float = 1.0
    seed: int = 0
    initial_guess: Optional[Dict[str, float]] = field(default=None)

    def __post_init__(self):
        if self.name not in MODEL_NAMES:
            raise ConfigError(f'Unknown model name {self.name}, expected one of {", ".join(MODEL_NAMES)}')
        if self.n < 1 or self.m < 1:
            raise ConfigError(f'Model dimensions must be positive, got N={self.n}, M={self.m}')
        if self.hidden is not None:
            self.hidden = tuple(int(w) for w in self.hidden)
            if not self.hidden or min(self.hidden) < 1:
                raise ConfigError(f'Invalid hidden widths {self.hidden}')
        if self.delta < 0:
            raise ConfigError(f'Cholesky diagonal offset must be non-negative, got {self.delta}')

    @property
    def components(self):
        return MODEL_COMPONENTS.get(self.name)

    @property
    def widths(self):
        if self.hidden is not None:
            return self.hidden
        return NAIVE_HIDDEN if self.name == NAIVE else COMPONENT_HIDDEN

    def initial_params(self):
        """ White-box starting point; eta keeps the sign of its nominal value """
        nominal = DoublePendulumParams.nominal().as_dict()
        if self.initial_guess is not None:
            unknown = set(self.initial_guess) - set(nominal)
            if unknown:
                raise ConfigError(f'Unknown physical parameters {sorted(unknown)}')
            return DoublePendulumParams(**{**nominal, **self.initial_guess})
        rng = np.random.default_rng(derive_seed(self.seed, 'whitebox'))
        factors = rng.uniform(0.5, 2.0, size=len(nominal))
        return DoublePendulumParams(**{k: v * f for (k, v), f in zip(nominal.items(), factors)})

    def to_dict(self):
        d = asdict(self)
        d['hidden'] = list(self.hidden) if self.hidden is not None else None
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get('hidden') is not None:
            d['hidden'] = tuple(d['hidden'])
        return cls(**d)


class NaiveModel(nn.Module):
    """ Black-box model: one network maps (q, qdot, u) directly to qddot """

    def __init__(self, n, m, hidden=NAIVE_HIDDEN, seed=0):
        super().__init__()
        self.n = n
        self.m = m
        self.net = Mlp((2 * n + m, *hidden, n), seed=seed)

    def forward(self, q, qdot, u):
        return naive_forward_dynamics(self, q, qdot, u)


def naive_forward_dynamics(model, q, qdot, u):
    if q.shape[-1] != model.n or qdot.shape[-1] != model.n or u.shape[-1] != model.m:
        raise InputShapeError(f'Model expects N={model.n}, M={model.m}, got q {tuple(q.shape)}, '
                              f'qdot {tuple(qdot.shape)}, u {tuple(u.shape)}')
    return model.net(torch.cat([q, qdot, u], dim=-1))


def build(spec):
    """
    Creates the model described by `spec`. White-box mass matrix and potential share one store
    of physical parameters; white-box components require the double pendulum (N = M = 2).
    """
    if spec.name == NAIVE:
        model = NaiveModel(spec.n, spec.m, spec.widths, seed=derive_seed(spec.seed, 'naive'))
        logger.debug('Built %s with %d trainable parameters', spec.name, count_parameters(model))
        return model

    mass_kind, potential_kind, force_kind = spec.components
    if WHITE_BOX in spec.components and (spec.n, spec.m) != (2, 2):
        raise ConfigError(f'{spec.name} has white-box components, which need N = M = 2 (got {spec.n}, {spec.m})')

    guess = spec.initial_params()
    names = ()
    if mass_kind == WHITE_BOX:
        names = MASS_PARAMS
    if potential_kind == WHITE_BOX:
        names = POTENTIAL_PARAMS
    store = PhysicalParams({k: getattr(guess, k) for k in names}) if names else None

    n, m, hidden = spec.n, spec.m, spec.widths
    if mass_kind == WHITE_BOX:
        mass = WhiteBoxDoublePendulumMass(store)
    else:
        mass = LearnedCholesky(n, hidden, delta=spec.delta, seed=derive_seed(spec.seed, 'mass'))
    if potential_kind == WHITE_BOX:
        potential = WhiteBoxDoublePendulumPotential(store)
    else:
        potential = LearnedPotential(n, hidden, seed=derive_seed(spec.seed, 'potential'))
    if force_kind == WHITE_BOX:
        force = WhiteBoxAffineForce(guess.b, guess.eta)
    elif force_kind == CONTROL_AFFINE:
        force = ControlAffineForce(n, m, hidden, seed=derive_seed(spec.seed, 'force'))
    else:
        force = GenericForce(n, m, hidden, seed=derive_seed(spec.seed, 'force'))

    model = DynModel(mass, potential, force, physical=store)
    logger.debug('Built %s with %d trainable parameters', spec.name, count_parameters(model))
    return model


def count_parameters(model):
    """ Number of trainable scalars; parameters shared between components count once """
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def describe(model):
    """ Component kinds (mass, potential, force) of a model, ('naive',) for the black-box model """
    if isinstance(model, NaiveModel):
        return ('naive',)
    mass = WHITE_BOX if isinstance(model.mass, WhiteBoxDoublePendulumMass) else LEARNED
    potential = WHITE_BOX if isinstance(model.potential, WhiteBoxDoublePendulumPotential) else LEARNED
    if isinstance(model.force, WhiteBoxAffineForce):
        force = WHITE_BOX
    elif isinstance(model.force, ControlAffineForce):
        force = CONTROL_AFFINE
    else:
        force = GENERIC
    return mass, potential, force


def whitebox_mask(model):
    """ Boolean mask over the flat trainable parameters marking physical (white-box) scalars """
    physical = set()
    for module in model.modules():
        if isinstance(module, (PhysicalParams, WhiteBoxAffineForce)):
            physical.update(id(p) for p in module.parameters())
    flags = [torch.full((p.numel(),), id(p) in physical, dtype=torch.bool)
             for p in model.parameters() if p.requires_grad]
    return torch.cat(flags) if flags else torch.zeros(0, dtype=torch.bool)
