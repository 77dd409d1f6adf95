import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn

from engine.errors import InputShapeError, NumericError

logger = logging.getLogger(__name__)

DTYPE = torch.float64


class Mlp(nn.Module):
    """
    Feed-forward network with tanh hidden activations and a linear output layer.

    tanh is smooth, so the input Jacobian returned by `input_jacobian` is exact and is itself
    a differentiable function of the weights (losses built on it have exact parameter gradients).
    """

    def __init__(self, widths, seed=0, zero=False):
        """
        :param widths: Layer widths (input dim, hidden dims..., output dim)
        :param seed: Seed of the weight initialisation
        :param zero: Initialise all weights to zero instead of sampling them
        """
        super().__init__()
        widths = tuple(int(w) for w in widths)
        if len(widths) < 2 or min(widths) < 1:
            raise InputShapeError(f'Invalid layer widths {widths}')
        self.widths = widths
        self.layers = nn.ModuleList([nn.Linear(a, b, dtype=DTYPE) for a, b in zip(widths[:-1], widths[1:])])
        self.reset_parameters(seed, zero)

    def reset_parameters(self, seed=0, zero=False):
        """ Weights ~ U(-sqrt(1/fan_in), sqrt(1/fan_in)), biases zero """
        generator = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            for layer in self.layers:
                layer.bias.zero_()
                if zero:
                    layer.weight.zero_()
                else:
                    bound = math.sqrt(1.0 / layer.in_features)
                    sample = torch.rand(layer.weight.shape, generator=generator, dtype=DTYPE)
                    layer.weight.copy_((2 * sample - 1) * bound)

    @property
    def in_dim(self):
        return self.widths[0]

    @property
    def out_dim(self):
        return self.widths[-1]

    def num_parameters(self):
        return sum(b * a + b for a, b in zip(self.widths[:-1], self.widths[1:]))

    def _check_input(self, x):
        if x.shape[-1] != self.in_dim:
            raise InputShapeError(f'Network expects inputs of dim {self.in_dim}, got shape {tuple(x.shape)}')

    def forward(self, x):
        self._check_input(x)
        for layer in self.layers[:-1]:
            x = torch.tanh(layer(x))
        return self.layers[-1](x)

    def forward_with_jacobian(self, x):
        """
        Evaluates the network together with its input Jacobian, propagated forward layer by layer.

        :param x: Inputs of shape (..., in)
        :return: outputs (..., out), Jacobian (..., out, in)
        """
        self._check_input(x)
        batch_shape = x.shape[:-1]
        jac = None
        for layer in self.layers[:-1]:
            x = torch.tanh(layer(x))
            slope = (1 - x ** 2).unsqueeze(-1)
            jac = slope * (layer.weight if jac is None else torch.matmul(layer.weight, jac))
        last = self.layers[-1]
        y = last(x)
        if jac is None:
            return y, last.weight.expand(*batch_shape, *last.weight.shape)
        return y, torch.matmul(last.weight, jac)

    def input_jacobian(self, x):
        return self.forward_with_jacobian(x)[1]


def mlp_forward(net, x):
    return net(x)


def mlp_input_jacobian(net, x):
    return net.input_jacobian(x)


def trainable_parameters(module):
    """ Named trainable parameters in registration order (shared parameters appear once) """
    return [(name, p) for name, p in module.named_parameters() if p.requires_grad]


@dataclass
class ParamVector:
    """
    Flat view over the trainable parameters of a module. `index` maps parameter names to
    (offset, shape) and only depends on the module structure.
    """
    values: torch.Tensor
    index: OrderedDict

    @classmethod
    def from_module(cls, module):
        index, chunks, offset = OrderedDict(), [], 0
        for name, p in trainable_parameters(module):
            index[name] = (offset, p.shape)
            chunks.append(p.detach().reshape(-1))
            offset += p.numel()
        values = torch.cat(chunks).clone() if chunks else torch.zeros(0, dtype=DTYPE)
        return cls(values, index)

    def __len__(self):
        return self.values.numel()

    def with_values(self, values):
        if values.shape != self.values.shape:
            raise InputShapeError(f'Expected {tuple(self.values.shape)} parameter values, got {tuple(values.shape)}')
        return ParamVector(values, self.index)

    def unflatten(self):
        return OrderedDict((name, self.values[o:o + math.prod(shape)].view(shape))
                           for name, (o, shape) in self.index.items())

    def assign_to(self, module):
        params = dict(trainable_parameters(module))
        if set(params) != set(self.index):
            raise InputShapeError('Parameter vector does not match the structure of the module')
        for name, (_, shape) in self.index.items():
            if params[name].shape != shape:
                raise InputShapeError(f'Parameter {name} has shape {tuple(params[name].shape)}, the vector holds '
                                      f'{tuple(shape)}')
        with torch.no_grad():
            for name, tensor in self.unflatten().items():
                params[name].copy_(tensor)


def _first_nonfinite_module(f, module):
    """ Re-runs `f` with forward hooks and returns the name of the first module producing non-finite output """
    culprit = []

    def hook(name):
        def fn(mod, inputs, output):
            if not culprit and isinstance(output, torch.Tensor) and not torch.isfinite(output).all():
                culprit.append(name or type(mod).__name__)
        return fn

    handles = [m.register_forward_hook(hook(name)) for name, m in module.named_modules()]
    try:
        with torch.no_grad():
            f()
    finally:
        for h in handles:
            h.remove()
    return culprit[0] if culprit else 'non-module arithmetic'


def grad_wrt_params(f: Callable[[], torch.Tensor], module: nn.Module) -> ParamVector:
    """
    Exact gradient of the scalar `f()` w.r.t. all trainable parameters of `module`,
    including paths through network input Jacobians.
    """
    return value_and_grad(f, module)[1]


def value_and_grad(f: Callable[[], torch.Tensor], module: nn.Module):
    """ Like `grad_wrt_params`, also returning the objective value as a float """
    named = trainable_parameters(module)
    index = ParamVector.from_module(module).index
    value = f()
    if not torch.isfinite(value).all():
        raise NumericError(f'Non-finite objective {value.item()}, first produced by {_first_nonfinite_module(f, module)}')
    if not named or not value.requires_grad:
        return value.item(), ParamVector(torch.zeros(sum(p.numel() for _, p in named), dtype=DTYPE), index)

    params = [p for _, p in named]
    grads = torch.autograd.grad(value, params, allow_unused=True)
    flat = torch.cat([(torch.zeros_like(p) if g is None else g).reshape(-1) for p, g in zip(params, grads)])

    if not torch.isfinite(flat).all():
        # repeat the backward pass in anomaly mode, which names the backward function producing nan
        try:
            with torch.autograd.detect_anomaly():
                torch.autograd.grad(f(), params, allow_unused=True)
        except RuntimeError as err:
            raise NumericError(f'Non-finite gradient: {err}') from err
        raise NumericError('Non-finite gradient (overflow in backward pass)')
    return value.item(), ParamVector(flat, index)


def finite_difference_check(f: Callable[[], torch.Tensor], module: nn.Module, step: float,
                            floor: float = 1e-8, indices: Optional[Sequence[int]] = None) -> float:
    """
    Compares `grad_wrt_params` against central differences.

    :param step: Perturbation of each parameter
    :param floor: Absolute floor of the relative-error denominator
    :param indices: Flat parameter indices to check (all if None)
    :return: Max elementwise relative error
    """
    if step <= 0:
        raise ValueError(f'Finite-difference step must be positive, got {step}')
    analytic = grad_wrt_params(f, module).values
    params = [p for _, p in trainable_parameters(module)]
    offsets = np.cumsum([0] + [p.numel() for p in params])
    indices = range(int(offsets[-1])) if indices is None else indices

    worst = 0.0
    with torch.no_grad():
        for i in indices:
            k = int(np.searchsorted(offsets, i, side='right')) - 1
            flat, j = params[k].view(-1), int(i - offsets[k])
            original = flat[j].item()
            try:
                flat[j] = original + step
                f_plus = f().item()
                flat[j] = original - step
                f_minus = f().item()
            finally:
                flat[j] = original
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise NumericError(f'Non-finite objective when perturbing parameter {i}')
            numeric = (f_plus - f_minus) / (2 * step)
            exact = analytic[i].item()
            worst = max(worst, abs(numeric - exact) / max(abs(numeric), abs(exact), floor))
    logger.debug('Finite-difference check over %d parameters: max rel. error %g', len(indices), worst)
    return worst


@dataclass
class AdamState:
    """ Adam optimizer state; `lr` is a scalar or a per-parameter tensor """
    m: torch.Tensor
    v: torch.Tensor
    lr: Union[float, torch.Tensor] = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    @classmethod
    def zeros(cls, params: ParamVector, lr=1e-3, **kwargs):
        return cls(m=torch.zeros_like(params.values), v=torch.zeros_like(params.values), lr=lr, **kwargs)


def adam_step(state: AdamState, params: ParamVector, grad: ParamVector):
    """
    One Adam update with bias correction. Pure: returns new state and new parameters.
    """
    if grad.values.shape != params.values.shape or state.m.shape != params.values.shape:
        raise InputShapeError(f'Adam shapes disagree: params {tuple(params.values.shape)}, '
                              f'grad {tuple(grad.values.shape)}, moments {tuple(state.m.shape)}')
    g = grad.values.detach()
    step = state.step + 1
    m = state.beta1 * state.m + (1 - state.beta1) * g
    v = state.beta2 * state.v + (1 - state.beta2) * g * g
    m_hat = m / (1 - state.beta1 ** step)
    v_hat = v / (1 - state.beta2 ** step)
    values = params.values - state.lr * m_hat / (torch.sqrt(v_hat) + state.eps)
    return replace(state, m=m, v=v, step=step), params.with_values(values)
