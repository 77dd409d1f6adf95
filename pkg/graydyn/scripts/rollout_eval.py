import logging
import os
import sys

import numpy as np
import pandas as pd
import torch

from engine.diffcore import DTYPE
from engine.dynamics import GeneralizedState, rollout
from engine.errors import ConfigError
from engine.predictor import load_model
from misc.config import run_command
from misc.utils import derive_seed, write_csv
from systems.double_pendulum import true_system

logger = logging.getLogger(__name__)

TRUE_LABEL = 'true'


def state_columns(label, n):
    return [f'{label}_q{i + 1}' for i in range(n)] + [f'{label}_qdot{i + 1}' for i in range(n)]


def compare_rollouts(system, models, x0, controls, dt):
    """
    Rolls out the true system and every model from the same state under the same inputs.

    :param models: Dict label -> model
    :return: DataFrame with one row per step: time, states of all rollouts, per-model state error
    """
    with torch.no_grad():
        reference = rollout(system, x0, controls, dt).as_vector()
        steps = reference.shape[0]
        frame = {'step': np.arange(steps), 't': np.arange(steps) * dt}
        columns = {TRUE_LABEL: reference}
        for label, model in models.items():
            columns[label] = rollout(model, x0, controls, dt, check_finite=False).as_vector()

    n = x0.n
    for label, states in columns.items():
        frame.update(zip(state_columns(label, n), states.numpy().T))
    for label in models:
        frame[f'{label}_error'] = torch.linalg.norm(columns[label] - reference, dim=-1).numpy()
    return pd.DataFrame(frame)


def rollout_eval_command(config, output_dir):
    """ Multi-step prediction of trained checkpoints against the true system """
    checkpoints = [load_model(path) for path in config.get_list('checkpoints')]
    if not checkpoints:
        raise ConfigError('No checkpoints given')
    dts = {c.dt for c in checkpoints}
    if len(dts) != 1 or None in dts:
        raise ConfigError(f'Checkpoints disagree on the time step: {sorted(map(str, dts))}')
    dt = dts.pop()

    models = {}
    for c in checkpoints:
        label = c.spec.name if c.spec.name not in models else f'{c.spec.name}{len(models)}'
        models[label] = c.model
    system = true_system(config.pendulum_params())
    for label, model in models.items():
        if (model.n, model.m) != (system.n, system.m):
            raise ConfigError(f'Checkpoint {label} has N={model.n}, M={model.m}, the true system has '
                              f'N={system.n}, M={system.m}')
    horizon = int(round(config.get_float('horizon', 5.0) / dt))
    if horizon < 1:
        raise ConfigError('Rollout horizon shorter than one time step')
    spec = config.sampling_spec()

    summary = []
    for k in range(config.get_int('trajectories', 3)):
        rng = np.random.default_rng(derive_seed(config.seed, f'rollout-{k}'))
        q = rng.uniform(*spec.q_range, size=system.n)
        qdot = rng.uniform(*spec.qdot_range, size=system.n)
        controls = rng.normal(0.0, spec.u_std, size=(horizon, system.m))
        x0 = GeneralizedState(torch.as_tensor(q, dtype=DTYPE), torch.as_tensor(qdot, dtype=DTYPE))

        df = compare_rollouts(system, models, x0, torch.as_tensor(controls, dtype=DTYPE), dt)
        write_csv(df, os.path.join(output_dir, f'rollout_{k}.csv'))
        for label in models:
            summary.append({'trajectory': k, 'model': label, 'mean_error': df[f'{label}_error'].mean()})
            logger.info('Trajectory %d, %s: mean state error %.4g', k, label, summary[-1]['mean_error'])
    write_csv(summary, os.path.join(output_dir, 'summary.csv'), columns=('trajectory', 'model', 'mean_error'))


def main(argv=None):
    return run_command('rollout-eval', rollout_eval_command, argv,
                       description='Compare multi-step predictions of checkpoints with the true system')


if __name__ == "__main__":
    sys.exit(main())
