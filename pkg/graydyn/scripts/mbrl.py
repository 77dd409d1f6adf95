import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor

from control.mbrl import EPISODE_COLUMNS, mbrl_loop
from engine.datasets import save_dataset
from engine.errors import ConfigError
from engine.models import MODEL_NAMES
from misc.config import run_command
from misc.utils import derive_seed, write_csv

logger = logging.getLogger(__name__)

DEFAULT_MODELS = ('Naive', 'MVF', 'MVB')


def _run_job(spec, params, config):
    records, dataset = mbrl_loop(spec, params, config)
    return [r.as_row() for r in records], dataset


def mbrl_command(config, output_dir):
    """ Swing-up model-based RL for every requested model and seed """
    models = config.get_list('model', list(DEFAULT_MODELS))
    unknown = set(models) - set(MODEL_NAMES)
    if unknown:
        raise ConfigError(f'Unknown models {sorted(unknown)}')
    seeds = config.get_list('seeds', None, int)
    if seeds is None:
        seeds = [derive_seed(config.seed, f'mbrl-{k}') for k in range(config.get_int('num_seeds', 3))]
    params = config.pendulum_params()

    jobs = [(name, seed) for name in models for seed in seeds]
    args = [(config.model_spec(name, seed=derive_seed(seed, 'init')), params, config.mbrl_config(seed=seed))
            for name, seed in jobs]
    workers = config.get_int('workers', 1)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(_run_job, *zip(*args)))
    else:
        outputs = [_run_job(*a) for a in args]

    rows = []
    for (name, seed), (records, dataset) in zip(jobs, outputs):
        rows.extend({'model': name, 'seed': seed, **r} for r in records)
        save_dataset(dataset, os.path.join(output_dir, f'dataset_{name}_{seed}.gbds'))
        first = next((r['episode'] for r in records if r['success']), None)
        logger.info('%s seed %d: first success %s', name, seed, 'never' if first is None else f'in episode {first}')
    write_csv(rows, os.path.join(output_dir, 'episodes.csv'), columns=('model', 'seed') + EPISODE_COLUMNS)


def main(argv=None):
    return run_command('mbrl', mbrl_command, argv, description='Model-based RL on the double pendulum swing-up')


if __name__ == "__main__":
    sys.exit(main())
