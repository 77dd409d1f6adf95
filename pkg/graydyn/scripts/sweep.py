import logging
import os
import sys

from engine.models import MODEL_NAMES
from engine.trainer import SWEEP_COLUMNS, VALIDATION_SIZE, data_efficiency_sweep
from engine.errors import ConfigError
from misc.config import run_command
from misc.utils import derive_seed, write_csv

logger = logging.getLogger(__name__)

BRACKET_COLUMNS = ('model', 'seed', 'failing_size', 'passing_size', 'bracket')


def sweep_command(config, output_dir):
    """ Data-efficiency sweep of every requested model over every seed """
    models = config.get_list('model', list(MODEL_NAMES))
    seeds = config.get_list('seeds', None, int)
    if seeds is None:
        seeds = [derive_seed(config.seed, f'sweep-{k}') for k in range(config.get_int('num_seeds', 5))]
    unknown = set(models) - set(MODEL_NAMES)
    if unknown:
        raise ConfigError(f'Unknown models {sorted(unknown)}')

    train_config = config.train_config()
    sampling = config.sampling_spec()
    cells, brackets = [], []
    for name in models:
        result = data_efficiency_sweep(config.model_spec(name), train_config.threshold, config.get_int('max_size', 8192),
                                       seeds, config=train_config, sampling=sampling,
                                       val_size=config.get_int('val_size', VALIDATION_SIZE),
                                       params=config.pendulum_params(), workers=config.get_int('workers', 1))
        cells.extend(result.cells)
        for seed, bracket in result.brackets.items():
            brackets.append({'model': name, 'seed': seed, 'failing_size': '' if bracket.failing is None else bracket.failing,
                             'passing_size': '' if bracket.passing is None else bracket.passing, 'bracket': str(bracket)})
            logger.info('%s seed %d: %s', name, seed, bracket)
        # rewritten after every model
        write_csv(cells, os.path.join(output_dir, 'sweep.csv'), columns=SWEEP_COLUMNS)
        write_csv(brackets, os.path.join(output_dir, 'brackets.csv'), columns=BRACKET_COLUMNS)


def main(argv=None):
    return run_command('sweep', sweep_command, argv, description='Minimal training-set size per model and seed')


if __name__ == "__main__":
    sys.exit(main())
