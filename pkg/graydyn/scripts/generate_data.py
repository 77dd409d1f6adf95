import logging
import os
import sys

from engine.datasets import save_dataset
from misc.config import run_command
from misc.utils import derive_seed
from systems.double_pendulum import true_system
from systems.sampling import sample_transitions

logger = logging.getLogger(__name__)


def generate_data(config, output_dir):
    """ Samples i.i.d. transitions of the true double pendulum into a GBDS1 file """
    spec = config.sampling_spec(seed=derive_seed(config.seed, 'data'))
    dataset = sample_transitions(true_system(config.pendulum_params()), spec)
    path = os.path.join(output_dir, config.get_str('filename', 'dataset.gbds'))
    save_dataset(dataset, path)
    logger.info('Wrote %d transitions (dt=%g) to %s', len(dataset), dataset.dt, path)
    logger.info('Summary statistics:\n%s', dataset.to_dataframe().describe().loc[['mean', 'std', 'min', 'max']].T)
    return path


def main(argv=None):
    return run_command('generate-data', generate_data, argv, description='Sample a transition dataset')


if __name__ == "__main__":
    sys.exit(main())
