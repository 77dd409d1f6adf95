import logging
import os
import sys

from tensorboardX import SummaryWriter

from engine.datasets import load_dataset
from engine.errors import ConfigError
from engine.models import count_parameters, build
from engine.predictor import CHECKPOINT_NAME, load_model, save_model
from engine.trainer import train
from misc.config import run_command
from misc.utils import derive_seed, write_csv

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ('epoch', 'train_loss', 'val_loss')


def resume(path, dataset):
    """
    Loads model, optimizer state and loss history from a previous checkpoint
    """
    logger.info("=> loading checkpoint '%s'", path)
    checkpoint = load_model(path)
    if checkpoint.dt is not None and checkpoint.dt != dataset.dt:
        raise ConfigError(f'Checkpoint was trained with dt={checkpoint.dt}, dataset has dt={dataset.dt}')
    return checkpoint


def train_command(config, output_dir):
    """ Trains a model on a GBDS1 dataset, writes the checkpoint and the loss history """
    train_set = load_dataset(config.existing_path('dataset'))
    val_path = config.existing_path('val_dataset', None)
    val_set = load_dataset(val_path) if val_path else None

    resume_path = config.get_str('resume', '')
    if resume_path == 'RESUME':
        resume_path = os.path.join(output_dir, CHECKPOINT_NAME)
    if resume_path:
        checkpoint = resume(resume_path, train_set)
        model, spec, adam, history = checkpoint.model, checkpoint.spec, checkpoint.adam, checkpoint.history
    else:
        spec = config.model_spec(config.get_str('model'), seed=derive_seed(config.seed, 'init'))
        model, adam, history = build(spec), None, []
    if (spec.n, spec.m) != (train_set.n, train_set.m):
        raise ConfigError(f'{spec.name} has N={spec.n}, M={spec.m}, dataset has N={train_set.n}, M={train_set.m}')
    if val_set is not None and (val_set.n, val_set.m, val_set.dt) != (train_set.n, train_set.m, train_set.dt):
        raise ConfigError('Validation set does not match the training set')
    logger.info('Training %s (%d parameters) on %d samples', spec.name, count_parameters(model), len(train_set))

    writer = SummaryWriter(output_dir)
    try:
        result = train(model, train_set, config.train_config(), val_set=val_set, writer=writer, adam=adam,
                       history=history)
    finally:
        writer.close()

    save_model(os.path.join(output_dir, CHECKPOINT_NAME), result.model, spec, dt=train_set.dt,
               epoch=len(result.history), history=result.history, adam=result.adam)
    write_csv(result.history, os.path.join(output_dir, 'history.csv'), columns=HISTORY_COLUMNS)
    if result.history:
        logger.info('-> Final train loss %g', result.history[-1]['train_loss'])


def main(argv=None):
    return run_command('train', train_command, argv, description='Train a model on a transition dataset')


if __name__ == "__main__":
    sys.exit(main())
