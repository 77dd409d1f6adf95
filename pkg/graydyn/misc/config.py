import argparse
import configparser
import logging
import math
import os
from dataclasses import replace

from control.dircol import DircolConfig
from control.mbrl import MbrlConfig
from engine.errors import ConfigError, FormatError, InputShapeError, NumericError
from engine.models import ModelSpec
from engine.trainer import TrainConfig
from misc.utils import prepare_output_dir, set_seed
from systems.double_pendulum import DoublePendulumParams
from systems.sampling import SamplingSpec

logger = logging.getLogger(__name__)

GLOBAL = 'global'
COMMANDS = ('generate-data', 'train', 'sweep', 'rollout-eval', 'mbrl')

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

_MISSING = object()


class RunConfig(object):
    """
    INI configuration of one command. Keys are looked up in the command's section, then in
    [global]; command-line flags override both.
    """

    def __init__(self, parser, command, path=None):
        if command not in COMMANDS:
            raise ConfigError(f'Unknown command {command}')
        self.parser = parser
        self.command = command
        self.path = path
        for section in (GLOBAL, command):
            if not parser.has_section(section):
                parser.add_section(section)

    @classmethod
    def from_file(cls, path, command):
        parser = configparser.ConfigParser(interpolation=None)
        if path:
            if not os.path.isfile(path):
                raise ConfigError(f'Config file {path} does not exist')
            try:
                parser.read(path)
            except configparser.Error as err:
                raise ConfigError(f'Cannot parse {path}: {err}') from err
        return cls(parser, command, path)

    @classmethod
    def from_args(cls, args, command):
        """ Reads `args.config` and applies the --seed/--out/--epochs/--model overrides """
        config = cls.from_file(args.config, command)
        for key in ('seed', 'out'):
            if getattr(args, key, None) is not None:
                config.parser.set(GLOBAL, key, str(getattr(args, key)))
        for key in ('epochs', 'model'):
            if getattr(args, key, None) is not None:
                config.parser.set(command, key, str(getattr(args, key)))
        return config

    def _raw(self, key, default):
        for section in (self.command, GLOBAL):
            if self.parser.has_option(section, key):
                return self.parser.get(section, key)
        if default is _MISSING:
            raise ConfigError(f'Missing option {key} in [{self.command}]')
        return default

    def _typed(self, key, default, cast, kind):
        raw = self._raw(key, default)
        if raw is default:
            return default
        try:
            return cast(raw)
        except ValueError as err:
            raise ConfigError(f'Option {key} = {raw!r} is not a valid {kind}') from err

    def get_str(self, key, default=_MISSING):
        return self._raw(key, default)

    def get_int(self, key, default=_MISSING):
        return self._typed(key, default, int, 'integer')

    def get_float(self, key, default=_MISSING):
        return self._typed(key, default, float, 'number')

    def get_bool(self, key, default=_MISSING):
        return self._typed(key, default, _bool, 'boolean')

    def get_list(self, key, default=_MISSING, cast=str):
        """ Comma-separated values """
        raw = self._raw(key, default)
        if raw is default:
            return default
        try:
            return [cast(v.strip()) for v in raw.split(',') if v.strip()]
        except ValueError as err:
            raise ConfigError(f'Option {key} = {raw!r} is not a valid list') from err

    @property
    def seed(self):
        return self.get_int('seed', 0)

    @property
    def out(self):
        return self.get_str('out', 'results')

    def existing_path(self, key, default=_MISSING):
        path = self.get_str(key, default)
        if path is not None and not os.path.exists(path):
            raise ConfigError(f'{key} = {path} does not exist')
        return path

    def pendulum_params(self):
        nominal = DoublePendulumParams.nominal()
        return DoublePendulumParams(**{k: self.get_float(k, v) for k, v in nominal.as_dict().items()})

    def sampling_spec(self, count=None, seed=None):
        return SamplingSpec(
            count=self.get_int('count', 8) if count is None else count,
            seed=self.seed if seed is None else seed,
            dt=self.get_float('dt', 0.01),
            q_range=tuple(self.get_list('q_range', [-math.pi, math.pi], float)),
            qdot_range=tuple(self.get_list('qdot_range', [-10.0, 10.0], float)),
            u_std=self.get_float('u_std', 120.0))

    def model_spec(self, name, seed=None):
        hidden = self.get_list('hidden', None, int)
        return ModelSpec(name=name, n=self.get_int('n', 2), m=self.get_int('m', 2),
                         hidden=tuple(hidden) if hidden else None, delta=self.get_float('delta', 1.0),
                         seed=self.seed if seed is None else seed)

    def train_config(self, **overrides):
        defaults = TrainConfig()
        values = dict(lam=self.get_float('lam', defaults.lam), lr=self.get_float('lr', defaults.lr),
                      whitebox_lr=self.get_float('whitebox_lr', defaults.whitebox_lr),
                      batch_size=self.get_int('batch_size', defaults.batch_size),
                      epochs=self.get_int('epochs', defaults.epochs), seed=self.seed,
                      threshold=self.get_float('threshold', defaults.threshold))
        values.update(overrides)
        return TrainConfig(**values)

    def mbrl_config(self, seed=None):
        defaults = MbrlConfig()
        solver = DircolConfig()
        dircol = DircolConfig(defect_tol=self.get_float('defect_tol', solver.defect_tol),
                              max_iter=self.get_int('max_iter', solver.max_iter),
                              restarts=self.get_int('restarts', solver.restarts), ftol=self.get_float('ftol', solver.ftol))
        config = MbrlConfig(
            reach_time=self.get_float('reach_time', defaults.reach_time),
            hold_time=self.get_float('hold_time', defaults.hold_time),
            dt=self.get_float('dt', defaults.dt), clip=self.get_float('clip', defaults.clip),
            noise_std=self.get_float('noise_std', defaults.noise_std), u_std=self.get_float('u_std', defaults.u_std),
            init_epochs=self.get_int('init_epochs', defaults.init_epochs),
            episode_epochs=self.get_int('episode_epochs', defaults.episode_epochs),
            lr=self.get_float('lr', defaults.lr), whitebox_lr=self.get_float('whitebox_lr', defaults.whitebox_lr),
            lam=self.get_float('lam', defaults.lam), substeps=self.get_int('substeps', defaults.substeps),
            goal=tuple(self.get_list('goal', list(defaults.goal), float)),
            max_episodes=self.get_int('max_episodes', defaults.max_episodes),
            success_threshold=self.get_float('success_threshold', defaults.success_threshold),
            stop_on_success=self.get_bool('stop_on_success', defaults.stop_on_success),
            seed=self.seed if seed is None else seed)
        config.dircol = replace(dircol, clip=config.clip, reach_index=config.reach_index)
        return config


def _bool(raw):
    value = raw.strip().lower()
    if value in ('1', 'true', 'yes', 'on'):
        return True
    if value in ('0', 'false', 'no', 'off'):
        return False
    raise ValueError(raw)


def get_cli_args(command, argv=None, description=None):
    parser = argparse.ArgumentParser(prog=command, description=description)
    parser.add_argument('--config', default=None, help='INI file with a [global] and a [%s] section' % command)
    parser.add_argument('--seed', default=None, type=int, help='Global seed, all random streams derive from it')
    parser.add_argument('--out', default=None, help='Output directory')
    parser.add_argument('--epochs', default=None, type=int, help='Training epochs (overrides the config)')
    parser.add_argument('--model', default=None, help='Model name or comma-separated names (overrides the config)')
    parser.add_argument('-v', '--verbose', action='store_true', help='Debug logging')
    return parser.parse_args(argv)


def run_command(command, body, argv=None, description=None):
    """
    Parses the command line, prepares the output directory and runs `body(config, output_dir)`.
    Configuration, file format and dimension problems exit with 2, numeric failures with 3.
    """
    args = get_cli_args(command, argv, description)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO)
    try:
        config = RunConfig.from_args(args, command)
        set_seed(config.seed)
        output_dir = prepare_output_dir(config.out, args.config, argv=None if argv is None else [command] + list(argv))
        body(config, output_dir)
    except (ConfigError, FormatError, InputShapeError) as err:
        logger.error('Configuration error: %s', err)
        return EXIT_CONFIG
    except NumericError as err:
        logger.error('Numeric failure: %s', err)
        return EXIT_NUMERIC
    except OSError as err:
        logger.error('Cannot access %s: %s', err.filename, err.strerror)
        return EXIT_CONFIG
    return EXIT_OK
