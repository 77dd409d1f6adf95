import logging
import os
import random
import shutil
import sys
import tempfile
import zlib

import numpy as np
import pandas as pd
import torch
from tqdm import tqdm

logger = logging.getLogger(__name__)


def derive_seed(seed, name):
    """
    Seed of the named sub-stream `name` of the global `seed`, e.g. derive_seed(seed, 'data').
    Streams with different names are statistically independent.
    """
    return int(np.random.SeedSequence([int(seed), zlib.crc32(name.encode('utf-8'))]).generate_state(1)[0])


def set_seed(seed):
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)


def progress(iterable, **kwargs):
    """ Wraps `iterable` in a tqdm bar unless debug logging is on """
    if logging.getLogger().getEffectiveLevel() > logging.DEBUG:
        return tqdm(iterable, ncols=100, **kwargs)
    return iterable


def write_csv(rows, path, columns=None):
    """ Writes a list of dicts (or a DataFrame) with a header row and a stable column order """
    df = rows if isinstance(rows, pd.DataFrame) else pd.DataFrame(list(rows), columns=columns)
    if columns is not None:
        df = df[list(columns)]
    df.to_csv(path, index=False)
    logger.info('Wrote %d rows to %s', len(df), path)
    return df


def format_cmdline(argv):
    return " ".join(["'" + a + "'" if (len(a) == 0 or a[0] != '-') else a for a in argv])


def prepare_output_dir(output_dir, config_path=None, argv=None):
    """
    Creates `output_dir` with a copy of the config file and the command line. A new directory
    is populated under a temporary name and then renamed, so it never appears half-written.
    An existing directory is reused (e.g. when resuming).
    """
    argv = sys.argv if argv is None else argv
    output_dir = os.path.abspath(output_dir)

    def populate(path):
        if config_path:
            shutil.copyfile(config_path, os.path.join(path, 'config.ini'))
        with open(os.path.join(path, 'cmdline.txt'), 'w') as f:
            f.write(format_cmdline(argv))

    if os.path.isdir(output_dir):
        populate(output_dir)
    else:
        parent = os.path.dirname(output_dir)
        os.makedirs(parent, exist_ok=True)
        tmp = tempfile.mkdtemp(prefix='.' + os.path.basename(output_dir) + '.', dir=parent)
        try:
            populate(tmp)
            os.rename(tmp, output_dir)
        except OSError:
            shutil.rmtree(tmp, ignore_errors=True)
            raise
    logger.info('Will save to %s', output_dir)
    return output_dir
