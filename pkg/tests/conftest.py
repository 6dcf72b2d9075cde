import logging
from pytest import fixture

import torch

from samora import util

logging.getLogger('numba').setLevel(logging.INFO)
logging.getLogger('matplotlib').setLevel(logging.INFO)

_log = logging.getLogger('samora.tests')


@fixture
def rng():
    return util.rng(42)


@fixture(autouse=True)
def init_rng(request):
    util.init_rng(42)


@fixture(autouse=True)
def torch_threads():
    torch.set_num_threads(1)


@fixture(autouse=True)
def log_test(request):
    _log.info('running test %s:%s', request.module.__name__, request.function.__name__)


@fixture
def cache_root(tmp_path, monkeypatch):
    root = tmp_path / 'cache'
    monkeypatch.setenv('SAMORA_CACHE_DIR', str(root))
    return root


def pytest_collection_modifyitems(items):
    # add 'slow' to all 'eval' tests
    for item in items:
        evm = item.get_closest_marker('eval')
        slm = item.get_closest_marker('slow')
        if evm is not None and slm is None:
            _log.debug('adding slow mark to %s', item)
            item.add_marker('slow')
