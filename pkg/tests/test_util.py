import logging
import time

import torch

from samora import util, __version__
from samora.util.timing import format_duration
from samora.util.log import run_log


def test_stopwatch_sleep():
    w = util.Stopwatch()
    time.sleep(0.2)
    assert w.elapsed() >= 0.15


def test_stopwatch_stop():
    w = util.Stopwatch()
    time.sleep(0.2)
    w.stop()
    e = w.elapsed()
    time.sleep(0.2)
    assert w.elapsed() == e


def test_stopwatch_context():
    with util.Stopwatch() as w:
        time.sleep(0.1)
    e = w.elapsed()
    time.sleep(0.1)
    assert w.elapsed() == e


def test_stopwatch_laps():
    w = util.Stopwatch()
    time.sleep(0.1)
    first = w.lap()
    time.sleep(0.2)
    second = w.lap()
    assert first >= 0.08
    assert second >= 0.15
    assert w.elapsed() >= first + second


def test_stopwatch_str():
    w = util.Stopwatch()
    w.stop()
    w.start_time = w.stop_time - 3663
    assert str(w) == '1h1m3.00s'


def test_format_duration():
    assert format_duration(0.5) == '500ms'
    assert format_duration(2.5) == '2.50s'
    assert format_duration(62) == '1m2.00s'
    assert format_duration(7200) == '2h0m0.00s'


def test_tensor_digest_stable():
    a = {'x': torch.arange(6.0).reshape(2, 3), 'y': torch.ones(2)}
    b = {'y': torch.ones(2), 'x': torch.arange(6.0).reshape(2, 3)}
    assert util.tensor_digest(a) == util.tensor_digest(b)
    assert util.tensor_digest(a) == util.tensor_digest(list(a.items()))


def test_tensor_digest_detects_change():
    a = {'x': torch.zeros(3)}
    b = {'x': torch.tensor([0.0, 0.0, 1e-7])}
    assert util.tensor_digest(a) != util.tensor_digest(b)


def test_tensor_digest_shape_matters():
    a = {'x': torch.zeros(2, 3)}
    b = {'x': torch.zeros(3, 2)}
    assert util.tensor_digest(a) != util.tensor_digest(b)


def test_stable_hash_order():
    assert util.stable_hash({'a': 1, 'b': [1, 2]}) == util.stable_hash({'b': [1, 2], 'a': 1})
    assert util.stable_hash({'a': 1}) != util.stable_hash({'a': 2})
    assert len(util.stable_hash({'a': 1})) == 16


def test_version_string():
    v = util.version_string()
    assert v.startswith(__version__)


def test_run_log(tmp_path):
    log = logging.getLogger('samora.tests.runlog')
    with run_log(tmp_path / 'logs' / 'run.log') as path:
        log.debug('inside %d', 1)
    log.info('outside')
    text = path.read_text()
    assert 'inside 1' in text
    assert 'outside' not in text
    assert logging.getLogger('samora').handlers == []
