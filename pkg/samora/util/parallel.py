"""
Utilities for parallel processing.

Ablation cells are independent: each one receives a plain (picklable) configuration
and writes its own artifacts, so they can run in separate processes.  Workers are
started with the ``spawn`` method, route their log records to the parent, and are
seeded from a seed derived from their process name.
"""

import os
import multiprocessing as mp
import functools as ft
import logging
import logging.handlers
import faulthandler
from concurrent.futures import ProcessPoolExecutor
from abc import ABC, abstractmethod

from samora.util.log import log_queue
from samora.util.random import derive_seed, init_rng, get_root_seed

_log = logging.getLogger(__name__)
__is_worker = False


def spawn_context():
    "Get the multiprocessing context used for SAMora worker processes."
    return mp.get_context('spawn')


def is_worker():
    "Query whether the process is a worker."
    return __is_worker


def is_mp_worker():
    "Query whether the current process is a multiprocessing worker."
    return os.environ.get('_SAMORA_IN_MP', 'no') == 'yes'


def _initialize_worker(log_queue, seed, threads):
    "Initialize a worker process."
    global __is_worker
    __is_worker = True
    faulthandler.enable()
    seed = derive_seed(mp.current_process().name, base=seed)
    init_rng(seed)
    if log_queue is not None:
        h = logging.handlers.QueueHandler(log_queue)
        root = logging.getLogger()
        root.addHandler(h)
        root.setLevel(logging.DEBUG)
        h.setLevel(logging.DEBUG)

    if threads is not None:
        import torch
        _log.debug('configuring torch thread count to %d', threads)
        torch.set_num_threads(threads)

    _log.debug('worker %d ready (process %s)', os.getpid(), mp.current_process())


def proc_count(core_div=2, max_default=None, level=0):
    """
    Get the number of desired jobs for multiprocessing operations.  This does not
    affect PyTorch intra-op threading.

    This count can come from a number of sources:

    * The ``SAMORA_NUM_PROCS`` environment variable
    * The number of CPUs, divided by ``core_div`` (default 2)

    Args:
        core_div(int or None):
            The divisor to scale down the number of cores; ``None`` to turn off core-based
            fallback.
        max_default:
            The maximum number of processes to use if the environment variable is not
            configured.
        level:
            The process nesting level.  0 is the outermost level of parallelism; level 1
            is the thread count for each worker.

    Returns:
        int: The number of jobs desired.
    """

    nprocs = os.environ.get('SAMORA_NUM_PROCS', None)
    if nprocs is not None:
        nprocs = [int(s) for s in nprocs.split(',')]
    elif core_div is not None:
        nprocs = max(mp.cpu_count() // core_div, 1)
        if max_default is not None:
            nprocs = min(nprocs, max_default)
        nprocs = [nprocs, core_div]
    else:
        nprocs = [1]

    if level >= len(nprocs):
        return 1
    else:
        return nprocs[level]


def invoker(func, n_jobs=None):
    """
    Get an appropriate invoker for applying ``func`` to a sequence of arguments.

    Args:
        func(function): The function to call.  It must be picklable (module-level).
        n_jobs(int or None):
            The number of processes to use.  If ``None``, will call :func:`proc_count`
            with a maximum default process count of 4.

    Returns:
        OpInvoker: An invoker to perform the operations.
    """
    if n_jobs is None:
        n_jobs = proc_count(max_default=4)

    if n_jobs == 1:
        return InProcessOpInvoker(func)
    else:
        return ProcessPoolOpInvoker(func, n_jobs)


class OpInvoker(ABC):
    """
    Interface for invoking an operation, possibly in parallel.  Child process invokers
    also route logging messages to the parent process, so logging works even with
    multiprocessing.

    An invoker is a context manager that calls :meth:`shutdown` when exited.
    """

    @abstractmethod
    def map(self, *iterables):
        """
        Apply the configured function to the iterables, like :py:func:`map`.  Results
        are returned in argument order regardless of completion order.
        """
        pass

    def shutdown(self):
        pass

    def __enter__(self):
        return self

    def __exit__(self, *args):
        self.shutdown()


class InProcessOpInvoker(OpInvoker):
    def __init__(self, func):
        _log.info('setting up in-process worker')
        self.function = func

    def map(self, *iterables):
        return map(self.function, *iterables)


class ProcessPoolOpInvoker(OpInvoker):
    def __init__(self, func, n_jobs):
        self.function = func
        _log.info('setting up ProcessPoolExecutor w/ %d workers', n_jobs)
        os.environ['_SAMORA_IN_MP'] = 'yes'
        kid_tc = proc_count(level=1)
        self.executor = ProcessPoolExecutor(n_jobs, spawn_context(), _initialize_worker,
                                            (log_queue(), get_root_seed(), kid_tc))

    def map(self, *iterables):
        return self.executor.map(ft.partial(_invoke, self.function), *iterables)

    def shutdown(self):
        self.executor.shutdown()
        os.environ.pop('_SAMORA_IN_MP', None)


def _invoke(func, *args):
    return func(*args)
