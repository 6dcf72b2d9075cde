"""
Utilities to manage randomness in SAMora and SAMora experiments.

All SAMora components draw randomness from :class:`numpy.random.SeedSequence`
objects.  Per-sample streams (augmentation, masking, noise) are derived from a
base seed plus integer or string keys, so results never depend on the order in
which samples are processed or on the number of workers processing them.
"""

import zlib
import random
import logging
from contextlib import contextmanager

import numpy as np
import torch

_log = logging.getLogger(__name__)


class _RNGState:
    _seed = None

    @property
    def seed(self):
        if self._seed is None:
            self._seed = np.random.SeedSequence()
        return self._seed

    @property
    def int_seed(self):
        return int(self.seed.generate_state(1)[0])

    def initialize(self, seed, keys):
        if isinstance(seed, (int, np.integer)):
            seed = np.random.SeedSequence(int(seed))

        if not isinstance(seed, np.random.SeedSequence):
            raise TypeError('unexpected seed type {}'.format(type(seed)))

        if keys:
            seed = self.derive(seed, keys)

        self._seed = seed
        return seed

    def derive(self, base, keys):
        if base is None:
            base = self.seed
        elif isinstance(base, (int, np.integer)):
            base = np.random.SeedSequence(int(base))

        if keys:
            k2 = tuple(_make_int(k) for k in keys)
            return np.random.SeedSequence(base.entropy, spawn_key=base.spawn_key + k2)
        else:
            return base.spawn(1)[0]


_rng_impl = _RNGState()


def get_root_seed():
    """
    Get the root seed.

    Returns:
        numpy.random.SeedSequence: The SAMora root seed.
    """
    return _rng_impl.seed


def _make_int(obj):
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    elif isinstance(obj, bytes):
        return zlib.crc32(obj)
    elif isinstance(obj, str):
        return zlib.crc32(obj.encode('utf8'))
    elif hasattr(obj, 'value'):
        # enums such as Level
        return _make_int(obj.value)
    else:
        raise ValueError('invalid RNG key ' + str(obj))


def init_rng(seed, *keys, propagate=True):
    """
    Initialize the random infrastructure with a seed.  This function should generally be
    called very early in the setup.

    Args:
        seed(int or numpy.random.SeedSequence):
            The random seed to initialize with.
        keys:
            Additional keys, to use as a ``spawn_key``.  Passed to :func:`derive_seed`.
        propagate(bool):
            If ``True``, initialize other RNG infrastructure. This currently initializes:

            * :func:`np.random.seed`
            * :func:`random.seed`
            * :func:`torch.manual_seed`

            SAMora components never rely on these global generators, but third-party
            code (e.g. PyTorch default initializers outside :func:`seeded`) may.

    Returns:
        The random seed.
    """
    _rng_impl.initialize(seed, keys)
    _log.info('initialized SAMora RNG with seed %s', _rng_impl.seed)

    if propagate:
        ik = _rng_impl.int_seed
        _log.debug('initializing numpy.random, random and torch with seed %u', ik)
        np.random.seed(ik)
        random.seed(ik)
        torch.manual_seed(ik)

    return _rng_impl.seed


def derive_seed(*keys, base=None):
    """
    Derive a seed from the root seed, optionally with additional seed keys.

    Args:
        keys(list of int or str):
            Additional components to add to the spawn key for reproducible derivation.
            If unspecified, the seed's internal counter is incremented (by calling
            :meth:`numpy.random.SeedSequence.spawn`).
        base(numpy.random.SeedSequence or int):
            The base seed to use.  If ``None``, uses the root seed.

    >>> s1 = derive_seed('aug', 3, base=42)
    >>> s2 = derive_seed('aug', 3, base=42)
    >>> s1.generate_state(1)[0] == s2.generate_state(1)[0]
    True
    """
    return _rng_impl.derive(base, keys)


def _seed_sequence(spec=None):
    """
    Get a seed sequence.  ``spec`` is interpreted as in :func:`rng`, and
    is used as follows:

    * If a :class:`numpy.random.SeedSequence`, returned as-is.
    * If an integer, used to create a seed sequence.
    * If ``None``, returns global seed (after initializing).
    * If a :class:`numpy.random.Generator`, it is used to generate an integer that
      is used to create a seed sequence.

    Returns:
        numpy.random.SeedSequence:
            The seed.
    """
    if spec is None:
        return _rng_impl.seed
    elif isinstance(spec, (int, np.integer)):
        return np.random.SeedSequence(int(spec))
    elif isinstance(spec, np.random.SeedSequence):
        return spec
    elif hasattr(spec, 'integers'):
        seed = spec.integers(2**32 - 1)
        return np.random.SeedSequence(int(seed))
    else:
        raise ValueError('unknown RNG spec ' + str(spec))


def rng(spec=None):
    """
    Get a random number generator.  This is similar to
    :func:`sklearn.utils.check_random_seed`, but returns a :class:`numpy.random.Generator`.

    Args:
        spec:
            The spec for this RNG.  Can be any of the following types:

            * ``int``
            * ``None``
            * :class:`numpy.random.SeedSequence`
            * :class:`numpy.random.Generator`

    Returns:
        numpy.random.Generator: A random number generator.
    """
    if isinstance(spec, np.random.Generator):
        return spec
    elif spec is None:
        seed, = _rng_impl.seed.spawn(1)
    else:
        seed = _seed_sequence(spec)
    return np.random.default_rng(seed)


def torch_seed(spec=None):
    """
    Get an integer seed suitable for :func:`torch.manual_seed`.

    Args:
        spec: a seed spec, as in :func:`rng`.

    Returns:
        int: a 63-bit seed.
    """
    seed = _seed_sequence(spec)
    state = seed.generate_state(2, np.uint32)
    return (int(state[0]) << 31) ^ int(state[1])


@contextmanager
def seeded(spec=None):
    """
    Context manager that runs its body with the PyTorch RNG seeded from ``spec``,
    restoring the previous RNG state afterwards.  Model constructors run inside
    this context so parameter initialization is reproducible without touching
    global state.

    Args:
        spec: a seed spec, as in :func:`rng`.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(torch_seed(spec))
        yield
