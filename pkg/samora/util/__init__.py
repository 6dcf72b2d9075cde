"""
Miscellaneous utility functions.
"""

import hashlib
import json
import logging
import subprocess
from pathlib import Path

import numpy as np

from .log import log_to_stderr  # noqa: F401
from .timing import Stopwatch  # noqa: F401
from .random import rng, init_rng, derive_seed, seeded  # noqa: F401
from .parallel import proc_count  # noqa: F401

_log = logging.getLogger(__name__)

__all__ = [
    'log_to_stderr',
    'Stopwatch',
    'rng', 'init_rng', 'derive_seed', 'seeded',
    'proc_count',
    'tensor_digest', 'stable_hash', 'version_string',
]


def tensor_digest(named_tensors):
    """
    Compute a SHA-256 digest over a collection of named tensors.  Used to check
    freezing laws: a frozen parameter set has the same digest before and after
    training.

    Args:
        named_tensors(iterable):
            ``(name, tensor)`` pairs, e.g. from :meth:`torch.nn.Module.named_parameters`,
            or a dictionary of them.

    Returns:
        str: the hex digest.
    """
    if hasattr(named_tensors, 'items'):
        named_tensors = named_tensors.items()
    h = hashlib.sha256()
    for name, t in sorted(named_tensors, key=lambda p: p[0]):
        arr = t.detach().cpu().contiguous().numpy()
        h.update(name.encode('utf8'))
        h.update(str(arr.dtype).encode('ascii'))
        h.update(np.asarray(arr.shape, dtype=np.int64).tobytes())
        h.update(arr.tobytes())
    return h.hexdigest()


def stable_hash(obj, length=16):
    """
    Hash a JSON-compatible object through its canonical encoding (sorted keys,
    no whitespace).

    >>> stable_hash({'b': 1, 'a': [1, 2]}) == stable_hash({'a': [1, 2], 'b': 1})
    True
    """
    data = json.dumps(obj, sort_keys=True, separators=(',', ':'), default=str)
    return hashlib.sha256(data.encode('utf8')).hexdigest()[:length]


def version_string():
    """
    Get a ``git describe``-style version string for provenance records.  Falls back
    to the package version when not running from a git checkout.
    """
    from samora import __version__
    root = Path(__file__).resolve().parents[2]
    try:
        out = subprocess.run(['git', 'describe', '--always', '--dirty', '--tags'],
                             cwd=root, capture_output=True, text=True, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return __version__
    if out.returncode != 0 or not out.stdout.strip():
        return __version__
    return '{}+g{}'.format(__version__, out.stdout.strip())
