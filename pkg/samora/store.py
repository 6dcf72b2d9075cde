"""
The artifact store: a directory cache of pipeline stage outputs keyed by hash.

Each stage output lives in ``<root>/<stage>/<key>/`` with a ``stage.yaml`` record
naming the key and its inputs.  Entries are built in a temporary directory and
committed with an atomic rename, so concurrent runs never see partial entries.
"""

import logging
import os
import shutil
import tempfile
import warnings
from pathlib import Path

import binpickle
import yaml

from samora.errors import DataWarning
from samora.util import stable_hash, version_string

_log = logging.getLogger(__name__)

RECORD = 'stage.yaml'


def stage_key(stage, config, upstream=()):
    """
    The cache key of a stage: a hash of the stage name, its configuration section
    (or its hash) and the keys of the stages it depends on.
    """
    return stable_hash({'stage': stage, 'config': config, 'upstream': list(upstream)})


class ArtifactStore:
    """
    A hash-keyed directory cache.

    Args:
        root: the cache root (default :func:`samora.config.cache_dir`).
    """

    def __init__(self, root=None):
        if root is None:
            from samora.config import cache_dir
            root = cache_dir()
        self.root = Path(root)

    def path(self, stage, key):
        return self.root / stage / key

    def lookup(self, stage, key, required=()):
        """
        Look up a committed entry.

        Returns:
            pathlib.Path or None: the entry directory, or ``None`` on a miss.  An
            entry whose record does not match its key, or that lacks one of the
            ``required`` files, is stale: it is removed with a
            :class:`~samora.errors.DataWarning` and reported as a miss.
        """
        p = self.path(stage, key)
        if not p.exists():
            return None
        rec = p / RECORD
        try:
            with open(rec) as f:
                record = yaml.safe_load(f)
        except (OSError, yaml.YAMLError):
            record = None
        missing = [r for r in required if not (p / r).exists()]
        if not isinstance(record, dict) or record.get('key') != key or missing:
            warnings.warn('stale cache entry {}/{}; re-running stage'.format(stage, key),
                          DataWarning)
            shutil.rmtree(p, ignore_errors=True)
            return None
        _log.debug('cache hit for %s/%s', stage, key)
        return p

    def invalidate(self, stage, key):
        "Remove an entry, if present."
        shutil.rmtree(self.path(stage, key), ignore_errors=True)

    def commit(self, stage, key, build, inputs=None):
        """
        Build and commit an entry.  A valid entry already committed under the same
        key is kept as-is, and ``build`` is not run for it; a stale one is replaced.

        Args:
            stage(str): the stage name.
            key(str): the entry key.
            build(callable): ``build(tmpdir)`` writing the entry's files.
            inputs(dict): description of the inputs, stored in the record.

        Returns:
            pathlib.Path: the committed entry directory.
        """
        dest = self.path(stage, key)
        if self.lookup(stage, key) is not None:
            _log.info('%s/%s is already committed, keeping it', stage, key)
            return dest
        dest.parent.mkdir(parents=True, exist_ok=True)
        tmp = Path(tempfile.mkdtemp(prefix='.' + key + '-', dir=dest.parent))
        try:
            build(tmp)
            record = {'stage': stage, 'key': key, 'version': version_string(),
                      'inputs': inputs or {}}
            with open(tmp / RECORD, 'w') as f:
                yaml.safe_dump(record, f, sort_keys=True)
            # lookup clears a stale entry, so dest only survives it when valid
            if self.lookup(stage, key) is None:
                try:
                    os.replace(tmp, dest)
                except OSError:
                    if self.lookup(stage, key) is None:
                        raise
            if tmp.exists():
                _log.info('%s/%s was committed concurrently, keeping it', stage, key)
                shutil.rmtree(tmp, ignore_errors=True)
                return dest
        except BaseException:
            shutil.rmtree(tmp, ignore_errors=True)
            raise
        _log.info('committed %s/%s', stage, key)
        return dest

    def entries(self, stage):
        "The committed keys of a stage."
        d = self.root / stage
        if not d.is_dir():
            return []
        return sorted(p.name for p in d.iterdir() if (p / RECORD).exists())

    def __str__(self):
        return 'ArtifactStore({})'.format(self.root)


def save_object(obj, path):
    "Persist an object (e.g. a generated data set) with binpickle."
    binpickle.dump(obj, os.fspath(path))


def load_object(path):
    "Load an object saved with :func:`save_object`."
    return binpickle.load(os.fspath(path))
