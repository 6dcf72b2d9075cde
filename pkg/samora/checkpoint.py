"""
Checkpoint directories: a YAML manifest plus one little-endian ``float32`` blob per
tensor.

The manifest records, for every tensor, its name, shape, dtype, blob file and
SHA-256, together with the training stage that produced the checkpoint, the
configuration hash, the seed and a version string.  Checkpoints are written to a
temporary directory and committed with an atomic rename.
"""

import hashlib
import logging
import os
import shutil
import tempfile
from collections import namedtuple
from pathlib import Path

import numpy as np
import torch
import yaml

from samora import Level
from samora.errors import CheckpointError
from samora.util import version_string

_log = logging.getLogger(__name__)

MANIFEST = 'manifest.yaml'
FORMAT_VERSION = 1
BLOB_DTYPE = np.dtype('<f4')

Checkpoint = namedtuple('Checkpoint', ['manifest', 'tensors'])
Checkpoint.__doc__ = 'A loaded checkpoint (named tuple).'
Checkpoint.manifest.__doc__ = 'The manifest dictionary.'
Checkpoint.tensors.__doc__ = 'The tensors, keyed by name (insertion order follows the manifest).'


def _blob_name(name):
    return name.replace('/', '_') + '.bin'


def save_checkpoint(path, tensors, *, stage, config_hash=None, seed=None, extra=None):
    """
    Save named tensors as a checkpoint directory, replacing any existing one.

    Args:
        path: the checkpoint directory.
        tensors(dict): tensors keyed by name.
        stage(str): the producing stage (e.g. ``stage1-image``, ``stage2``).
        config_hash(str): hash of the producing configuration.
        seed: the producing seed.
        extra(dict): additional (YAML-safe) manifest entries.

    Returns:
        pathlib.Path: the checkpoint path.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix='.' + path.name + '-', dir=path.parent))
    try:
        entries = []
        for name, t in tensors.items():
            arr = t.detach().cpu().numpy() if torch.is_tensor(t) else np.asarray(t)
            data = np.ascontiguousarray(arr, dtype=BLOB_DTYPE).tobytes()
            fn = _blob_name(name)
            (tmp / fn).write_bytes(data)
            entries.append({'name': name, 'shape': list(arr.shape), 'dtype': 'float32',
                            'file': fn, 'sha256': hashlib.sha256(data).hexdigest()})
        manifest = {
            'format': FORMAT_VERSION,
            'stage': stage,
            'config_hash': config_hash,
            'seed': seed,
            'version': version_string(),
            'tensors': entries,
        }
        if extra:
            manifest.update(extra)
        with open(tmp / MANIFEST, 'w') as f:
            yaml.safe_dump(manifest, f, sort_keys=False)
        if path.exists():
            old = path.with_name('.' + path.name + '.old')
            shutil.rmtree(old, ignore_errors=True)
            os.replace(path, old)
            os.replace(tmp, path)
            shutil.rmtree(old, ignore_errors=True)
        else:
            os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    _log.debug('saved %d tensors to %s (%s)', len(tensors), path, stage)
    return path


def read_manifest(path):
    "Read a checkpoint manifest."
    mf = Path(path) / MANIFEST
    if not mf.exists():
        raise CheckpointError('{} has no manifest'.format(path))
    try:
        with open(mf) as f:
            manifest = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise CheckpointError('unreadable manifest in {}: {}'.format(path, e))
    if not isinstance(manifest, dict) or 'tensors' not in manifest:
        raise CheckpointError('malformed manifest in {}'.format(path))
    return manifest


def load_checkpoint(path, *, stage=None, config_hash=None):
    """
    Load and verify a checkpoint.

    Args:
        path: the checkpoint directory.
        stage(str): if given, the required producing stage.
        config_hash(str): if given, the required configuration hash.

    Returns:
        Checkpoint: the manifest and tensors.

    Raises:
        CheckpointError:
            if the manifest is missing or mismatched, or a blob is missing,
            truncated or corrupt; the message names the tensor.
    """
    path = Path(path)
    manifest = read_manifest(path)
    if stage is not None and manifest.get('stage') != stage:
        raise CheckpointError('{} is a {} checkpoint, expected {}'.format(
            path, manifest.get('stage'), stage))
    if config_hash is not None and manifest.get('config_hash') != config_hash:
        raise CheckpointError('{} has config hash {}, expected {}'.format(
            path, manifest.get('config_hash'), config_hash))

    tensors = {}
    for e in manifest['tensors']:
        name = e['name']
        fn = path / e['file']
        if not fn.exists():
            raise CheckpointError('missing blob for tensor {}'.format(name))
        data = fn.read_bytes()
        shape = tuple(e['shape'])
        expected = int(np.prod(shape, dtype=np.int64)) * BLOB_DTYPE.itemsize
        if len(data) != expected:
            raise CheckpointError('blob for tensor {} has {} bytes, expected {}'.format(
                name, len(data), expected))
        if hashlib.sha256(data).hexdigest() != e['sha256']:
            raise CheckpointError('hash mismatch for tensor {}'.format(name))
        arr = np.frombuffer(data, dtype=BLOB_DTYPE).reshape(shape)
        tensors[name] = torch.from_numpy(arr.astype(np.float32))
    return Checkpoint(manifest, tensors)


def save_module(module, path, *, stage, config_hash=None, seed=None, extra=None):
    "Save a module's state dictionary as a checkpoint."
    return save_checkpoint(path, module.state_dict(), stage=stage, config_hash=config_hash,
                           seed=seed, extra=extra)


def load_state(module, tensors, prefix=''):
    """
    Copy checkpoint tensors into a module's state, requiring an exact match of
    names and shapes.

    Raises:
        CheckpointError: naming the first missing, unexpected or misshapen tensor.
    """
    state = module.state_dict()
    names = {n for n in tensors if n.startswith(prefix)}
    for name, cur in state.items():
        key = prefix + name
        if key not in tensors:
            raise CheckpointError('checkpoint has no tensor {}'.format(key))
        if tuple(tensors[key].shape) != tuple(cur.shape):
            raise CheckpointError('tensor {} has shape {}, expected {}'.format(
                key, tuple(tensors[key].shape), tuple(cur.shape)))
        names.discard(key)
    if names:
        raise CheckpointError('unexpected tensor {}'.format(sorted(names)[0]))
    with torch.no_grad():
        for name, cur in state.items():
            cur.copy_(tensors[prefix + name].to(cur.dtype))


def load_module(module, path, **kwargs):
    "Load a checkpoint into a module; see :func:`load_checkpoint` for options."
    ckpt = load_checkpoint(path, **kwargs)
    load_state(module, ckpt.tensors)
    return ckpt.manifest


def save_expert(expert, path, *, config_hash=None, seed=None, extra=None):
    """
    Save a stage-1 expert; the manifest records its level and rank.
    """
    level = Level.parse(expert.level)
    meta = {'level': level.value, 'rank': expert.rank}
    if extra:
        meta.update(extra)
    return save_module(expert, path, stage='stage1-' + level.value, config_hash=config_hash,
                       seed=seed, extra=meta)


def load_expert_state(path):
    """
    Read a stage-1 expert checkpoint.

    Returns:
        tuple: ``(level, tensors)`` where ``level`` is the manifest's level.
    """
    ckpt = load_checkpoint(path)
    stage = ckpt.manifest.get('stage', '')
    if not stage.startswith('stage1-') or 'level' not in ckpt.manifest:
        raise CheckpointError('{} is not a stage-1 expert checkpoint'.format(path))
    return Level.parse(ckpt.manifest['level']), ckpt.tensors


def load_experts_into(model, paths):
    """
    Load stage-1 expert checkpoints into a stage-2 model, placing each by the
    level recorded in its manifest.

    Returns:
        list: the loaded levels.
    """
    loaded = []
    for p in paths:
        level, tensors = load_expert_state(p)
        if level in loaded:
            raise CheckpointError('two checkpoints for the {} expert'.format(level.value))
        load_state(model.expert(level), tensors)
        loaded.append(level)
    model.adapters_loaded_ = set(model.levels) <= set(loaded)
    return loaded
