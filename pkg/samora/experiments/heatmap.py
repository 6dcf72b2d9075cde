"""
Attention heatmap and segmentation overlay export.

For one slice, the last encoder block's attention is rendered for each expert and
for the fused representation.  A map is the attention each patch token receives,
averaged over heads and queries; since every attention row sums to one, the map is
a probability distribution over patches.  Maps are scaled to [0, 1] before the
colormap is applied and are drawn over the input slice.
"""

import logging
from pathlib import Path

import numpy as np
import torch

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.colors import ListedColormap  # noqa: E402

from samora.errors import DimensionError  # noqa: E402
from samora.pretext.data import normalized, to_tensor  # noqa: E402

_log = logging.getLogger(__name__)

CLASS_COLORS = ['#e6194b', '#3cb44b', '#ffe119', '#4363d8', '#f58231', '#911eb4',
                '#46f0f0', '#f032e6', '#bcf60c', '#fabebe']


def attention_map(weights, grid):
    """
    Reduce attention weights to a probability map over patches.

    Args:
        weights(torch.Tensor): ``[B, heads, Lq, Lk]`` weights; the first batch item is used.
        grid(int): the patch grid edge (``Lk = grid²``).

    Returns:
        numpy.ndarray: a ``[grid, grid]`` map summing to 1.
    """
    w = weights[0].detach().to(torch.float64).mean(0).mean(0)
    if w.numel() != grid * grid:
        raise DimensionError('attention over {} tokens does not fit a {}×{} grid'.format(
            w.numel(), grid, grid))
    w = w / w.sum()
    return w.reshape(grid, grid).cpu().numpy()


def unit_scale(m):
    """
    Scale a map to [0, 1]; a constant map becomes zeros.

    >>> unit_scale(np.array([2.0, 4.0, 3.0])).tolist()
    [0.0, 1.0, 0.5]
    """
    m = np.asarray(m, dtype=np.float64)
    lo, hi = m.min(), m.max()
    if hi <= lo:
        return np.zeros_like(m)
    return (m - lo) / (hi - lo)


def heatmap_maps(model, image):
    """
    Compute the attention probability maps and predicted labels for one slice.

    Args:
        model(samora.models.assembly.SAMoraModel): a trained model.
        image(numpy.ndarray): a raw ``[H, W]`` slice at the model resolution.

    Returns:
        tuple: ``(maps, labels)`` where ``maps`` is keyed by level name and ``'fused'``.
        Models without an HL-Attn fused attention use the mean of the expert maps.
    """
    image = np.asarray(image, dtype=np.float32)
    size = model.encoder.config.image_size
    if image.shape != (size, size):
        raise DimensionError('sample has shape {}, expected {}'.format(
            image.shape, (size, size)))
    grid = model.encoder.config.grid
    model.eval()
    with torch.no_grad():
        logits, attn = model(to_tensor(normalized(image[np.newaxis])), return_attention=True)
    labels = logits.argmax(1)[0].cpu().numpy()
    maps = {lvl.value: attention_map(attn[lvl.value], grid) for lvl in model.levels}
    if 'fused' in attn:
        maps['fused'] = attention_map(attn['fused'], grid)
    else:
        maps['fused'] = np.mean([maps[lvl.value] for lvl in model.levels], axis=0)
    return maps, labels


def _overlay(image, heat, path, title):
    fig, ax = plt.subplots(figsize=(4, 4))
    h, w = image.shape
    ax.imshow(image, cmap='gray')
    ax.imshow(unit_scale(heat), cmap='jet', alpha=0.5, vmin=0, vmax=1,
              extent=(-0.5, w - 0.5, h - 0.5, -0.5), interpolation='bilinear')
    ax.set_title(title)
    ax.axis('off')
    fig.savefig(path, dpi=100, bbox_inches='tight')
    plt.close(fig)


def _segmentation(image, labels, num_classes, path):
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.imshow(image, cmap='gray')
    colors = [CLASS_COLORS[i % len(CLASS_COLORS)] for i in range(num_classes)]
    ax.imshow(np.ma.masked_equal(labels, 0), cmap=ListedColormap(colors), alpha=0.5,
              vmin=1, vmax=max(num_classes, 2), interpolation='nearest')
    ax.set_title('segmentation')
    ax.axis('off')
    fig.savefig(path, dpi=100, bbox_inches='tight')
    plt.close(fig)


def export_heatmap(model, sample, out_dir):
    """
    Export attention heatmaps and a segmentation overlay for one slice.

    Writes ``heatmap-<level>.png`` for each expert, ``heatmap-fused.png`` and
    ``segmentation.png``, along with the raw probability maps in ``maps.npz``.

    Args:
        model(samora.models.assembly.SAMoraModel): a trained model.
        sample(numpy.ndarray): a raw ``[H, W]`` slice.
        out_dir: the output directory.

    Returns:
        list: the paths of the raster files written.

    Raises:
        DimensionError: if the slice does not match the model resolution.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    image = np.asarray(sample, dtype=np.float32)
    maps, labels = heatmap_maps(model, image)
    paths = []
    for name, heat in maps.items():
        p = out / 'heatmap-{}.png'.format(name)
        _overlay(image, heat, p, name)
        paths.append(p)
    p = out / 'segmentation.png'
    _segmentation(image, labels, model.num_classes, p)
    paths.append(p)
    np.savez(out / 'maps.npz', **maps)
    _log.info('wrote %d rasters to %s', len(paths), out)
    return paths
