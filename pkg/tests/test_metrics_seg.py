import numpy as np
from scipy.spatial.distance import cdist

from samora.errors import DimensionError
from samora.metrics import dice, class_dice, boundary, hausdorff, avg_hausdorff, psnr
import samora.util.test as smtu

from pytest import approx, raises, mark
from hypothesis import given, settings


def _square(shape, top, left, size):
    m = np.zeros(shape, dtype=np.bool_)
    m[top:top + size, left:left + size] = True
    return m


def _brute_boundary(mask):
    padded = np.pad(mask, 1, constant_values=False)
    out = np.zeros_like(mask)
    for idx in np.argwhere(mask):
        win = padded[tuple(slice(i, i + 3) for i in idx)]
        out[tuple(idx)] = not win.all()
    return out


def _brute_hd(a, b):
    if not a.any() and not b.any():
        return 0.0
    if not a.any() or not b.any():
        return float(np.sqrt(np.sum(np.square(a.shape))))
    pa = np.argwhere(_brute_boundary(a))
    pb = np.argwhere(_brute_boundary(b))
    d = cdist(pa, pb)
    return max(d.min(axis=1).max(), d.min(axis=0).max())


def test_dice_example():
    assert dice([1, 1, 1, 0, 0, 0], [0, 1, 1, 1, 1, 1]) == approx(0.5)


def test_dice_identical():
    m = _square((8, 8), 2, 2, 3)
    assert dice(m, m) == 1.0


def test_dice_disjoint():
    assert dice(_square((8, 8), 0, 0, 2), _square((8, 8), 5, 5, 2)) == 0.0


def test_dice_empty():
    z = np.zeros((4, 4), dtype=np.bool_)
    assert dice(z, z) == 1.0
    assert dice(z, _square((4, 4), 1, 1, 1)) == 0.0


def test_dice_shape_mismatch():
    with raises(DimensionError):
        dice(np.zeros((3, 3)), np.zeros((3, 4)))


@given(smtu.mask_pairs())
def test_dice_oracle(pair):
    a, b = pair
    total = a.sum() + b.sum()
    expected = 1.0 if total == 0 else 2 * np.sum(a & b) / total
    assert dice(a, b) == approx(expected)
    assert dice(a, b) == approx(dice(b, a))
    assert 0 <= dice(a, b) <= 1


def test_class_dice():
    gt = np.array([[0, 1, 1], [2, 2, 0]])
    pred = np.array([[0, 1, 0], [2, 2, 1]])
    d = class_dice(pred, gt, 3)
    assert len(d) == 3
    assert d[0] == approx(0.5)
    assert d[1] == approx(1.0)
    # class 3 is absent from both
    assert d[2] == approx(1.0)


def test_boundary_square():
    m = _square((7, 7), 1, 1, 5)
    b = boundary(m)
    assert b.sum() == 16
    assert not b[3, 3]
    assert b[1, 1]


def test_boundary_empty():
    assert not boundary(np.zeros((5, 5))).any()


@given(smtu.masks())
def test_boundary_oracle(m):
    assert np.array_equal(boundary(m), _brute_boundary(m))


def test_hd_offset():
    a = _square((12, 12), 2, 2, 4)
    b = _square((12, 12), 5, 2, 4)
    assert hausdorff(a, b) == approx(3.0)
    assert hausdorff(b, a) == approx(3.0)


def test_hd_spacing():
    a = _square((12, 12), 2, 2, 4)
    b = _square((12, 12), 5, 2, 4)
    assert hausdorff(a, b, spacing=[2.0, 1.0]) == approx(6.0)
    assert hausdorff(a, b, spacing=[1.0, 2.0]) == approx(3.0)


def test_hd_bad_spacing():
    with raises(DimensionError):
        hausdorff(np.ones((3, 3)), np.ones((3, 3)), spacing=[1, 1, 1])


def test_hd_identical():
    m = _square((9, 9), 2, 3, 4)
    assert hausdorff(m, m) == 0.0


def test_hd_empty():
    z = np.zeros((3, 4), dtype=np.bool_)
    assert hausdorff(z, z) == 0.0
    m = _square((3, 4), 1, 1, 1)
    assert hausdorff(z, m) == approx(5.0)
    assert hausdorff(m, z) == approx(5.0)
    assert hausdorff(z, m, spacing=[2.0, 2.0]) == approx(10.0)


def test_hd_3d():
    a = np.zeros((4, 6, 6), dtype=np.bool_)
    b = np.zeros((4, 6, 6), dtype=np.bool_)
    a[1:3, 1:3, 1:3] = True
    b[1:3, 1:3, 3:5] = True
    assert hausdorff(a, b) == approx(2.0)


def test_hd_percentile_bounded():
    a = _square((16, 16), 2, 2, 6)
    b = _square((16, 16), 3, 4, 8)
    assert hausdorff(a, b, percentile=95) <= hausdorff(a, b) + 1e-12
    assert hausdorff(a, b, percentile=100) == approx(hausdorff(a, b))


@mark.slow
@settings(deadline=None)
@given(smtu.mask_pairs())
def test_hd_oracle(pair):
    a, b = pair
    assert hausdorff(a, b) == approx(_brute_hd(a, b))
    assert hausdorff(a, b) == approx(hausdorff(b, a))


def test_avg_hausdorff():
    a = _square((12, 12), 2, 2, 4)
    b = _square((12, 12), 5, 2, 4)
    assert avg_hausdorff([(a, b), (a, a)]) == approx(1.5)


def test_avg_hausdorff_empty():
    with raises(ValueError):
        avg_hausdorff([])


def test_psnr():
    assert psnr([0.1, 0.1], [0.0, 0.0]) == approx(20.0)
    assert psnr([0.0], [0.0]) == np.inf
    assert psnr([2.0, 2.0], [0.0, 0.0], data_range=20.0) == approx(20.0)


def test_psnr_shape():
    with raises(DimensionError):
        psnr(np.zeros(3), np.zeros(4))
