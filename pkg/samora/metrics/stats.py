"""
Statistical comparison of paired scores.
"""

from collections import namedtuple

import numpy as np
from scipy import stats

TTestResult = namedtuple('TTestResult', ['t', 'p', 'ci_low', 'ci_high', 'mean_diff', 'n'])
TTestResult.__doc__ = 'Result of a two-sided paired t-test of ``b - a`` (named tuple).'
TTestResult.t.__doc__ = 'The t statistic (infinite in the degenerate branch).'
TTestResult.p.__doc__ = 'The two-sided p-value.'
TTestResult.ci_low.__doc__ = 'Lower end of the confidence interval of the mean difference.'
TTestResult.ci_high.__doc__ = 'Upper end of the confidence interval of the mean difference.'


def paired_t_test(scores_a, scores_b, confidence=0.95):
    """
    Two-sided paired t-test on the differences ``b - a``.

    When the differences have zero variance the test is degenerate: the p-value is
    0 if the mean difference is non-zero and 1 otherwise, and the interval
    collapses to the mean difference.

    Args:
        scores_a: the first list of scores.
        scores_b: the paired second list.
        confidence(double): the confidence-interval level.

    Returns:
        TTestResult: the test result.

    >>> r = paired_t_test([1, 2, 3], [2, 3, 4])
    >>> r.mean_diff, r.p
    (1.0, 0.0)
    """
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError('paired scores must be equal-length lists')
    n = len(a)
    if n < 2:
        raise ValueError('paired t-test needs at least 2 pairs')

    diff = b - a
    mean = float(diff.mean())
    sd = float(diff.std(ddof=1))
    if sd == 0:
        if mean == 0:
            return TTestResult(0.0, 1.0, 0.0, 0.0, 0.0, n)
        return TTestResult(float(np.copysign(np.inf, mean)), 0.0, mean, mean, mean, n)

    se = sd / np.sqrt(n)
    t = mean / se
    df = n - 1
    p = float(2 * stats.t.sf(abs(t), df))
    half = float(stats.t.ppf(0.5 + confidence / 2, df) * se)
    return TTestResult(float(t), p, mean - half, mean + half, mean, n)
