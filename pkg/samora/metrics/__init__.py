"""
Metrics for evaluating segmentations and comparing runs.
"""

from .seg import dice, class_dice, boundary, hausdorff, avg_hausdorff, psnr  # noqa: F401
from .stats import paired_t_test, TTestResult  # noqa: F401
