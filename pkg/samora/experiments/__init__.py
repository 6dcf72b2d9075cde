"""
Experiment drivers: the cached pipeline, ablations and heatmap export.
"""

from .pipeline import Pipeline, PipelineResult, run_pipeline, load_data, save_data  # noqa: F401
from .ablation import Axis, AblationMatrix, AblationResult, run_ablation  # noqa: F401
from .heatmap import export_heatmap  # noqa: F401
