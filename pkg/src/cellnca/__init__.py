"""Neural cellular automata for small-image classification, with relevance explanations."""

from .checkpoint import load_checkpoint, save_checkpoint
from .data import DatasetManifest, HarmonizationMap, ImageSet, load_image_64, scan_folder, synth_blobs
from .evaluation import EvalReport, crossdomain, evaluate, sweep_channels
from .explain import lrp_epsilon, route_to_cells, export_heatmaps
from .model import (
    STANDARD_CONFIG,
    NcaConfig,
    NcaParams,
    classify,
    count_params,
    init_params,
    make_seed,
    nca_step,
    rollout,
)
from .train import TrainPlan, fit

__version__ = "0.1.0"
