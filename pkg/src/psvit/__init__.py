"""Progressive-sampling vision transformer on numpy, with hand-written adjoints."""

from .autograd import Tensor, no_grad, precision
from .checkpoint import load_checkpoint, load_model, save_checkpoint, save_model
from .data import Dataset, load_idx, synthetic_blobs
from .gradcheck import GradReport, finite_diff_audit
from .model import PRESETS, PsVit, PsVitConfig, build, cost_report, count_flops, count_params, preset, tie_weights
from .sampling import GridSpec, bilinear_sample, init_grid, progressive_sample
from .train import LrSchedule, adamw_step, evaluate, lr_at, train

__all__ = [
    "Tensor", "no_grad", "precision",
    "load_checkpoint", "load_model", "save_checkpoint", "save_model",
    "Dataset", "load_idx", "synthetic_blobs",
    "GradReport", "finite_diff_audit",
    "PRESETS", "PsVit", "PsVitConfig", "build", "cost_report", "count_flops", "count_params", "preset",
    "tie_weights",
    "GridSpec", "bilinear_sample", "init_grid", "progressive_sample",
    "LrSchedule", "adamw_step", "evaluate", "lr_at", "train",
]
