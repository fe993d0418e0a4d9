"""Vision transformer with randomized continuous patch sampling.

The package trains and evaluates a small ViT whose tokens come either from
the usual non-overlapping grid or from patches drawn at continuous random
coordinates, with per-token sinusoidal position codes evaluated at the real
sampling locations.
"""

__version__ = "0.1.0"

from .errors import (BadCheckpoint, BadConfig, BadDim, BadImage,
                     DivisionByZeroGuard, EmptySample, EmptySplit,
                     NonDivisibleImage, NonFiniteGradient, NonStochasticInput,
                     OutOfBounds, RandVitError, SchemaMismatch, ShapeMismatch,
                     TruncatedFile)
from .sampling import (PatchGeometry, PatchCoords, RunStreams, TokenBatch,
                       extract_patches, grid_coords, random_coords,
                       round_half_away, stream, token_count)
from .posenc import PosEncConfig, encode, frequencies
from .model import (VitConfig, ForwardTrace, forward, init_params,
                    load_checkpoint, save_checkpoint)
from .train import TrainConfig, cross_entropy, evaluate, lr_at, mixup, train_run
from .analysis import (FlopsReport, attention_rollout, count_flops,
                       render_heatmap, work_efficiency)
from .data import (Dataset, load_binary_corpus, normalize, denormalize,
                   read_pnm, resize_bilinear, synth_glyphs, write_binary_corpus,
                   write_pnm)

__all__ = [
    "__version__",
    "RandVitError", "BadConfig", "NonDivisibleImage", "EmptySample",
    "OutOfBounds", "BadDim", "ShapeMismatch", "NonFiniteGradient",
    "NonStochasticInput", "SchemaMismatch", "TruncatedFile", "EmptySplit",
    "BadCheckpoint", "BadImage", "DivisionByZeroGuard",
    "PatchGeometry", "PatchCoords", "RunStreams", "TokenBatch",
    "extract_patches", "grid_coords", "random_coords", "round_half_away",
    "stream", "token_count",
    "PosEncConfig", "encode", "frequencies",
    "VitConfig", "ForwardTrace", "forward", "init_params",
    "load_checkpoint", "save_checkpoint",
    "TrainConfig", "cross_entropy", "evaluate", "lr_at", "mixup", "train_run",
    "FlopsReport", "attention_rollout", "count_flops", "render_heatmap",
    "work_efficiency",
    "Dataset", "load_binary_corpus", "normalize", "denormalize", "read_pnm",
    "resize_bilinear", "synth_glyphs", "write_binary_corpus", "write_pnm",
]
