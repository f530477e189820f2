"""fined: lightweight multi-stage edge detection.

The package is organized as a small stack:

  tensor      4-D arrays, differentiable kernels, tape autodiff, grad_check
  network     graph builder for the three model variants, parameter store, weight files
  loss        class-balanced per-pixel edge loss
  trainer     SGD with step-decay schedule, augmentation, loss logging
  inference   multiscale prediction and directional non-maximum thinning
  evaluation  boundary matching, precision/recall sweeps, ODS/OIS summary
  imageio     PNG (via Pillow) and PGM/PPM readers and writers
  plots       matplotlib renderings of loss curves and PR curves
  toydata     synthetic shape corpus used by the tests and quickstart
  cli         the ``fined`` command-line entry point

``plots`` (and through it matplotlib) only loads when a report is rendered.
"""

from .tensor import ConvSpec, Tape, Tensor, backward, grad_check
from .network import (
    INFERENCE,
    REFERENCE_COUNTS_M,
    TRAIN,
    VARIANTS,
    ForwardOutputs,
    Network,
    NetworkSpec,
    ParamStore,
    bind_store,
    build_network,
    conv_layout,
    count_params,
    init_params,
    load_params,
    param_shapes,
    prune_helpers,
    save_params,
    warm_init,
)
from .loss import ClassWeights, class_weights, pixel_loss, stage_loss, total_loss
from .trainer import (
    EpochLog,
    Sample,
    TrainConfig,
    augment,
    evaluate_mean_loss,
    fit,
    lr_at,
    sgd_step,
    write_loss_log,
)
from .inference import nms_thin, predict, predict_multiscale
from .evaluation import (
    EvalConfig,
    EvalReport,
    MatchResult,
    evaluate_dataset,
    fuse_annotations,
    match_edges,
    ods_ois,
    pr_at_threshold,
    pr_curve,
    summary_dict,
    sweep_image,
    write_summary,
)
from .imageio import ManifestEntry, load_gt, parse_manifest, read_image, write_image
from .toydata import make_shapes, write_toy_dataset

__all__ = [
    "ConvSpec", "Tape", "Tensor", "backward", "grad_check",
    "INFERENCE", "REFERENCE_COUNTS_M", "TRAIN", "VARIANTS",
    "ForwardOutputs", "Network", "NetworkSpec", "ParamStore",
    "bind_store", "build_network", "conv_layout", "count_params",
    "init_params", "load_params", "param_shapes", "prune_helpers",
    "save_params", "warm_init",
    "ClassWeights", "class_weights", "pixel_loss", "stage_loss", "total_loss",
    "EpochLog", "Sample", "TrainConfig", "augment", "evaluate_mean_loss",
    "fit", "lr_at", "sgd_step", "write_loss_log",
    "nms_thin", "predict", "predict_multiscale",
    "EvalConfig", "EvalReport", "MatchResult", "evaluate_dataset",
    "fuse_annotations", "match_edges", "ods_ois", "pr_at_threshold",
    "pr_curve", "summary_dict", "sweep_image", "write_summary",
    "ManifestEntry", "load_gt", "parse_manifest", "read_image", "write_image",
    "make_shapes", "write_toy_dataset",
]

__version__ = "0.1.0"
