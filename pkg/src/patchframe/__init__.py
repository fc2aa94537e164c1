"""Person-hiding patch attacks and white-frame defenses on a toy detector.

The package implements differentiable patch/frame compositing over a small
numpy autodiff core (numba-accelerated kernels with a pure-numpy fallback,
selected via PATCHFRAME_BACKEND), a trainable toy one-stage detector with
a synthetic person dataset, the attack variants (adv-patch, adv-tshirt,
adv-cloak), the single/universal white-frame optimizers, and an AP-based
evaluation harness with adaptive-attack protocols.
"""

from .attack import (
    AdversarialPatch,
    AttackConfig,
    PrintabilityPalette,
    TransformSample,
    apply_patch,
    load_palette,
    loss_nps,
    loss_obj,
    loss_tv,
    optimize_patch,
    sample_transform,
    transform_for_image,
)
from .backend import BACKEND_NAME
from .boxes import BoundingBox, iou, nms
from .data import LabeledDataset, Sample, load_dataset, sample_subset, save_dataset
from .defense import (
    DefenseConfig,
    WhiteFrame,
    apply_frame,
    defense_error,
    loss_swf,
    optimize_swf,
    optimize_uwf,
    prediction_distance,
    scale_thickness,
)
from .detector import (
    DetectorOutput,
    ObjectnessField,
    ToyDetector,
    TrainConfig,
    detect,
    load_toy_detector,
    max_objectness,
    objectness_field,
    save_toy_detector,
    train_toy_detector,
)
from .evaluation import (
    EvalCondition,
    EvalConfig,
    EvalReport,
    adaptive_attack_eval,
    average_precision,
    emit_plots,
    evaluate_condition,
    objectness_map_report,
    per_image_attack_eval,
    thickness_sweep,
)
from .images import load_png, pad_to_square, resize, save_png
from .synth import generate_synthetic_dataset
from .tps import tps_fit, warp_patch

__version__ = "0.1.0"
