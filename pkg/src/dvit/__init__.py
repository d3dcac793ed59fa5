"""DViT: a deformable-aggregation vision transformer for aerial scene
classification, with the dataset split/merge protocol, generative-pipeline
clients, evaluation metrics, Grad-CAM explanations, and a judging harness.
"""

from .tensor import (Tensor, ShapeError, TensorDumpError, GradCheckError,
                     apply_op, no_grad, grad_check, dump_tensors, load_tensors)
from .model import ModelConfig, DViT, save_checkpoint, load_checkpoint, CheckpointError
from .data import (ManifestEntry, read_manifest, write_manifest,
                   stratified_split, merge_and_resplit, NormalizationSpec,
                   decode_and_normalize, canny_edges)
from .metrics import confusion, compute_report, kid
from .explain import grad_cam, render_overlay, judge_prompt, parse_verdict
from .train import TrainConfig, train, evaluate

__version__ = "0.1.0"

__all__ = [
    "Tensor", "ShapeError", "TensorDumpError", "GradCheckError",
    "apply_op", "no_grad", "grad_check", "dump_tensors", "load_tensors",
    "ModelConfig", "DViT", "save_checkpoint", "load_checkpoint", "CheckpointError",
    "ManifestEntry", "read_manifest", "write_manifest",
    "stratified_split", "merge_and_resplit", "NormalizationSpec",
    "decode_and_normalize", "canny_edges",
    "confusion", "compute_report", "kid",
    "grad_cam", "render_overlay", "judge_prompt", "parse_verdict",
    "TrainConfig", "train", "evaluate",
    "__version__",
]
