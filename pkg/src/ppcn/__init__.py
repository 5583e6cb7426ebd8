"""Polarimetric vision toolkit.

Analytic Stokes-parameter oracles (S0, DoLP, AoP), a pixel-wise 1x1
convolutional parameter-constructing network (PPCN) with hand-written
backpropagation, a deterministic synthetic scene generator, and
reproducible SGD training loops with bit-exact checkpoint resume.

Hot kernels run on a compiled extension when available, with a pure
numpy fallback selected at import; see ppcn.backend.
"""

from ._threads import apply_thread_env as _apply_thread_env

_apply_thread_env()

__version__ = "0.1.0"

from .backend import available_backends, backend_name, set_backend
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .errors import (ConfigError, FormatError, InputError, NumericsError,
                     PpcnError, ShapeError, StateError, StorageError)
from .losses import (class_iou, fitting_loss, fitting_loss_backward,
                     grad_check, pixel_accuracy)
from .nn import (BatchNorm, Conv1x1, Conv3x3, PpcnModel, ReLU, StructureSpec,
                 init_params, parameter_count, parse_structure)
from .polarimetry import (AopConvention, InputStrategy, ParamKind, PolarParams,
                          RawStack, analyze, compute_aop, compute_dolp,
                          compute_stokes, normalize_param)
from .ptns import read_ptns, write_ptns
from .scenegen import (ClassProfile, GroundTruthScene, PolarDataset, SceneSpec,
                       generate_dataset, generate_scene, make_scene_spec,
                       read_dataset, render_raw, write_dataset)
from .taskhead import HeadModel, SoftmaxCrossEntropy
from .training import (TrainConfig, TrainResult, evaluate, resume_training,
                       sweep, train_fit_params, train_joint)

__all__ = [
    "__version__",
    "available_backends", "backend_name", "set_backend",
    "Checkpoint", "load_checkpoint", "save_checkpoint",
    "PpcnError", "ConfigError", "ShapeError", "InputError", "StateError",
    "StorageError", "FormatError", "NumericsError",
    "fitting_loss", "fitting_loss_backward", "pixel_accuracy", "class_iou",
    "grad_check",
    "Conv1x1", "Conv3x3", "ReLU", "BatchNorm", "PpcnModel", "StructureSpec",
    "parse_structure", "parameter_count", "init_params",
    "AopConvention", "InputStrategy", "ParamKind", "PolarParams", "RawStack",
    "analyze", "compute_stokes", "compute_dolp", "compute_aop",
    "normalize_param",
    "read_ptns", "write_ptns",
    "ClassProfile", "SceneSpec", "GroundTruthScene", "PolarDataset",
    "generate_scene", "render_raw", "make_scene_spec", "generate_dataset",
    "write_dataset", "read_dataset",
    "HeadModel", "SoftmaxCrossEntropy",
    "TrainConfig", "TrainResult", "train_fit_params", "train_joint",
    "resume_training", "evaluate", "sweep",
]
