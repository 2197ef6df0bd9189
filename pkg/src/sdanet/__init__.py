"""SDANet crowd counting on a small numpy differentiation engine."""

from .data import DensityMap, HeadAnnotations, generate_density_map, load_annotations
from .losses import LossConfig, Metrics, evaluate_metrics, total_loss
from .model import ModelConfig, ModelParams, build_model, forward, param_count
from .tensor import Tensor, backward

__version__ = "0.1.0"
