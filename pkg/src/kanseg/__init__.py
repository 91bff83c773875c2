"""KAN-augmented U-shaped segmentation networks with Grad-CAM explainability tooling."""

from .data import Sample, split_dataset, synth_generate
from .errors import ConfigurationError, DimensionError, LoadError, NumericalError, StateError
from .explain import SaliencyMap, channel_relevance, grad_cam, otsu_threshold, plausibility, sufficiency
from .models import Model, ModelConfig, build_ukan, build_unet, count_flops, load_checkpoint, save_checkpoint
from .numerics import Tensor, backward, grad_check
from .splinekan import KanLinearParams, SplineGrid, bspline_basis, kan_linear_forward
from .training import MetricsReport, TrainConfig, evaluate, generalized_dice_loss, train

__version__ = "0.1.0"
