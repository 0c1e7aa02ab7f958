"""Multi-view point cloud registration by flow matching with rigidity forcing."""

from .curation import CurationConfig, generate_samples, synthetic_suite
from .errors import FlowRegError
from .evaluation import EvalCase, SuccessCriteria, evaluate
from .geometry import (
    RigidTransform,
    SimilarityTransform,
    chamfer_distance,
    kabsch_align,
    rigidity_residual,
    rotation_error_deg,
    translation_error_m,
)
from .model import ModelConfig, VelocityField, load_model, save_model
from .sampler import RegistrationResult, SamplerConfig, register
from .sampling import SampledView, SamplingConfig, sample_view
from .training import TrainConfig, train

__version__ = "0.1.0"
