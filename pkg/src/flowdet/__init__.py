"""Flow-matching generative object detection with few-step ODE sampling."""

__version__ = "0.1.0"

from .geometry import Detection, FlowVector, NormalizedBox  # noqa: F401
from .losses import LossBreakdown, LossWeights  # noqa: F401
from .metrics import EvalConfig, EvalReport  # noqa: F401
from .model import ModelConfig, VelocityModel  # noqa: F401
from .sampler import DetectionSet, SamplerConfig, TimeSchedule  # noqa: F401
from .trainer import TrainConfig  # noqa: F401
