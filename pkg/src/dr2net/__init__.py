"""Block compressive-sensing image reconstruction with a linear mapping
followed by convolutional residual blocks, on a hand-written numpy engine."""
from .errors import (CheckpointError, ConfigError, DatasetError, DimensionError, DivergenceError,
                     Dr2Error, InvalidParameterError, LayoutError, NumericError,
                     SingularSystemError, StateError)
from .model import Dr2Model, dr2_forward, init_model, linear_forward, load_model, save_model
from .pipeline import RateMismatchError, reconstruct_image
from .sensing import build_dataset, load_dataset, make_operator, measure, save_dataset
from .training import TrainConfig, train

__version__ = "0.1.0"
