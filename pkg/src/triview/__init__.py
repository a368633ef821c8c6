"""Triple-view convolutional networks for chest radiograph classification.

Each radiograph is cropped into left-lung, overall and right-lung views,
each view runs through its own small residual CNN, and the streams are
combined by one of six fusion layers.
"""

__version__ = "0.1.0"

from .backbone import BackboneConfig  # noqa: E402
from .fusion import FusionSpec  # noqa: E402
from .trainer import TrainConfig, train_model  # noqa: E402

__all__ = ["BackboneConfig", "FusionSpec", "TrainConfig", "train_model", "__version__"]
