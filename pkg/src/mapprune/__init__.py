"""Feature-map pruning of small convolutional networks with saliency criteria and an ablation oracle."""

from .errors import (ConfigError, DataError, MapPruneError, ModelFormatError, NumericError, PruningError,
                     ShapeError, UsageError)
from .network import Network, build_testbed, flops, load, prune_channel, save

__version__ = "0.1.0"
