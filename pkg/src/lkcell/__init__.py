"""Large-kernel nucleus instance segmentation: kernels, network, postprocessing, metrics."""

from .errors import (ConfigError, ConfigMismatchError, DomainError, FormatVersionError, LKCellError,
                     ShapeError, TruncatedFileError, ValidationError, WeightFileError)
from .lk_block import FusedBlock, LKBlock, LKBlockConfig, reparameterize
from .network import NetworkConfig, SegmentationOutput, build_network, get_config
from .postprocess import InstanceSegmentation, PostprocessParams, instance_segment

__version__ = "0.1.0"
