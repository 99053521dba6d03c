"""U-shaped blind-spot network: spec, builder, checkpoint I/O."""

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, read_checkpoint, save_checkpoint
from .network import BlindSpotError, Network, build_network, init_parameters
from .spec import NetworkSpec, Node, analytic_parameter_count, parameter_shapes

__all__ = [
    "BlindSpotError", "Checkpoint", "CheckpointError", "read_checkpoint", "Network", "NetworkSpec", "Node",
    "analytic_parameter_count", "build_network", "init_parameters", "load_checkpoint",
    "parameter_shapes", "save_checkpoint",
]
