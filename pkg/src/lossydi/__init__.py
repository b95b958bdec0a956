"""Packet-loss-resilient split inference.

Train a small network, fine-tune it with dropout (and optionally a codec) at
the split point so it tolerates missing activation elements, then run the
two halves across a simulated or real lossy datagram link.
"""

from .channel import ChannelConfig, LatencyModel
from .codec import PcaSpec, QuantizerSpec
from .comtune import ComtuneConfig, FineTuneResult, fine_tune, pretrain_base
from .dipipeline import Deployment, evaluate, infer_once
from .errors import BudgetError, ConfigError, DimensionError, ParseError, StateError
from .harness import Arm, SweepConfig, gen_synthetic, run_sweep
from .nncore import Network, TrainConfig, init_mlp, train

__version__ = "0.1.0"

__all__ = [
    "Arm",
    "BudgetError",
    "ChannelConfig",
    "ComtuneConfig",
    "ConfigError",
    "Deployment",
    "DimensionError",
    "FineTuneResult",
    "LatencyModel",
    "Network",
    "ParseError",
    "PcaSpec",
    "QuantizerSpec",
    "StateError",
    "SweepConfig",
    "TrainConfig",
    "evaluate",
    "fine_tune",
    "gen_synthetic",
    "infer_once",
    "init_mlp",
    "pretrain_base",
    "run_sweep",
    "train",
]
