"""Grouped channel-mixing MLPs with a training-only covariance branch.

Also exact cost accounting, plus the tooling to train and probe these
mixers on small models.
"""
from .accounting import CostReport, cost_report, effective_expansion, iso_flop_plan, mixer_macs, mixer_params
from .backbone import BlockConfig, Model, ModelConfig, build_model, forward_classify, pool_token_mixer
from .data import Dataset, block_mean, generate_synthetic, load_idx, save_idx
from .errors import (
    ConfigError,
    DimensionError,
    DivergenceError,
    FormatError,
    NumericError,
    ParameterError,
    ParseError,
    SchemeError,
    UsageError,
)
from .mixers import (
    ChannelMixer,
    MixerConfig,
    MixerParams,
    bd_mlp_forward,
    cca_forward,
    channel_shuffle,
    dense_mlp_forward,
    init_params,
    scheme_forward,
)
from .tensor import Tape, Tensor, backward, finite_diff_grad
from .training import Hyper, TrainLog, gradcheck, set_mode, train

__version__ = "0.1.0"
