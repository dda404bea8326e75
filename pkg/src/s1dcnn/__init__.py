"""Streaming keyword spotting with SVDF and stacked 1D CNN (S1DCNN) models."""
from .errors import (ConfigError, DataError, EmptyInputError, FormatError, S1dcnnError, ShapeError,
                     StateError, TrainingDivergedError)
from .layers import Activation, BatchNorm, Linear, S1DCNNUnit, SvdfLayer, reduce_svdf_to_unit
from .network import (Model, ModelConfig, build, count_macs, count_params, forward, load,
                      output_delay, paper_config, receptive_field, save)
from .streaming import Stream, TriggerEvent, batch_scores, new_stream

__version__ = "0.1.0"
