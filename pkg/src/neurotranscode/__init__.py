"""Cyclic EEG-fMRI transcoding and transformational backprojection on
synthetic ground-truthed data.

The package is layered bottom-up: `tensor` (reverse-mode autodiff on numpy
arrays), `conv` (shared-kernel convolutions and resampling), `optim`,
`storage` (the .tnsr format and text sidecars), `datamodel` (recordings,
grids, epoching), `simulate` (ground-truthed studies), `transcoder` (the
four cyclically trained stacks), `backprojector` (fusion of the two source
estimates), `evaluate`, and `cli`.
"""

__version__ = "0.1.0"

from .tensor import Tensor, TensorError, as_tensor, backward
from .datamodel import (
    DataError,
    EegRecording,
    FmriRecording,
    StimulusSchedule,
    VolumeLayout,
)
from .storage import FormatError, load_tensor, save_tensor
from .config import ConfigError

__all__ = [
    "Tensor",
    "TensorError",
    "as_tensor",
    "backward",
    "DataError",
    "EegRecording",
    "FmriRecording",
    "StimulusSchedule",
    "VolumeLayout",
    "FormatError",
    "load_tensor",
    "save_tensor",
    "ConfigError",
    "__version__",
]
