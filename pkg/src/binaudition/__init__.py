"""Binaural sound-source localization and detection toolkit."""

from .errors import (
    BinauditionError, CompatibilityError, DivergenceError, EmptyStreamError, FormatError,
    NoValidFrequencyError, SilentBinError, SilentChannelError,
)
from .features import BinauralFeatures
from .frontend import HOP, N_FFT, SAMPLE_RATE, PcmStream
from .grid import build_direction_grid
from .hrtf import HeadModel, HrtfSet, load_hrtf, save_hrtf, synthesize_hrtf
from .music import MusicLocalizer
from .ssde import SSDELocalizer, SSDEModel, SSDENetRegressor, TrainingConfig

__version__ = "0.1.0"
