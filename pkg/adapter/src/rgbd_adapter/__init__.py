"""RGB-D dataset to voxfuse frame-stream converter."""

from .dataset import RgbdDataset
from .encoders import ENCODER_PROFILES, SEGMENTER_PROFILES, EncoderBundle
from .export import AdapterConfig, export_stream

__version__ = "0.1.0"
