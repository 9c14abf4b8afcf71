"""USEMamba: universal speech enhancement with TF-Mamba regression and flow-matching models."""

from .signals import StftConfig, Waveform, read_wav, write_wav
from .model import ModelConfig, USEMamba, load_checkpoint, save_checkpoint
from .config import RunConfig, load_config

__version__ = "0.1.0"

__all__ = [
    "StftConfig", "Waveform", "read_wav", "write_wav",
    "ModelConfig", "USEMamba", "load_checkpoint", "save_checkpoint",
    "RunConfig", "load_config",
]
