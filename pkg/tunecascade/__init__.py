"""
tunecascade - two-stage text-to-music latent diffusion

A diffusion magnitude autoencoder compresses waveforms into a bounded
latent and renders them back; a text-conditioned latent diffusion model
generates those latents from prompts with classifier-free guidance.

License: MIT
"""

from .audio import Spectrogram, Waveform, istft, read_wav, stft, write_wav
from .config import RunConfig, dump_config, load_config, tiny_config
from .dmae import DmaeModel, build_dmae, decode, encode
from .errors import TuneCascadeError
from .service import MusicService
from .tcld import TcldModel, build_tcld, generate
from .unet import UNetConfig, UNetModel, build

__version__ = "0.1.0"
__license__ = "MIT"
__description__ = "Two-stage text-to-music latent diffusion: magnitude autoencoder plus text-conditioned generator"

__all__ = [
    "DmaeModel",
    "MusicService",
    "RunConfig",
    "Spectrogram",
    "TcldModel",
    "TuneCascadeError",
    "UNetConfig",
    "UNetModel",
    "Waveform",
    "build",
    "build_dmae",
    "build_tcld",
    "decode",
    "dump_config",
    "encode",
    "generate",
    "istft",
    "load_config",
    "read_wav",
    "stft",
    "tiny_config",
    "write_wav",
    "__version__",
    "__license__",
    "__description__",
]
