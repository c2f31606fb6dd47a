"""Block-diffusion decoding for a toy vision-language model.

The core is a small reverse-mode autodiff over numpy (``tensor``), a tiny
transformer with a frozen vision encoder (``model``), training objectives for
next-token, full-diffusion and block-diffusion losses (``objectives``,
``training``) and a cached block decoder (``decoding``).
"""

from .data import GridImage, Sample, Tokenizer, caption_for, gen_dataset
from .decoding import Dynamic, Static, generate, generate_ar
from .estimator import BlockDiffusionCaptioner
from .model import ModelConfig, init_params, load_checkpoint, save_checkpoint
from .training import TrainConfig, train_stage

__version__ = "0.1.0"

__all__ = [
    "BlockDiffusionCaptioner", "Dynamic", "GridImage", "ModelConfig", "Sample", "Static", "Tokenizer",
    "TrainConfig", "caption_for", "gen_dataset", "generate", "generate_ar", "init_params", "load_checkpoint",
    "save_checkpoint", "train_stage",
]
