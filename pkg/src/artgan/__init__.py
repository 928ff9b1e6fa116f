"""Label-feedback GAN (K+1-way sigmoid discriminator, shared encoder/decoder
reconstruction) with hand-written numpy kernels."""

from .model import ArtGAN, ModelConfig, build
from .train import TrainConfig, Trainer, train, train_step

__all__ = ["ArtGAN", "ModelConfig", "TrainConfig", "Trainer", "build", "train", "train_step"]
__version__ = "0.1.0"
