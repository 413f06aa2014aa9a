"""Fine-grained text-conditional GAN at desk scale."""

__version__ = "0.1.0"
