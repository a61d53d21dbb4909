"""Latent-space fingerprinting for generative models at desk scale."""
from .latent_model import GeneratorSpec, Generator, ImageGrid, LatentSample, build_generator

__all__ = ["GeneratorSpec", "Generator", "ImageGrid", "LatentSample", "build_generator"]
