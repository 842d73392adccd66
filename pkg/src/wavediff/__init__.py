"""Desk-scale wavelet-space diffusion GAN: Haar transforms, diffusion math,
wavelet-embedded networks, training, sampling and compute accounting."""

__version__ = "0.1.0"

from .tensor import Tensor, backward, grad, no_grad, count_flops  # noqa: F401
from .wavelet import dwt, idwt, pack, unpack, multilevel_dwt, SubbandSet  # noqa: F401
from .diffusion import make_schedule, q_sample, q_posterior_sample, sample, SamplerConfig  # noqa: F401
from .networks import Generator, Discriminator, GeneratorSpec, PRESETS  # noqa: F401
