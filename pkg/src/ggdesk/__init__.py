"""Desk-scale text-to-image GAN with adaptive kernel selection, L2
self-attention, a multi-scale-input/output discriminator and a GAN
upsampler, built on a self-contained numpy autodiff engine."""

__version__ = "0.1.0"
