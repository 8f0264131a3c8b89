"""Desk-scale audio-visual segmentation.

A self-contained pipeline: a float64 autodiff tensor core, an encoder/
fusion/decoder segmentation network, alignment losses and mask metrics, a
deterministic synthetic audible-video generator, and a seeded training
harness with binary storage formats.
"""

__version__ = "0.1.0"
