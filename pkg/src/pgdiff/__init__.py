"""Pose-guided diffusion at desk scale.

Subpackages cover camera/epipolar geometry, a minimal gradient engine,
epipolar-reweighted attention, DDPM-style schedules and samplers, a toy
UNet denoiser, autoregressive sequence generation, procedural multi-view
scenes, and image/consistency metrics, wired together by a JSON-config CLI.
"""

__version__ = "0.1.0"
