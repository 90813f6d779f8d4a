"""DeskDownscale - conditional diffusion downscaling at desk scale."""

__version__ = "2026-10-18-09"
