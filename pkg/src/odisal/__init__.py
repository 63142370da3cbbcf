"""Saliency prediction for omnidirectional images.

Pipeline: cut an equirectangular image into undistorted view-frustum
patches, score each patch with a two-stage CNN whose refinement stage
sees per-pixel spherical coordinates, then splat the per-patch saliency
back onto the sphere and smooth over the seams.
"""

__version__ = "0.1.0"
