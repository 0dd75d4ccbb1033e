"""voxgen: category/text-conditioned voxel shape generation with discrete latents."""

__version__ = "0.1.0"
