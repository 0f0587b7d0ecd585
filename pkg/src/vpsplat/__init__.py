"""Gaussian-splatting reconstruction and image-based relighting for
virtual-production stages."""

__version__ = "0.1.0"

from .core_math import Camera
from .mip import MipPyramid, UvSample
from .rasterizer import RenderOutput, render, render_backward
from .scene import SplatScene, cull_by_mask, load_scene, save_scene

__all__ = [
    "Camera", "MipPyramid", "UvSample", "RenderOutput", "render",
    "render_backward", "SplatScene", "cull_by_mask", "load_scene", "save_scene",
]
