"""Zero-shot 3D style transfer on feature Gaussian splats, in plain numpy.

A scene is fitted as 3D Gaussians carrying both colour and a small latent
feature. The feature map rasterized for any view is lifted to encoder width,
restyled with AdaIN against an arbitrary style image and decoded to RGB.
Because the features live in 3D, every view is restyled by the same map.
"""
from .gaussians import GaussianSet, from_points
from .rasterizer import RenderOutput, rasterize, rasterize_backward
from .sceneio import Camera, SceneDataset, load_gaussians, load_scene, save_gaussians
from .stylizer import TINY, VGG19_RELU4, EncoderArch, StyleModel, stylize_view

__version__ = "0.1.0"

__all__ = [
    "Camera", "EncoderArch", "GaussianSet", "RenderOutput", "SceneDataset", "StyleModel",
    "TINY", "VGG19_RELU4", "from_points", "load_gaussians", "load_scene", "rasterize",
    "rasterize_backward", "save_gaussians", "stylize_view",
]
