"""Mesh-anchored volumetric human avatars.

A posed-space query point is mapped to a canonical frame by inverse skinning
and a learned displacement, described by its signed height over the anchor
mesh, and decoded by small fields conditioned on codes stored at the mesh
vertices. Editing the mesh or the per-vertex codes edits the avatar locally.
"""

from .avatar import Avatar
from .body_model import AnchorMesh, BodySpec, Pose, Skeleton, build_default_body, forward_kinematics, pose_mesh
from .camera import Camera, look_at
from .config import AblationFlags, ModelConfig, RenderSettings, TrainConfig
from .renderer import render_image

__version__ = "0.1.0"

__all__ = [
    "AblationFlags",
    "AnchorMesh",
    "Avatar",
    "BodySpec",
    "Camera",
    "ModelConfig",
    "Pose",
    "RenderSettings",
    "Skeleton",
    "TrainConfig",
    "build_default_body",
    "forward_kinematics",
    "look_at",
    "pose_mesh",
    "render_image",
]
