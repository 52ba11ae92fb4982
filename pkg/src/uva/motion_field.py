"""Backward skinning: nearest-vertex weight diffusion, blended inverse LBS and
the pose-conditioned non-rigid displacement."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy.spatial import cKDTree
from torch import nn

from .body_model import AnchorMesh, BoneTransforms, Pose, Skeleton, forward_kinematics, pose_mesh
from .canonical_field import encoded_dim, positional_encoding
from .config import ModelConfig
from .mesh_geometry import MeshIndex, knn_inverse_distance

MAX_CONDITION = 1e8


class InverseSkinningError(ArithmeticError):
    """Blended bone transform is (numerically) singular."""

    def __init__(self, message, condition):
        super().__init__(message)
        self.condition = condition


@dataclass
class PointWeights:
    """Bone weights (n, N+1) with the background weight last, plus the KNN source."""

    bone_weights: np.ndarray
    knn_index: np.ndarray
    knn_weights: np.ndarray
    background: np.ndarray

    def __len__(self):
        return len(self.bone_weights)


@dataclass
class PoseContext:
    """Everything about one pose that is shared by all query points."""

    pose: Pose
    transforms: BoneTransforms
    posed_vertices: np.ndarray
    tree: cKDTree

    @classmethod
    def build(cls, skeleton: Skeleton, mesh: AnchorMesh, pose: Pose) -> "PoseContext":
        transforms = forward_kinematics(skeleton, pose)
        posed = pose_mesh(mesh, transforms)
        return cls(pose, transforms, posed, cKDTree(posed))


def diffuse_weights(
    points,
    posed_vertices: np.ndarray,
    lbs_weights: np.ndarray,
    k: int = 4,
    bg_threshold: float = 0.1,
    tree: cKDTree | None = None,
) -> PointWeights:
    """Spread per-vertex skinning weights to arbitrary posed-space points.

    Points farther than ``bg_threshold`` from every posed vertex become
    background: zero bone weights, background weight one.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    idx, w, dist = knn_inverse_distance(pts, posed_vertices, k, tree=tree)
    n_bones = lbs_weights.shape[1]
    out = np.zeros((len(pts), n_bones + 1))
    out[:, :n_bones] = np.einsum("nk,nkb->nb", w, lbs_weights[idx])
    background = dist[:, 0] > bg_threshold
    out[background] = 0.0
    out[background, n_bones] = 1.0
    return PointWeights(out, idx, w, background)


def inverse_lbs(points, weights: PointWeights | np.ndarray, transforms: BoneTransforms) -> np.ndarray:
    """Apply the inverse of the weight-blended bone transform to each point."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    w = weights.bone_weights if isinstance(weights, PointWeights) else np.asarray(weights)
    if w.shape[1] != len(transforms):
        raise ValueError(f"{w.shape[1]} weights per point but {len(transforms)} transforms")
    blended = np.einsum("nb,bij->nij", w, transforms.matrices)
    A = blended[:, :3, :3]
    cond = np.linalg.cond(A)
    bad = ~(cond < MAX_CONDITION)
    if np.any(bad):
        worst = float(np.nanmax(np.where(np.isfinite(cond), cond, np.inf)))
        raise InverseSkinningError(
            f"blended bone transform is near-singular at {int(bad.sum())} point(s), condition {worst:.3g}",
            worst,
        )
    return np.linalg.solve(A, (pts - blended[:, :3, 3])[..., None])[..., 0]


class DisplacementNet(nn.Module):
    """F_delta: MLP over [phi(h), theta] emitting a 3-vector, last layer zeroed."""

    def __init__(self, bone_count: int, pe_frequencies: int = 6, width: int = 128, depth: int = 4):
        super().__init__()
        self.pe_frequencies = pe_frequencies
        dims = [encoded_dim(3, pe_frequencies) + 3 * bone_count] + [width] * (depth - 1) + [3]
        layers = []
        for i in range(depth):
            layers.append(nn.Linear(dims[i], dims[i + 1]))
            if i < depth - 1:
                layers.append(nn.ReLU())
        self.mlp = nn.Sequential(*layers)
        nn.init.zeros_(self.mlp[-1].weight)
        nn.init.zeros_(self.mlp[-1].bias)

    def forward(self, h: torch.Tensor, pose_vec: torch.Tensor) -> torch.Tensor:
        if pose_vec.dim() == 1:
            pose_vec = pose_vec.expand(h.shape[0], -1)
        return self.mlp(torch.cat([positional_encoding(h, self.pe_frequencies), pose_vec], -1))


def nonrigid_displacement(h: torch.Tensor, pose_vec: torch.Tensor, net: DisplacementNet, max_abs: float = 0.1):
    """Pose-conditioned displacement, clamped to ``|delta|_inf <= max_abs``."""
    return torch.clamp(net(h, pose_vec), -max_abs, max_abs)


def to_canonical(
    points,
    pose: Pose,
    skeleton: Skeleton,
    mesh: AnchorMesh,
    net: DisplacementNet | None,
    config: ModelConfig = ModelConfig(),
    index: MeshIndex | None = None,
    context: PoseContext | None = None,
    zero_signed_height: bool = False,
):
    """Map posed-space points to canonical space.

    Returns ``(x_c, weights)`` with ``x_c`` a tensor (float64 unless ``net``
    dictates otherwise). ``net=None`` disables the displacement.
    """
    ctx = context or PoseContext.build(skeleton, mesh, pose)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    weights = diffuse_weights(pts, ctx.posed_vertices, mesh.lbs_weights, config.knn_k, config.bg_threshold, ctx.tree)
    x_rigid = inverse_lbs(pts, weights, ctx.transforms)
    dtype = next(net.parameters()).dtype if net is not None else torch.float64
    x_r = torch.as_tensor(x_rigid, dtype=dtype)
    if net is None:
        return x_r, weights
    index = index or MeshIndex.from_mesh(mesh)
    h = torch.as_tensor(index.project(x_rigid).height, dtype=dtype)
    if zero_signed_height:
        h = torch.zeros_like(h)
    pose_vec = torch.as_tensor(pose.flat(), dtype=dtype)
    delta = nonrigid_displacement(h, pose_vec, net, config.delta_max)
    on_body = torch.as_tensor(~weights.background, dtype=dtype)[:, None]
    return x_r + delta * on_body, weights
