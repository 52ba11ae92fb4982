"""Mesh-anchored canonical field: code tables, positional encoding and the
density / base-colour / shading decoders."""

from __future__ import annotations

import hashlib
import json
import math
import struct
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .config import AblationFlags, ModelConfig
from .mesh_geometry import MeshIndex, idw_weights_torch


def positional_encoding(x: torch.Tensor, num_frequencies: int) -> torch.Tensor:
    """Fourier features ``[x, sin(2^k pi x), cos(2^k pi x)]`` for k < num_frequencies.

    Output width is ``x.shape[-1] * (2 * num_frequencies + 1)``.
    """
    if num_frequencies < 0:
        raise ValueError("num_frequencies must be >= 0")
    out = [x]
    for k in range(num_frequencies):
        freq = (2.0**k) * math.pi
        out.append(torch.sin(freq * x))
        out.append(torch.cos(freq * x))
    return torch.cat(out, dim=-1)


def encoded_dim(in_dim: int, num_frequencies: int) -> int:
    return in_dim * (2 * num_frequencies + 1)


class StructuredCodes(nn.Module):
    """Per-anchor geometry and appearance latent tables."""

    def __init__(self, num_vertices: int, dim: int = 32, init_std: float = 0.01, generator=None):
        super().__init__()
        self.l_geo = nn.Parameter(torch.randn(num_vertices, dim, generator=generator) * init_std)
        self.l_rgb = nn.Parameter(torch.randn(num_vertices, dim, generator=generator) * init_std)

    @property
    def num_vertices(self) -> int:
        return self.l_geo.shape[0]


def softplus(x: torch.Tensor) -> torch.Tensor:
    """log(1 + e^x) built from ops whose result does not depend on the batch size.

    The fused torch kernels vectorize with a scalar tail, so the same row can
    differ in the last bit depending on how many rows share the call.
    """
    return torch.clamp(x, min=0) + torch.log1p(torch.exp(-x.abs()))


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return 1.0 / (1.0 + torch.exp(-x))


class Softplus(nn.Module):
    def forward(self, x):
        return softplus(x)


def _mlp(dims: list[int], act: type[nn.Module]) -> nn.Sequential:
    layers = []
    for i in range(len(dims) - 1):
        layers.append(nn.Linear(dims[i], dims[i + 1]))
        if i < len(dims) - 2:
            layers.append(act())
    return nn.Sequential(*layers)


class DensityNet(nn.Module):
    """sigma = softplus(gain * MLP([phi(h), l_geo])); softplus also between layers.

    The fixed ``gain`` lets Adam reach opaque densities in a few hundred steps;
    the output bias starts at ``bias_init`` so the initial volume is near empty.
    """

    def __init__(self, in_dim: int, width: int = 128, depth: int = 4, gain: float = 1.0, bias_init: float = 0.0):
        super().__init__()
        self.gain = gain
        self.mlp = _mlp([in_dim] + [width] * (depth - 1) + [1], Softplus)
        nn.init.constant_(self.mlp[-1].bias, bias_init)

    def forward(self, h_enc, code):
        return softplus(self.gain * self.mlp(torch.cat([h_enc, code], -1)))[..., 0]


class ColorNet(nn.Module):
    """Base colour and feature from ``[phi(h), l_rgb]``; the input is re-injected after ``skip`` layers."""

    def __init__(self, in_dim: int, width: int = 256, depth: int = 8, skip: int = 4, feature_dim: int = 128):
        super().__init__()
        self.skip = skip
        layers = []
        for i in range(depth):
            d_in = in_dim if i == 0 else width
            if i == skip and i > 0:
                d_in += in_dim
            layers.append(nn.Linear(d_in, width))
        self.layers = nn.ModuleList(layers)
        self.rgb = nn.Linear(width, 3)
        self.feature = nn.Linear(width, feature_dim)

    def forward(self, h_enc, code):
        x_in = torch.cat([h_enc, code], -1)
        x = x_in
        for i, layer in enumerate(self.layers):
            if i == self.skip and i > 0:
                x = torch.cat([x, x_in], -1)
            x = F.relu(layer(x))
        return sigmoid(self.rgb(x)), self.feature(x)


class ShadingNet(nn.Module):
    """s = 2 sigmoid(MLP([f, theta])); the last layer starts at zero so s = 1."""

    def __init__(self, feature_dim: int, pose_dim: int, width: int = 64, depth: int = 3):
        super().__init__()
        self.mlp = _mlp([feature_dim + pose_dim] + [width] * (depth - 1) + [1], nn.ReLU)
        nn.init.zeros_(self.mlp[-1].weight)
        nn.init.zeros_(self.mlp[-1].bias)

    def forward(self, feature, pose_vec):
        return 2.0 * sigmoid(self.mlp(torch.cat([feature, pose_vec], -1)))[..., 0]


class FieldNetworks(nn.Module):
    def __init__(self, config: ModelConfig, bone_count: int):
        super().__init__()
        h_dim = encoded_dim(3, config.pe_frequencies)
        self.pe_frequencies = config.pe_frequencies
        self.density = DensityNet(
            h_dim + config.code_dim, config.density_width, config.density_depth, config.density_gain,
            config.density_bias_init,
        )
        self.color = ColorNet(
            h_dim + config.code_dim, config.color_width, config.color_depth, config.color_skip, config.feature_dim
        )
        self.shading = ShadingNet(config.feature_dim, 3 * bone_count, config.shading_width, config.shading_depth)


# ---------------------------------------------------------------------------
# evaluation


def knn_for_codes(points: torch.Tensor, index: MeshIndex, k: int):
    """Neighbour indices (no grad) and differentiable inverse-distance weights."""
    idx, _, _ = index.knn(points.detach().cpu().numpy().astype(np.float64), k)
    idx_t = torch.as_tensor(idx)
    verts = torch.as_tensor(index.vertices, dtype=points.dtype)
    return idx_t, idw_weights_torch(points, verts, idx_t)


def blend(table: torch.Tensor, idx: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    return (weights[..., None] * table[idx]).sum(-2)


def interpolate_codes(points: torch.Tensor, index: MeshIndex, codes: StructuredCodes, k: int = 4):
    """Inverse-distance blend of both code tables over the K nearest canonical anchors."""
    idx, w = knn_for_codes(points, index, k)
    return blend(codes.l_geo, idx, w), blend(codes.l_rgb, idx, w)


def eval_density(h: torch.Tensor, l_geo: torch.Tensor, nets: FieldNetworks) -> torch.Tensor:
    return nets.density(positional_encoding(h, nets.pe_frequencies), l_geo)


def eval_base_color(h: torch.Tensor, l_rgb: torch.Tensor, nets: FieldNetworks):
    return nets.color(positional_encoding(h, nets.pe_frequencies), l_rgb)


def eval_shading(feature: torch.Tensor, pose_vec: torch.Tensor, nets: FieldNetworks, disabled: bool = False):
    if disabled:
        return torch.ones(feature.shape[:-1], dtype=feature.dtype)
    if pose_vec.dim() == 1:
        pose_vec = pose_vec.expand(*feature.shape[:-1], -1)
    return nets.shading(feature, pose_vec)


def eval_radiance(
    points: torch.Tensor,
    h: torch.Tensor,
    pose_vec: torch.Tensor,
    index: MeshIndex,
    codes: StructuredCodes,
    nets: FieldNetworks,
    flags: AblationFlags = AblationFlags(),
    k: int = 4,
    knn=None,
) -> dict:
    """Density and shaded colour at canonical points with signed heights ``h``.

    Returns a dict with ``sigma``, ``rgb`` (clamped c0 * s), ``c0``, ``shading``,
    ``feature`` and the neighbour ``knn`` pair used for the code blend.
    """
    if flags.zero_signed_height:
        h = torch.zeros_like(h)
    idx, w = knn if knn is not None else knn_for_codes(points, index, k)
    l_geo = blend(codes.l_geo, idx, w)
    l_rgb = blend(codes.l_rgb, idx, w)
    sigma = eval_density(h, l_geo, nets)
    c0, feature = eval_base_color(h, l_rgb, nets)
    s = eval_shading(feature, pose_vec, nets, flags.disable_shading)
    rgb = torch.clamp(c0 * s[..., None], 0.0, 1.0)
    return {"sigma": sigma, "rgb": rgb, "c0": c0, "shading": s, "feature": feature, "knn": (idx, w), "h": h}


# ---------------------------------------------------------------------------
# code table interchange

CODES_MAGIC = b"UVACODE1"


def export_codes(path, table: torch.Tensor | np.ndarray, topology_hash: str, kind: str = "l_rgb") -> None:
    """Write one code table as ``magic | u32 header length | JSON header | raw little-endian data``."""
    arr = np.ascontiguousarray(
        table.detach().cpu().numpy() if isinstance(table, torch.Tensor) else table, dtype="<f4"
    )
    header = {
        "kind": kind,
        "dtype": "float32",
        "shape": list(arr.shape),
        "vertex_order_hash": topology_hash,
        "sha256": hashlib.sha256(arr.tobytes()).hexdigest(),
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CODES_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(arr.tobytes())


def import_codes(path, expected_hash: str | None = None) -> tuple[np.ndarray, dict]:
    data = Path(path).read_bytes()
    if data[:8] != CODES_MAGIC or len(data) < 12:
        raise ValueError(f"{path}: not a code table file")
    (n,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12 : 12 + n])
    raw = data[12 + n :]
    shape = tuple(header["shape"])
    if len(raw) != 4 * int(np.prod(shape)):
        raise ValueError(f"{path}: truncated code table")
    arr = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    if hashlib.sha256(arr.tobytes()).hexdigest() != header["sha256"]:
        raise ValueError(f"{path}: checksum mismatch")
    if expected_hash is not None and header["vertex_order_hash"] != expected_hash:
        raise ValueError(f"{path}: vertex order does not match the target mesh")
    return arr, header
