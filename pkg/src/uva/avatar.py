"""The avatar model state and its per-point query pipeline.

posed point -> diffused skinning weights -> inverse LBS -> displacement ->
canonical point -> signed height + code blend -> (sigma, colour)
"""

from __future__ import annotations

import copy

import numpy as np
import torch
from torch import nn

from .body_model import AnchorMesh, Pose, Skeleton
from .canonical_field import (
    ColorNet,
    FieldNetworks,
    ShadingNet,
    StructuredCodes,
    blend,
    eval_base_color,
    eval_density,
    eval_shading,
    positional_encoding,
)
from .config import AblationFlags, ModelConfig
from .mesh_geometry import MeshIndex, height_torch, idw_weights_torch
from .motion_field import (
    DisplacementNet,
    PoseContext,
    diffuse_weights,
    inverse_lbs,
    nonrigid_displacement,
)


class SwapState(nn.Module):
    """Borrowed appearance decoders plus per-anchor source codes and region weights."""

    def __init__(self, color: ColorNet, shading: ShadingNet, source_codes: torch.Tensor, region: torch.Tensor):
        super().__init__()
        self.color = color
        self.shading = shading
        self.register_buffer("source_codes", source_codes)
        self.register_buffer("region", region)


class Avatar(nn.Module):
    def __init__(
        self,
        skeleton: Skeleton,
        mesh: AnchorMesh,
        config: ModelConfig = ModelConfig(),
        flags: AblationFlags = AblationFlags(),
        seed: int = 0,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        self.skeleton = skeleton
        self.mesh = mesh
        self.config = config
        self.flags = flags
        self.seed = seed
        self.trained_iterations = 0
        self.swap_config: ModelConfig | None = None
        n = skeleton.bone_count
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            gen = torch.Generator().manual_seed(seed)
            self.codes = StructuredCodes(mesh.vertex_count, config.code_dim, config.code_init_std, gen)
            self.fields = FieldNetworks(config, n)
            self.displacement = DisplacementNet(n, config.pe_frequencies, config.delta_width, config.delta_depth)
        self.register_module("swap", None)
        self.to(dtype)
        self.index = MeshIndex.from_mesh(mesh)
        self._contexts: dict[bytes, PoseContext] = {}

    @property
    def dtype(self) -> torch.dtype:
        return self.codes.l_geo.dtype

    def set_canonical_vertices(self, vertices: np.ndarray) -> None:
        """Move the anchor nodes; codes stay attached by vertex index."""
        self.mesh = self.mesh.with_vertices(vertices)
        self.index = MeshIndex.from_mesh(self.mesh)
        self._contexts.clear()

    def pose_context(self, pose: Pose) -> PoseContext:
        key = pose.rotations.tobytes() + pose.translation.tobytes()
        ctx = self._contexts.get(key)
        if ctx is None:
            if len(self._contexts) > 64:
                self._contexts.clear()
            ctx = PoseContext.build(self.skeleton, self.mesh, pose)
            self._contexts[key] = ctx
        return ctx

    def attach_swap(self, swap: SwapState | None, source_config: ModelConfig | None = None) -> None:
        self.swap = swap
        self.swap_config = None if swap is None else (source_config or self.config)

    def clone(self) -> "Avatar":
        return copy.deepcopy(self)

    # ------------------------------------------------------------------

    def query(self, points: np.ndarray, ctx: PoseContext) -> dict:
        """Evaluate density and colour at posed-space points for one pose."""
        geo = self.query_geometry(points, ctx)
        out = self.query_color(geo)
        out.update(geo)
        return out

    def query_geometry(self, points: np.ndarray, ctx: PoseContext, with_density: bool = True) -> dict:
        """Canonical mapping, signed height, code neighbours and (optionally) density."""
        cfg, flags = self.config, self.flags
        dtype = self.dtype
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        weights = diffuse_weights(
            pts, ctx.posed_vertices, self.mesh.lbs_weights, cfg.knn_k, cfg.bg_threshold, ctx.tree
        )
        x_rigid = torch.as_tensor(inverse_lbs(pts, weights, ctx.transforms), dtype=dtype)
        pose_vec = torch.as_tensor(ctx.pose.flat(), dtype=dtype)
        proj = self.index.project(x_rigid.numpy().astype(np.float64))
        x_c = x_rigid
        if not flags.disable_delta:
            h_rigid = torch.as_tensor(proj.height, dtype=dtype)
            if flags.zero_signed_height:
                h_rigid = torch.zeros_like(h_rigid)
            delta = nonrigid_displacement(h_rigid, pose_vec, self.displacement, cfg.delta_max)
            delta = delta * torch.as_tensor(~weights.background, dtype=dtype)[:, None]
            x_c = x_rigid + delta
            if bool((delta != 0).any()):
                proj = self.index.project(x_c.detach().numpy().astype(np.float64))
        h = height_torch(x_c, self.index, proj.face, proj.sign)
        if flags.zero_signed_height:
            h = torch.zeros_like(h)
        idx, _, _ = self.index.knn(x_c.detach().numpy().astype(np.float64), cfg.knn_k)
        idx = torch.as_tensor(idx)
        w = idw_weights_torch(x_c, torch.as_tensor(self.index.vertices, dtype=dtype), idx)
        geo = {"x_c": x_c, "h": h, "knn": (idx, w), "pose_vec": pose_vec, "background": weights.background}
        if with_density:
            geo["sigma"] = eval_density(h, blend(self.codes.l_geo, idx, w), self.fields)
        return geo

    def query_color(self, geo: dict) -> dict:
        """Shaded colour from the output of :meth:`query_geometry`."""
        idx, w = geo["knn"]
        h, pose_vec = geo["h"], geo["pose_vec"]
        c0, feature = eval_base_color(h, blend(self.codes.l_rgb, idx, w), self.fields)
        s = eval_shading(feature, pose_vec, self.fields, self.flags.disable_shading)
        rgb = torch.clamp(c0 * s[..., None], 0.0, 1.0)
        out = {"rgb": rgb, "c0": c0, "shading": s, "feature": feature}
        if self.swap is not None:
            out["rgb"] = self._swap_color(rgb, h, pose_vec, idx, w)
        return out

    def _swap_color(self, rgb, h, pose_vec, idx, w):
        region = blend(self.swap.region[:, None], idx, w)[:, 0]
        sel = torch.nonzero(region.detach() > 0)[:, 0]
        if len(sel) == 0:
            return rgb
        h = h[sel]
        code = blend(self.swap.source_codes, idx[sel], w[sel])
        c0, feature = self.swap.color(positional_encoding(h, self.config.pe_frequencies), code)
        if self.flags.disable_shading:
            s = torch.ones(len(sel), dtype=c0.dtype)
        else:
            s = self.swap.shading(feature, pose_vec.expand(len(sel), -1))
        c_src = torch.clamp(c0 * s[:, None], 0.0, 1.0)
        m = region[sel][:, None]
        rgb = rgb.clone()
        rgb[sel] = (1 - m) * rgb[sel] + m * c_src
        return rgb

    # ------------------------------------------------------------------

    def code_parameters(self):
        return [self.codes.l_geo, self.codes.l_rgb]

    def network_parameters(self):
        code_ids = {id(p) for p in self.code_parameters()}
        return [p for p in self.parameters() if id(p) not in code_ids]
