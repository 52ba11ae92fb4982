"""Mesh-guided geometry edits, texture swapping and mask-guided texture painting."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.ndimage import binary_dilation
from scipy.spatial import cKDTree

from .avatar import Avatar, SwapState
from .body_model import AnchorMesh, Pose, load_obj
from .camera import Camera
from .canonical_field import blend
from .config import RenderSettings
from .mesh_geometry import MeshIndex, knn_inverse_distance
from .renderer import compute_bounds, composite, generate_rays, render_image, sample_points

MIN_FACE_AREA = 1e-12


class EditError(RuntimeError):
    pass


class TopologyError(ValueError):
    pass


# ---------------------------------------------------------------------------
# geometry


@dataclass
class GeometryEdit:
    vertices: np.ndarray
    faces: np.ndarray | None = None

    @classmethod
    def from_obj(cls, path) -> "GeometryEdit":
        v, f, _ = load_obj(path)
        return cls(v, f)

    def check(self, mesh: AnchorMesh) -> np.ndarray:
        v = np.asarray(self.vertices, dtype=np.float64)
        if v.shape != mesh.vertices.shape:
            raise TopologyError(
                f"topology mismatch: edit has {len(v)} vertices, anchor mesh has {mesh.vertex_count}"
            )
        if self.faces is not None:
            probe = mesh.with_vertices(mesh.vertices)
            object.__setattr__(probe, "faces", np.asarray(self.faces, dtype=np.int64))
            if probe.topology_hash() != mesh.topology_hash():
                raise TopologyError("topology mismatch: face list differs from the anchor mesh")
        if not np.all(np.isfinite(v)):
            raise TopologyError("edited vertices must be finite")
        areas = mesh.face_areas(v)
        if np.any(areas <= MIN_FACE_AREA):
            raise TopologyError(f"edit creates {int(np.sum(areas <= MIN_FACE_AREA))} degenerate faces")
        return v


def apply_geometry_edit(model: Avatar, edit: GeometryEdit) -> Avatar:
    """Return a copy whose canonical anchors sit at the edited positions.

    Codes stay attached by vertex index; posing applies forward LBS to the
    edited vertices so the skinning field follows the edit.
    """
    v = edit.check(model.mesh)
    out = model.clone()
    out.set_canonical_vertices(v)
    return out


def scale_about_axis(vertices: np.ndarray, ids: np.ndarray, origin, axis, factor: float) -> np.ndarray:
    """Scale the selected vertices radially about a line (their axial coordinate is kept)."""
    v = np.array(vertices, dtype=np.float64)
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    rel = v[ids] - origin
    along = (rel @ axis)[:, None] * axis
    v[ids] = origin + along + factor * (rel - along)
    return v


# ---------------------------------------------------------------------------
# node selection


@dataclass
class NodeSelection:
    indices: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        if len(np.unique(self.indices)) != len(self.indices):
            raise ValueError("selection indices must be unique")
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
            if self.weights.shape != self.indices.shape or np.any((self.weights < 0) | (self.weights > 1)):
                raise ValueError("selection weights must be in [0, 1], one per index")

    def __len__(self):
        return len(self.indices)

    def validate(self, vertex_count: int) -> None:
        if len(self.indices) and (self.indices.min() < 0 or self.indices.max() >= vertex_count):
            raise ValueError(f"selection index out of range for {vertex_count} vertices")

    def mask(self, vertex_count: int) -> np.ndarray:
        self.validate(vertex_count)
        m = np.zeros(vertex_count, dtype=bool)
        m[self.indices] = True
        return m

    def to_json(self, path) -> None:
        doc = {"indices": self.indices.tolist()}
        if self.weights is not None:
            doc["weights"] = self.weights.tolist()
        Path(path).write_text(json.dumps(doc))

    @classmethod
    def from_json(cls, path) -> "NodeSelection":
        doc = json.loads(Path(path).read_text())
        return cls(doc["indices"], doc.get("weights"))


def select_nodes_from_mask(camera: Camera, pose: Pose, mask: np.ndarray, model: Avatar,
                           distance_threshold: float = 0.02, settings: RenderSettings = RenderSettings(),
                           visibility: bool = True, chunk: int = 4096) -> NodeSelection:
    """Anchor vertices close to a masked pixel's ray and not hidden behind the rendered surface.

    Args:
        camera, pose: the view the mask was drawn in.
        mask: (H, W) boolean.
        distance_threshold: point-to-ray distance limit in scene units.
        visibility: keep only vertices in front of the composited median depth
            plus the threshold and one sample spacing.

    Returns:
        Canonical vertex indices (posed and canonical vertices share indices).
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (camera.height, camera.width):
        raise ValueError(f"mask shape {mask.shape} does not match the camera")
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        return NodeSelection(np.zeros(0, dtype=np.int64))
    pix = np.stack([xs, ys], 1)
    ctx = model.pose_context(pose)
    verts = ctx.posed_vertices
    rays = generate_rays(camera, pix)
    limit = np.full(len(pix), np.inf)
    if visibility:
        near, far, hit = compute_bounds(rays.origins, rays.directions, verts, settings.margin)
        depth = render_image(model, camera, pose, settings, pixels=pix)["depth"]
        spacing = np.where(hit, (far - near) / settings.samples_per_ray, 0.0)
        limit = depth + distance_threshold + spacing
    chosen = np.zeros(len(verts), dtype=bool)
    for s in range(0, len(pix), chunk):
        o = rays.origins[s : s + chunk]
        d = rays.directions[s : s + chunk]
        rel = verts[None, :, :] - o[:, None, :]
        t = np.einsum("rvk,rk->rv", rel, d)
        dist2 = np.einsum("rvk,rvk->rv", rel, rel) - t * t
        ok = (t > 0) & (dist2 < distance_threshold**2) & (t <= limit[s : s + chunk, None])
        chosen |= ok.any(0)
    return NodeSelection(np.nonzero(chosen)[0])


def one_ring(faces: np.ndarray, selected: np.ndarray) -> np.ndarray:
    """Boolean mask of unselected vertices sharing a face with a selected one."""
    touched = selected[faces].any(1)
    ring = np.zeros_like(selected)
    ring[faces[touched].reshape(-1)] = True
    return ring & ~selected


def influence_mask(model: Avatar) -> np.ndarray:
    """Vertices whose codes or region weights differ from the unedited state after a swap."""
    if model.swap is None:
        return np.zeros(model.mesh.vertex_count, dtype=bool)
    return model.swap.region.detach().cpu().numpy() > 0


# ---------------------------------------------------------------------------
# texture swap


def rigid_align(source: np.ndarray, target: np.ndarray, iterations: int = 20) -> tuple[np.ndarray, np.ndarray]:
    """Rigid ICP taking ``source`` points onto the ``target`` cloud. Returns (R, t)."""
    R = np.eye(3)
    t = target.mean(0) - source.mean(0)
    tree = cKDTree(target)
    for _ in range(iterations):
        moved = source @ R.T + t
        _, nn = tree.query(moved)
        matched = target[nn]
        mu_s, mu_t = source.mean(0), matched.mean(0)
        H = (source - mu_s).T @ (matched - mu_t)
        U, _, Vt = np.linalg.svd(H)
        D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
        R = Vt.T @ D @ U.T
        t = mu_t - R @ mu_s
    return R, t


def surface_correspondence(target_mesh: AnchorMesh, source_mesh: AnchorMesh, ids: np.ndarray) -> np.ndarray:
    """Source-canonical positions for target vertices: rigid alignment, then nearest surface point."""
    R, t = rigid_align(target_mesh.vertices, source_mesh.vertices)
    moved = target_mesh.vertices[ids] @ R.T + t
    return MeshIndex.from_mesh(source_mesh).project(moved).position


def swap_texture(target: Avatar, source: Avatar, selection: NodeSelection,
                 correspondence: np.ndarray | None = None) -> Avatar:
    """Give the selected target nodes the source's appearance.

    Selected vertices receive source codes interpolated at their
    corresponding source-canonical positions and are decoded with the
    source's colour and shading networks. Unselected vertices in the 1-ring
    of the selection blend source and target colour 50/50.

    Args:
        target, source: trained avatars.
        selection: target vertex indices.
        correspondence: (V_target, 3) source-canonical positions, or None for
            identity (same topology) or automatic alignment (otherwise).

    Returns:
        An edited copy of ``target``.
    """
    if getattr(source, "trained_iterations", 0) <= 0:
        raise ValueError("source avatar is untrained")
    if target.swap is not None:
        raise ValueError("target already carries a texture swap")
    V = target.mesh.vertex_count
    selected = selection.mask(V)
    ring = one_ring(target.mesh.faces, selected)
    touched = selected | ring
    ids = np.nonzero(touched)[0]
    src_table = source.codes.l_rgb.detach()
    codes = torch.zeros(V, src_table.shape[1], dtype=target.dtype)
    same_topology = target.mesh.topology_hash() == source.mesh.topology_hash()
    if correspondence is None and same_topology and np.array_equal(target.mesh.vertices, source.mesh.vertices):
        codes[ids] = src_table[ids].to(target.dtype)
    else:
        if correspondence is None:
            pos = surface_correspondence(target.mesh, source.mesh, ids)
        else:
            pos = np.asarray(correspondence, dtype=np.float64).reshape(V, 3)[ids]
        idx, w, _ = knn_inverse_distance(pos, source.mesh.vertices, source.config.knn_k, source.index.vertex_tree)
        codes[ids] = blend(src_table.double(), torch.as_tensor(idx), torch.as_tensor(w)).to(target.dtype)
    region = torch.zeros(V, dtype=target.dtype)
    region[torch.as_tensor(np.nonzero(selected)[0])] = 1.0
    region[torch.as_tensor(np.nonzero(ring)[0])] = 0.5
    color = copy.deepcopy(source.fields.color).to(target.dtype)
    shading = copy.deepcopy(source.fields.shading).to(target.dtype)
    out = target.clone()
    out.attach_swap(SwapState(color, shading, codes, region), source.config)
    return out


# ---------------------------------------------------------------------------
# texture painting


@dataclass
class PaintJob:
    camera: Camera
    pose: Pose
    reference: np.ndarray  # (H, W, 3)
    mask: np.ndarray  # (H, W) bool
    dilation: int = 3
    iterations: int = 2000
    code_lr: float = 5e-3
    decoder_lr: float | None = None
    freeze_decoder: bool = True
    distance_threshold: float = 0.02
    batch_rays: int = 1024
    samples_per_ray: int = 64
    seed: int = 0

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        self.reference = np.asarray(self.reference, dtype=np.float64)
        if self.mask.shape != self.reference.shape[:2]:
            raise ValueError("mask and reference resolutions differ")
        if self.mask.shape != (self.camera.height, self.camera.width):
            raise ValueError("mask does not match the camera resolution")
        if self.decoder_lr is None:
            self.decoder_lr = self.code_lr / 100.0
        if self.code_lr < self.decoder_lr:
            raise ValueError("code_lr must be >= decoder_lr")

    def dilated_mask(self) -> np.ndarray:
        if self.dilation > 0 and self.mask.any():
            return binary_dilation(self.mask, iterations=self.dilation)
        return self.mask.copy()


def paint_texture(model: Avatar, job: PaintJob, min_weight: float = 1e-4) -> tuple[Avatar, NodeSelection]:
    """Fine-tune the selected ``l_rgb`` rows (and optionally the colour decoder) to a painting.

    Density is frozen, so compositing weights are computed once and samples
    with negligible weight are dropped from the colour evaluation.

    Returns:
        (edited copy, selected nodes).
    """
    out = model.clone()
    if not job.mask.any():
        return out, NodeSelection(np.zeros(0, dtype=np.int64))
    if out.swap is not None:
        raise EditError("painting a swapped avatar is not supported")
    region = job.dilated_mask()
    settings = RenderSettings(samples_per_ray=job.samples_per_ray)
    sel = select_nodes_from_mask(job.camera, job.pose, region, out, job.distance_threshold, settings)
    if len(sel) == 0:
        return out, sel

    ys, xs = np.nonzero(region)
    pix = np.stack([xs, ys], 1)
    target = torch.as_tensor(job.reference[ys, xs], dtype=out.dtype)
    ctx = out.pose_context(job.pose)
    rays = generate_rays(job.camera, pix)
    near, far, hit = compute_bounds(rays.origins, rays.directions, ctx.posed_vertices, settings.margin)
    n = job.samples_per_ray
    t, delta = sample_points(near[hit], far[hit], n)
    pts = rays.origins[hit][:, None] + t[..., None] * rays.directions[hit][:, None]
    with torch.no_grad():
        geo = out.query_geometry(pts.reshape(-1, 3), ctx)
        sigma = geo["sigma"].reshape(-1, n)
        _, acc, weights = composite(sigma, torch.zeros(*sigma.shape, 3, dtype=out.dtype), delta)
    hit_rows = np.nonzero(hit)[0]
    keep = (weights.reshape(-1) >= min_weight).numpy()
    flat_w = weights.reshape(-1)[torch.as_tensor(keep)]
    ray_of = torch.as_tensor(np.repeat(np.arange(len(hit_rows)), n)[keep])
    idx, w = geo["knn"]
    geo = {"h": geo["h"][keep], "knn": (idx[keep], w[keep]), "pose_vec": geo["pose_vec"]}
    bg = torch.as_tensor(settings.background, dtype=out.dtype)
    base = torch.zeros(len(pix), 3, dtype=out.dtype) + bg
    base_hit = (1 - acc)[:, None] * bg

    row_mask = torch.zeros(out.mesh.vertex_count, 1, dtype=out.dtype)
    row_mask[torch.as_tensor(sel.indices)] = 1.0
    for p in out.parameters():
        p.requires_grad_(False)
    l_rgb = out.codes.l_rgb
    l_rgb.requires_grad_(True)
    groups = [{"params": [l_rgb], "lr": job.code_lr}]
    if not job.freeze_decoder:
        dec = list(out.fields.color.parameters())
        for p in dec:
            p.requires_grad_(True)
        groups.append({"params": dec, "lr": job.decoder_lr})
    opt = torch.optim.Adam(groups, betas=(0.9, 0.999), eps=1e-8)
    rng = np.random.default_rng(job.seed)
    hit_t = torch.as_tensor(hit)
    for it in range(job.iterations):
        color = out.query_color(geo)["rgb"]
        pix_hit = base_hit.index_add(0, ray_of, flat_w[:, None] * color)
        pred = base.clone()
        pred[hit_t] = pix_hit
        if len(pix) > job.batch_rays:
            pick = torch.as_tensor(rng.choice(len(pix), job.batch_rays, replace=False))
            loss = torch.mean((pred[pick] - target[pick]) ** 2)
        else:
            loss = torch.mean((pred - target) ** 2)
        if not torch.isfinite(loss):
            raise EditError(f"non-finite paint loss at iteration {it}")
        opt.zero_grad(set_to_none=False)
        loss.backward()
        l_rgb.grad.mul_(row_mask)  # unselected rows keep zero moments, hence zero updates
        opt.step()
    for p in out.parameters():
        p.requires_grad_(True)
    return out, sel
