"""Closest-point projection, signed height and inverse-distance KNN weights.

Discrete choices (which face, which neighbours) are made in numpy without
gradients; the continuous quantities can then be recomputed in torch on the
chosen face so autograd sees a smooth function of the query.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from numba import njit
from scipy.spatial import cKDTree

IDW_EPS = 1e-8
TIE_TOL = 1e-12

# regions reported by the point/triangle routine
INTERIOR, EDGE_AB, EDGE_AC, EDGE_BC, VERT_A, VERT_B, VERT_C = range(7)


def _dot(x, y):
    return (x * y).sum(-1)


def _safe(den, xp):
    return xp.where(den == 0, xp.ones_like(den), den)


def closest_point_barycentric(p, a, b, c, xp=np):
    """Barycentric coordinates of the closest point to ``p`` on triangles (a, b, c).

    Works on numpy arrays or torch tensors (pass ``xp=torch``); all inputs are
    (..., 3). Returns (bary (..., 3), region (...)). Follows the Voronoi-region
    walk of Ericson, Real-Time Collision Detection, 5.1.5.
    """
    ab, ac, ap = b - a, c - a, p - a
    d1, d2 = _dot(ab, ap), _dot(ac, ap)
    bp = p - b
    d3, d4 = _dot(ab, bp), _dot(ac, bp)
    cp = p - c
    d5, d6 = _dot(ab, cp), _dot(ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    denom = _safe(va + vb + vc, xp)
    v_in, w_in = vb / denom, vc / denom
    v_ab = d1 / _safe(d1 - d3, xp)
    w_ac = d2 / _safe(d2 - d6, xp)
    w_bc = (d4 - d3) / _safe((d4 - d3) + (d5 - d6), xp)

    zero = xp.zeros_like(d1)
    one = xp.ones_like(d1)
    # evaluate regions in reverse priority so the first matching test wins
    v, w = v_in, w_in
    region = xp.zeros(d1.shape, dtype=xp.int64)
    for cond, nv, nw, code in (
        ((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), 1 - w_bc, w_bc, EDGE_BC),
        ((vb <= 0) & (d2 >= 0) & (d6 <= 0), zero, w_ac, EDGE_AC),
        ((d6 >= 0) & (d5 <= d6), zero, one, VERT_C),
        ((vc <= 0) & (d1 >= 0) & (d3 <= 0), v_ab, zero, EDGE_AB),
        ((d3 >= 0) & (d4 <= d3), one, zero, VERT_B),
        ((d1 <= 0) & (d2 <= 0), zero, zero, VERT_A),
    ):
        v = xp.where(cond, nv, v)
        w = xp.where(cond, nw, w)
        region = xp.where(cond, code, region)
    bary = xp.stack([1 - v - w, v, w], -1)
    return bary, region


@dataclass
class SurfacePoint:
    face_index: int
    barycentric: np.ndarray
    position: np.ndarray
    normal: np.ndarray
    uv: np.ndarray


@dataclass
class Projection:
    """Batched closest-surface-point result (arrays with a leading query axis)."""

    face: np.ndarray
    barycentric: np.ndarray
    region: np.ndarray
    position: np.ndarray
    normal: np.ndarray
    uv: np.ndarray
    sign: np.ndarray
    distance: np.ndarray

    @property
    def signed_distance(self) -> np.ndarray:
        return self.sign * self.distance

    @property
    def height(self) -> np.ndarray:
        """(n, 3) signed height coordinates [u, v, signed distance]."""
        return np.concatenate([self.uv, self.signed_distance[:, None]], axis=1)

    def point(self, i: int) -> SurfacePoint:
        return SurfacePoint(int(self.face[i]), self.barycentric[i], self.position[i], self.normal[i], self.uv[i])


def _normalize(x, eps=0.0):
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(n, eps) if eps else x / n


class MeshIndex:
    """Read-only acceleration structure for one vertex configuration of a mesh."""

    def __init__(self, vertices, faces, uvs, leaf_size: int = 12):
        self.vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        self.faces = np.ascontiguousarray(faces, dtype=np.int64)
        self.uvs = np.ascontiguousarray(uvs, dtype=np.float64)
        tri = self.vertices[self.faces]
        self.flat_triangles = np.ascontiguousarray(tri.reshape(-1, 9))
        cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        self.face_normals = _normalize(cross)
        V = len(self.vertices)
        vn = np.zeros((V, 3))
        for k in range(3):
            np.add.at(vn, self.faces[:, k], cross)  # |cross| = 2 * area
        self.vertex_normals = _normalize(vn, 1e-300)
        self.vertex_pseudo_normals = self._angle_weighted_normals(tri)
        self.edge_pseudo_normals = self._edge_normals()
        self.vertex_tree = cKDTree(self.vertices)
        self._build_leaves(tri, leaf_size)

    @classmethod
    def from_mesh(cls, mesh, vertices=None) -> "MeshIndex":
        return cls(mesh.vertices if vertices is None else vertices, mesh.faces, mesh.uvs)

    def _angle_weighted_normals(self, tri):
        out = np.zeros((len(self.vertices), 3))
        for k in range(3):
            e1 = tri[:, (k + 1) % 3] - tri[:, k]
            e2 = tri[:, (k + 2) % 3] - tri[:, k]
            cosang = _dot(_normalize(e1), _normalize(e2))
            ang = np.arccos(np.clip(cosang, -1.0, 1.0))
            np.add.at(out, self.faces[:, k], ang[:, None] * self.face_normals)
        return _normalize(out, 1e-300)

    def _edge_normals(self):
        # per face, per edge (ab, ac, bc): normalized sum of the adjacent face normals
        F = len(self.faces)
        pairs = {EDGE_AB: (0, 1), EDGE_AC: (0, 2), EDGE_BC: (1, 2)}
        acc = {}
        for f in range(F):
            for i, j in pairs.values():
                key = tuple(sorted((self.faces[f, i], self.faces[f, j])))
                acc.setdefault(key, []).append(f)
        out = np.zeros((F, 3, 3))
        for f in range(F):
            for slot, (i, j) in enumerate(pairs.values()):
                key = tuple(sorted((self.faces[f, i], self.faces[f, j])))
                out[f, slot] = self.face_normals[acc[key]].sum(0)
        return _normalize(out, 1e-300)

    def _build_leaves(self, tri, leaf_size):
        centroids = tri.mean(1)
        leaves = []

        def split(ids):
            if len(ids) <= leaf_size:
                leaves.append(ids)
                return
            c = centroids[ids]
            axis = int(np.argmax(c.max(0) - c.min(0)))
            order = ids[np.argsort(c[:, axis], kind="stable")]
            half = len(order) // 2
            split(order[:half])
            split(order[half:])

        split(np.arange(len(self.faces)))
        size = max(len(l) for l in leaves)
        self.leaf_faces = np.stack([np.concatenate([l, np.full(size - len(l), l[0])]) for l in leaves])
        self.leaf_center = np.zeros((len(leaves), 3))
        self.leaf_radius = np.zeros(len(leaves))
        for i, l in enumerate(leaves):
            pts = tri[l].reshape(-1, 3)
            center = 0.5 * (pts.min(0) + pts.max(0))
            self.leaf_center[i] = center
            self.leaf_radius[i] = np.linalg.norm(pts - center, axis=1).max() * (1 + 1e-12)

    # -- queries -----------------------------------------------------------

    def _face_distance(self, points, faces):
        tri = self.vertices[self.faces[faces]]
        p = points[:, None, :] if faces.ndim == 2 else points
        bary, _ = closest_point_barycentric(p, tri[..., 0, :], tri[..., 1, :], tri[..., 2, :])
        x0 = np.einsum("...k,...kd->...d", bary, tri)
        return np.linalg.norm(p - x0, axis=-1)

    def closest_faces(self, points: np.ndarray) -> np.ndarray:
        """Exact index of the closest face for each query; ties go to the lowest index."""
        points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
        return _closest_faces_kernel(
            points, self.flat_triangles, self.leaf_faces, self.leaf_center, self.leaf_radius, TIE_TOL
        )

    def project(self, points: np.ndarray, faces: np.ndarray | None = None) -> Projection:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if faces is None:
            faces = self.closest_faces(points)
        fv = self.faces[faces]
        tri = self.vertices[fv]
        bary, region = closest_point_barycentric(points, tri[:, 0], tri[:, 1], tri[:, 2])
        x0 = np.einsum("nk,nkd->nd", bary, tri)
        r = points - x0
        dist = np.linalg.norm(r, axis=1)
        n_interp = np.einsum("nk,nkd->nd", bary, self.vertex_normals[fv])
        norm = np.linalg.norm(n_interp, axis=1, keepdims=True)
        normal = np.where(norm < 1e-6, self.face_normals[faces], n_interp / np.maximum(norm, 1e-300))
        sign_normal = self.sign_normals(faces, region, normal)
        sign = np.where(_dot(r, sign_normal) >= 0, 1.0, -1.0)
        uv = np.einsum("nk,nkd->nd", bary, self.uvs[fv])
        return Projection(faces, bary, region, x0, normal, uv, sign, dist)

    def sign_normals(self, faces, region, interior_normal):
        out = interior_normal.copy()
        for code, slot in ((EDGE_AB, 0), (EDGE_AC, 1), (EDGE_BC, 2)):
            m = region == code
            out[m] = self.edge_pseudo_normals[faces[m], slot]
        for code, corner in ((VERT_A, 0), (VERT_B, 1), (VERT_C, 2)):
            m = region == code
            out[m] = self.vertex_pseudo_normals[self.faces[faces[m], corner]]
        return out

    def knn(self, points: np.ndarray, k: int):
        return knn_inverse_distance(points, self.vertices, k, tree=self.vertex_tree)


@njit(cache=True)
def _point_triangle_sqdist(px, py, pz, t):
    a0, a1, a2 = t[0], t[1], t[2]
    abx, aby, abz = t[3] - a0, t[4] - a1, t[5] - a2
    acx, acy, acz = t[6] - a0, t[7] - a1, t[8] - a2
    apx, apy, apz = px - a0, py - a1, pz - a2
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        v, w = 0.0, 0.0
    else:
        bpx, bpy, bpz = px - t[3], py - t[4], pz - t[5]
        d3 = abx * bpx + aby * bpy + abz * bpz
        d4 = acx * bpx + acy * bpy + acz * bpz
        cpx, cpy, cpz = px - t[6], py - t[7], pz - t[8]
        d5 = abx * cpx + aby * cpy + abz * cpz
        d6 = acx * cpx + acy * cpy + acz * cpz
        vc = d1 * d4 - d3 * d2
        vb = d5 * d2 - d1 * d6
        va = d3 * d6 - d5 * d4
        if d3 >= 0.0 and d4 <= d3:
            v, w = 1.0, 0.0
        elif vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
            v, w = d1 / (d1 - d3), 0.0
        elif d6 >= 0.0 and d5 <= d6:
            v, w = 0.0, 1.0
        elif vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
            v, w = 0.0, d2 / (d2 - d6)
        elif va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
            w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
            v = 1.0 - w
        else:
            den = 1.0 / (va + vb + vc)
            v, w = vb * den, vc * den
    qx = a0 + v * abx + w * acx - px
    qy = a1 + v * aby + w * acy - py
    qz = a2 + v * abz + w * acz - pz
    return qx * qx + qy * qy + qz * qz


@njit(cache=True)
def _closest_faces_kernel(points, tri, leaf_faces, leaf_center, leaf_radius, tol):
    n = points.shape[0]
    n_leaf, leaf_size = leaf_faces.shape
    out = np.empty(n, dtype=np.int64)
    lower = np.empty(n_leaf)
    for i in range(n):
        px, py, pz = points[i, 0], points[i, 1], points[i, 2]
        for l in range(n_leaf):
            dx = px - leaf_center[l, 0]
            dy = py - leaf_center[l, 1]
            dz = pz - leaf_center[l, 2]
            lower[l] = np.sqrt(dx * dx + dy * dy + dz * dz) - leaf_radius[l]
        # nearest leaf first for a tight bound, then every leaf the bound cannot exclude
        first = np.argmin(lower)
        best_d = np.inf
        best_f = -1
        for r in range(n_leaf + 1):
            l = first if r == 0 else r - 1
            if (r > 0 and l == first) or lower[l] > best_d + tol:
                continue
            for s in range(leaf_size):
                f = leaf_faces[l, s]
                d = np.sqrt(_point_triangle_sqdist(px, py, pz, tri[f]))
                if best_f < 0 or d < best_d - tol:
                    best_d = d
                    best_f = f
                elif abs(d - best_d) <= tol and f < best_f:
                    best_d = min(d, best_d)
                    best_f = f
        out[i] = best_f
    return out


def _as_index(mesh) -> MeshIndex:
    return mesh if isinstance(mesh, MeshIndex) else MeshIndex.from_mesh(mesh)


def closest_surface_point(query, mesh) -> SurfacePoint:
    """Globally closest point on ``mesh`` (an ``AnchorMesh`` or ``MeshIndex``) to one query."""
    return _as_index(mesh).project(np.asarray(query, dtype=np.float64).reshape(1, 3)).point(0)


def signed_height(points, mesh) -> np.ndarray:
    """[u, v, signed distance] per query point; shape (n, 3), or (3,) for a single point."""
    pts = np.asarray(points, dtype=np.float64)
    out = _as_index(mesh).project(pts.reshape(-1, 3)).height
    return out[0] if pts.ndim == 1 else out


def knn_inverse_distance(points, vertices, k: int, tree: cKDTree | None = None):
    """K nearest vertices and their normalized inverse-distance weights.

    Returns (indices (n, K), weights (n, K), distances (n, K)), nearest first.
    """
    vertices = np.asarray(vertices, dtype=np.float64)
    if k > len(vertices):
        raise ValueError(f"K={k} exceeds vertex count {len(vertices)}")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    tree = tree or cKDTree(vertices)
    dist, idx = tree.query(pts, k=k)
    dist = dist.reshape(len(pts), k)
    idx = idx.reshape(len(pts), k).astype(np.int64)
    raw = 1.0 / np.maximum(dist, IDW_EPS)
    return idx, raw / raw.sum(1, keepdims=True), dist


# ---------------------------------------------------------------------------
# differentiable recomputation on fixed discrete choices


def idw_weights_torch(points: torch.Tensor, vertices: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    """Inverse-distance weights for fixed neighbour indices, differentiable in ``points``."""
    diff = points[:, None, :] - vertices[idx]
    dist = torch.sqrt((diff * diff).sum(-1) + 1e-30)
    raw = 1.0 / torch.clamp(dist, min=IDW_EPS)
    return raw / raw.sum(1, keepdim=True)


def height_torch(points: torch.Tensor, index: MeshIndex, faces: np.ndarray, sign: np.ndarray) -> torch.Tensor:
    """Signed height on fixed faces with fixed signs, differentiable in ``points``."""
    dtype = points.dtype
    verts = torch.as_tensor(index.vertices, dtype=dtype)
    fv = torch.as_tensor(index.faces[faces])
    tri = verts[fv]
    bary, _ = closest_point_barycentric(points, tri[:, 0], tri[:, 1], tri[:, 2], xp=torch)
    x0 = (bary[..., None] * tri).sum(1)
    uv = (bary[..., None] * torch.as_tensor(index.uvs, dtype=dtype)[fv]).sum(1)
    r = points - x0
    dist = torch.sqrt((r * r).sum(-1) + 1e-30)
    d = torch.as_tensor(sign, dtype=dtype) * dist
    return torch.cat([uv, d[:, None]], dim=1)
