"""Ray generation, bounding, stratified sampling and volume compositing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .body_model import Pose
from .camera import Camera
from .config import RenderSettings


class RenderError(RuntimeError):
    def __init__(self, message, pixels=None):
        super().__init__(message)
        self.pixels = pixels


@dataclass
class RayBatch:
    origins: np.ndarray
    directions: np.ndarray
    pixels: np.ndarray
    near: np.ndarray | None = None
    far: np.ndarray | None = None
    hit: np.ndarray | None = None

    def __len__(self):
        return len(self.origins)

    def subset(self, mask) -> "RayBatch":
        pick = lambda a: None if a is None else a[mask]
        return RayBatch(self.origins[mask], self.directions[mask], self.pixels[mask],
                        pick(self.near), pick(self.far), pick(self.hit))


def generate_rays(camera: Camera, pixels: np.ndarray) -> RayBatch:
    """Back-project pixel centres. ``pixels`` is (n, 2) integer (x, y)."""
    pixels = np.asarray(pixels).reshape(-1, 2)
    x, y = pixels[:, 0], pixels[:, 1]
    if np.any((x < 0) | (x >= camera.width) | (y < 0) | (y >= camera.height)):
        raise ValueError(f"pixel outside the {camera.width}x{camera.height} image")
    d_cam = np.stack(
        [(x + 0.5 - camera.cx) / camera.fx, (y + 0.5 - camera.cy) / camera.fy, np.ones(len(x))], axis=1
    )
    d = d_cam @ camera.R  # R^T d_cam, row-wise
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    o = np.broadcast_to(camera.center, d.shape).copy()
    return RayBatch(o, d, pixels)


def all_pixels(camera: Camera) -> np.ndarray:
    yy, xx = np.mgrid[0 : camera.height, 0 : camera.width]
    return np.stack([xx.ravel(), yy.ravel()], axis=1)


def compute_bounds(origins, directions, vertices, margin: float = 0.15):
    """Slab intersection with the vertex AABB dilated by ``margin``.

    Returns (near, far, hit); near is clipped to 0 for origins inside the box
    and an empty or touching interval counts as a miss.
    """
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    lo = vertices.min(0) - margin
    hi = vertices.max(0) + margin
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0 = (lo - o) * inv
        t1 = (hi - o) * inv
    tmin = np.minimum(t0, t1)
    tmax = np.maximum(t0, t1)
    # a zero direction component keeps the slab only if the origin lies strictly inside it
    parallel = d == 0
    inside = (o > lo) & (o < hi)
    tmin = np.where(parallel, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(parallel, np.where(inside, np.inf, -np.inf), tmax)
    near = np.maximum(tmin.max(1), 0.0)
    far = tmax.min(1)
    hit = far > near
    return near, far, hit


def sample_points(near, far, n: int, stochastic: bool = False, rng: np.random.Generator | None = None, u=None):
    """Stratified distances along each ray and their interval widths.

    Returns (t (m, n), delta (m, n)); the last width runs to ``far``.
    """
    near = np.asarray(near, dtype=np.float64).reshape(-1, 1)
    far = np.asarray(far, dtype=np.float64).reshape(-1, 1)
    if u is None:
        u = rng.random((len(near), n)) if stochastic else np.full((len(near), n), 0.5)
    width = (far - near) / n
    t = near + (np.arange(n) + u) * width
    delta = np.concatenate([t[:, 1:] - t[:, :-1], far - t[:, -1:]], axis=1)
    return t, delta


def composite(sigma, rgb, delta, background=(0.0, 0.0, 0.0)):
    """Alpha-composite samples front to back.

    ``sigma`` (m, n), ``rgb`` (m, n, 3), ``delta`` (m, n). Returns (colour (m, 3),
    alpha (m,), weights (m, n)). Accepts numpy arrays or torch tensors.
    """
    if not isinstance(sigma, torch.Tensor):
        out = composite(torch.as_tensor(sigma), torch.as_tensor(rgb), torch.as_tensor(delta), background)
        return tuple(o.numpy() for o in out)
    delta = torch.as_tensor(delta, dtype=sigma.dtype)
    tau = sigma * delta
    alpha = 1.0 - torch.exp(-tau)
    # T_i = prod_{j<i} (1 - alpha_j) = exp(-sum_{j<i} tau_j)
    trans = torch.exp(-torch.cat([torch.zeros_like(tau[:, :1]), torch.cumsum(tau, 1)[:, :-1]], 1))
    weights = trans * alpha
    acc = weights.sum(1)
    bg = torch.as_tensor(background, dtype=sigma.dtype)
    color = (weights[..., None] * rgb).sum(1) + (1.0 - acc)[:, None] * bg
    return color, acc, weights


def median_depth(t, weights):
    """Distance at which accumulated opacity first reaches 0.5 (inf where it never does)."""
    w = weights.detach().numpy() if isinstance(weights, torch.Tensor) else np.asarray(weights)
    cum = np.cumsum(w, axis=1)
    reached = cum >= 0.5
    first = np.argmax(reached, axis=1)
    out = np.take_along_axis(np.asarray(t), first[:, None], 1)[:, 0]
    return np.where(reached.any(1), out, np.inf)


def render_rays(model, ctx, rays: RayBatch, settings: RenderSettings, u=None, rng=None, return_knn=False) -> dict:
    """Render rays that hit their bounds (``rays.near``/``far`` set) for one pose."""
    n = settings.samples_per_ray
    t, delta = sample_points(rays.near, rays.far, n, settings.stochastic, rng, u)
    pts = rays.origins[:, None, :] + t[..., None] * rays.directions[:, None, :]
    out = model.query(pts.reshape(-1, 3), ctx)
    m = len(rays)
    sigma = out["sigma"].reshape(m, n)
    rgb = out["rgb"].reshape(m, n, 3)
    color, acc, weights = composite(sigma, rgb, delta, settings.background)
    res = {"color": color, "alpha": acc, "weights": weights, "t": t}
    if return_knn:
        res["knn"] = out["knn"][0].reshape(m, n, -1).numpy()
    return res


def render_image(model, camera: Camera, pose: Pose, settings: RenderSettings = RenderSettings(),
                 pixels=None, return_knn=False) -> dict:
    """Render a full image (or the given pixels) without gradients.

    Returns ``image`` (H, W, 3), ``alpha`` (H, W), ``depth`` (H, W, median
    depth, inf where empty) and optionally per-pixel KNN sets ``knn``
    (H, W, samples, K; -1 for missed rays).
    """
    ctx = model.pose_context(pose)
    full = pixels is None
    pix = all_pixels(camera) if full else np.asarray(pixels).reshape(-1, 2)
    rays = generate_rays(camera, pix)
    rays.near, rays.far, rays.hit = compute_bounds(rays.origins, rays.directions, ctx.posed_vertices, settings.margin)
    bg = np.asarray(settings.background, dtype=np.float64)
    color = np.tile(bg, (len(pix), 1))
    alpha = np.zeros(len(pix))
    depth = np.full(len(pix), np.inf)
    knn = None
    if return_knn:
        knn = np.full((len(pix), settings.samples_per_ray, model.config.knn_k), -1, dtype=np.int64)
    u_all = None
    if settings.stochastic:
        # indexed by pixel id so results do not depend on batching
        rng = np.random.default_rng(settings.seed)
        u_all = rng.random((camera.width * camera.height, settings.samples_per_ray))
    hit_ids = np.nonzero(rays.hit)[0]
    with torch.no_grad():
        for start in range(0, len(hit_ids), settings.batch_size):
            ids = hit_ids[start : start + settings.batch_size]
            sub = rays.subset(ids)
            u = None if u_all is None else u_all[sub.pixels[:, 1] * camera.width + sub.pixels[:, 0]]
            try:
                res = render_rays(model, ctx, sub, settings, u=u, return_knn=return_knn)
            except ArithmeticError as exc:
                raise RenderError(f"{exc} (pixels {sub.pixels[:4].tolist()}...)", sub.pixels) from exc
            color[ids] = res["color"].double().numpy()
            alpha[ids] = res["alpha"].double().numpy()
            depth[ids] = median_depth(res["t"], res["weights"])
            if return_knn:
                knn[ids] = res["knn"]
    out = {"color": color, "alpha": alpha, "depth": depth}
    if full:
        H, W = camera.height, camera.width
        out = {"image": color.reshape(H, W, 3), "alpha": alpha.reshape(H, W), "depth": depth.reshape(H, W)}
        if return_knn:
            out["knn"] = knn.reshape(H, W, settings.samples_per_ray, -1)
    elif return_knn:
        out["knn"] = knn
    return out
