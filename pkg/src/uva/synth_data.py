"""Synthetic multi-view, multi-pose dataset built with an analytic rasterizer.

The oracle here deliberately shares no ray or compositing code with
``uva.renderer``; it back-projects pixels and intersects triangles on its own.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .body_model import (
    AnchorMesh,
    BodySpec,
    Pose,
    Skeleton,
    build_default_body,
    forward_kinematics,
    load_body,
    pose_mesh,
    save_obj,
    save_skeleton_json,
)
from .camera import Camera, look_at
from .images import load_png, save_png

DATASET_VERSION = 1


# ---------------------------------------------------------------------------
# oracle rasterizer


def _pixel_rays(camera: Camera):
    yy, xx = np.mgrid[0 : camera.height, 0 : camera.width]
    xs = (xx.ravel() + 0.5 - camera.cx) / camera.fx
    ys = (yy.ravel() + 0.5 - camera.cy) / camera.fy
    # camera-space directions with unit z so the hit distance is the z-depth
    d_cam = np.stack([xs, ys, np.ones_like(xs)], 1)
    return d_cam, d_cam @ camera.R, camera.center


def bilinear_lookup(texture: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Sample ``texture`` (H, W, C) at UVs with v pointing up the image."""
    H, W = texture.shape[:2]
    x = np.clip(uv[:, 0] * W - 0.5, 0, W - 1)
    y = np.clip((1.0 - uv[:, 1]) * H - 0.5, 0, H - 1)
    x0 = np.floor(x).astype(int)
    y0 = np.floor(y).astype(int)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    top = texture[y0, x0] * (1 - fx) + texture[y0, x1] * fx
    bot = texture[y1, x0] * (1 - fx) + texture[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def oracle_render(vertices, faces, uvs, texture, camera: Camera, chunk_rows: int = 8):
    """Nearest-hit ray/triangle rasterization with bilinear albedo lookup.

    Returns (image (H, W, 3), alpha (H, W), depth (H, W) camera z, inf where empty).
    """
    H, W = camera.height, camera.width
    image = np.zeros((H * W, 3))
    alpha = np.zeros(H * W)
    depth = np.full(H * W, np.inf)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if len(faces) == 0:
        return image.reshape(H, W, 3), alpha.reshape(H, W), depth.reshape(H, W)
    vertices = np.asarray(vertices, dtype=np.float64)
    d_cam, dirs, origin = _pixel_rays(camera)
    tri = vertices[faces]
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    # conservative per-face pixel-row range to cull work (faces behind the camera are kept)
    cam_pts = tri.reshape(-1, 3) @ camera.R.T + camera.t
    z = cam_pts[:, 2].reshape(-1, 3)
    with np.errstate(divide="ignore", invalid="ignore"):
        py = (camera.fy * cam_pts[:, 1] / cam_pts[:, 2] + camera.cy).reshape(-1, 3)
    in_front = np.all(z > 1e-9, axis=1)
    row_lo = np.where(in_front, np.floor(py.min(1)) - 1, -np.inf)
    row_hi = np.where(in_front, np.ceil(py.max(1)) + 1, np.inf)

    for r0 in range(0, H, chunk_rows):
        r1 = min(H, r0 + chunk_rows)
        cand = np.nonzero((row_hi >= r0) & (row_lo <= r1))[0]
        if len(cand) == 0:
            continue
        sl = slice(r0 * W, r1 * W)
        d = dirs[sl][:, None, :]
        a, b, c = tri[cand, 0][None], e1[cand][None], e2[cand][None]
        pvec = np.cross(d, c)
        det = (b * pvec).sum(-1)
        ok = np.abs(det) > 1e-14
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        tvec = origin - a
        u = (tvec * pvec).sum(-1) * inv
        qvec = np.cross(tvec, b)
        v = (d * qvec).sum(-1) * inv
        t = (c * qvec).sum(-1) * inv
        valid = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 1e-9)
        t = np.where(valid, t, np.inf)
        best = np.argmin(t, axis=1)
        rows = np.arange(len(best))
        t_best = t[rows, best]
        hit = np.isfinite(t_best)
        if not hit.any():
            continue
        f = cand[best[hit]]
        bu, bv = u[rows, best][hit], v[rows, best][hit]
        bary = np.stack([1 - bu - bv, bu, bv], 1)
        uv = np.einsum("nk,nkd->nd", bary, np.asarray(uvs)[faces[f]])
        idx = np.arange(r0 * W, r1 * W)[hit]
        image[idx] = bilinear_lookup(texture, uv)
        alpha[idx] = 1.0
        depth[idx] = t_best[hit]
    return image.reshape(H, W, 3), alpha.reshape(H, W), depth.reshape(H, W)


# ---------------------------------------------------------------------------
# scene defaults


def default_texture(mesh: AnchorMesh | None = None, size: int = 256, seed: int = 0) -> np.ndarray:
    """Per-chart base colours modulated by a low-frequency pattern."""
    rng = np.random.default_rng(seed)
    n_charts = 9
    cols = 3
    base = rng.uniform(0.25, 0.95, (n_charts, 3))
    yy, xx = np.mgrid[0:size, 0:size]
    u = (xx + 0.5) / size
    v = 1.0 - (yy + 0.5) / size
    cu = np.minimum((u * cols).astype(int), cols - 1)
    cv = np.minimum((v * cols).astype(int), cols - 1)
    chart = cv * cols + cu
    lu = u * cols - cu
    lv = v * cols - cv
    freq = rng.integers(1, 4, (n_charts, 2))
    pattern = 0.5 + 0.5 * np.sin(2 * np.pi * freq[chart, 0] * lu) * np.cos(np.pi * freq[chart, 1] * lv)
    band = (np.floor(lu * 4) % 2)[..., None]
    tex = base[chart] * (0.55 + 0.45 * pattern[..., None])
    tex = tex * (0.85 + 0.15 * band)
    return np.clip(tex, 0.0, 1.0)


def default_cameras(resolution: int = 128, distance: float = 3.5, n_train: int = 4, held_out: int = 1,
                    center=(0.0, 0.93, 0.0), fov_y_deg: float = 33.0) -> list[Camera]:
    """``n_train`` equally spaced azimuths followed by ``held_out`` cameras between them."""
    center = np.asarray(center)
    azimuths = [2 * np.pi * i / n_train for i in range(n_train)]
    azimuths += [2 * np.pi * (i + 0.5) / n_train for i in range(held_out)]
    cams = []
    for az in azimuths:
        eye = center + distance * np.array([np.sin(az), 0.12, np.cos(az)])
        cams.append(look_at(eye, center, width=resolution, height=resolution, fov_y_deg=fov_y_deg))
    return cams


def default_poses(n: int = 25, bone_count: int = 8, seed: int = 0, max_angle_deg: float = 45.0) -> list[Pose]:
    """Smooth sinusoidal joint trajectories bounded by ``max_angle_deg``."""
    rng = np.random.default_rng(seed)
    max_angle = np.radians(max_angle_deg)
    axes = rng.normal(size=(bone_count, 3))
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    axes[0] = (0.0, 1.0, 0.0)  # root turns about the vertical only
    amp = rng.uniform(0.4, 1.0, bone_count) * max_angle
    amp[0] = 0.5 * max_angle
    freq = rng.integers(1, 3, bone_count)
    phase = rng.uniform(0, 2 * np.pi, bone_count)
    poses = []
    for i in range(n):
        s = i / n
        ang = amp * np.sin(2 * np.pi * freq * s + phase)
        poses.append(Pose(axes * ang[:, None], np.zeros(3)))
    return poses


def brightness_weights(bone_count: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed + 7919).normal(size=3 * bone_count)


def pose_brightness(pose: Pose, w: np.ndarray) -> float:
    """Global brightness factor 0.8 + 0.4 sigmoid(theta . w) of the shaded variant."""
    return float(0.8 + 0.4 / (1.0 + np.exp(-pose.flat() @ w)))


@dataclass
class SceneSpec:
    body: BodySpec = field(default_factory=BodySpec)
    resolution: int = 128
    n_poses: int = 25
    n_train_cameras: int = 4
    n_heldout_cameras: int = 1
    holdout_every: int = 5
    texture_size: int = 256
    seed: int = 0
    shaded: bool = False
    camera_distance: float = 3.5

    def __post_init__(self):
        if self.texture_size < 64:
            raise ValueError("texture resolution must be at least 64x64")
        if self.n_poses < 1 or self.n_train_cameras + self.n_heldout_cameras < 1:
            raise ValueError("need at least one camera and one pose")


@dataclass
class Frame:
    frame_id: str
    image: np.ndarray
    alpha: np.ndarray
    camera: Camera
    pose: Pose


@dataclass
class Dataset:
    root: Path
    manifest: dict
    skeleton: Skeleton
    mesh: AnchorMesh

    @classmethod
    def load(cls, root) -> "Dataset":
        root = Path(root)
        manifest = json.loads((root / "manifest.json").read_text())
        if manifest.get("version") != DATASET_VERSION:
            raise ValueError(f"{root}: unsupported dataset version {manifest.get('version')}")
        skeleton, mesh = load_body(root / "body.obj", root / "skeleton.json")
        return cls(root, manifest, skeleton, mesh)

    def split(self, name: str) -> list[str]:
        return list(self.manifest[name])

    def frame(self, frame_id: str) -> Frame:
        d = self.root / "frames" / frame_id
        if not d.is_dir():
            raise FileNotFoundError(f"frame {frame_id} missing under {self.root}")
        alpha = load_png(d / "alpha.png")
        return Frame(
            frame_id,
            load_png(d / "image.png"),
            alpha if alpha.ndim == 2 else alpha.mean(-1),
            Camera.load(d / "camera.json"),
            Pose.from_dict(json.loads((d / "pose.json").read_text())),
        )

    def frames(self, name: str) -> list[Frame]:
        return [self.frame(f) for f in self.split(name)]


def frame_name(pose_idx: int, cam_idx: int) -> str:
    return f"p{pose_idx:03d}_c{cam_idx:02d}"


def generate_dataset(spec: SceneSpec, out, texture: np.ndarray | None = None,
                     poses: list[Pose] | None = None, cameras: list[Camera] | None = None) -> Dataset:
    """Render every (camera, pose) pair and write the dataset directory."""
    out = Path(out)
    skeleton, mesh = build_default_body(spec.body)
    texture = default_texture(mesh, spec.texture_size, spec.seed) if texture is None else texture
    poses = poses or default_poses(spec.n_poses, skeleton.bone_count, spec.seed)
    cameras = cameras or default_cameras(
        spec.resolution, spec.camera_distance, spec.n_train_cameras, spec.n_heldout_cameras
    )
    n_train_cams = min(spec.n_train_cameras, len(cameras))
    bright_w = brightness_weights(skeleton.bone_count, spec.seed)
    try:
        (out / "frames").mkdir(parents=True, exist_ok=True)
        save_obj(out / "body.obj", mesh.vertices, mesh.faces, mesh.uvs)
        save_skeleton_json(out / "skeleton.json", skeleton, mesh)
        save_png(out / "texture.png", texture)
        split = {"train": [], "test_novel_view": [], "test_novel_pose": []}
        for p, pose in enumerate(poses):
            posed = pose_mesh(mesh, forward_kinematics(skeleton, pose))
            held_pose = spec.holdout_every > 0 and p % spec.holdout_every == spec.holdout_every - 1
            gain = pose_brightness(pose, bright_w) if spec.shaded else 1.0
            for c, cam in enumerate(cameras):
                fid = frame_name(p, c)
                image, alpha, _ = oracle_render(posed, mesh.faces, mesh.uvs, texture, cam)
                d = out / "frames" / fid
                d.mkdir(exist_ok=True)
                save_png(d / "image.png", np.clip(image * gain, 0, 1))
                save_png(d / "alpha.png", alpha)
                cam.save(d / "camera.json")
                (d / "pose.json").write_text(json.dumps(pose.to_dict(), sort_keys=True))
                if c >= n_train_cams:
                    split["test_novel_view"].append(fid)
                elif held_pose:
                    split["test_novel_pose"].append(fid)
                else:
                    split["train"].append(fid)
        manifest = {
            "version": DATASET_VERSION,
            "seed": spec.seed,
            "resolution": spec.resolution,
            "shaded": spec.shaded,
            "brightness_weights": bright_w.tolist() if spec.shaded else None,
            **split,
        }
        tmp = out / "manifest.json.tmp"
        tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True))
        os.replace(tmp, out / "manifest.json")
    except OSError as exc:
        raise OSError(f"writing dataset under {out}: {exc}") from exc
    return Dataset.load(out)
