"""Joint optimization of all fields and code tables, plus checkpoint I/O."""

from __future__ import annotations

import csv
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.ndimage import binary_dilation

from .avatar import Avatar, SwapState
from .body_model import AnchorMesh, Skeleton
from .camera import Camera
from .canonical_field import ColorNet, ShadingNet, encoded_dim
from .config import AblationFlags, ModelConfig, RenderSettings, TrainConfig, from_dict, to_dict
from .metrics import psnr
from .renderer import compute_bounds, generate_rays, render_image, render_rays


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


def photometric_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared error over rays and channels."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return torch.mean((pred - target) ** 2)


def learning_rate(iteration: int, config: TrainConfig) -> float:
    """Exponential interpolation from ``lr_start`` to ``lr_end`` over the run."""
    frac = iteration / max(config.total_iterations, 1)
    return config.lr_start * (config.lr_end / config.lr_start) ** frac


@dataclass
class TrainFrame:
    image: np.ndarray  # (H, W, 3)
    alpha: np.ndarray  # (H, W)
    camera: Camera
    pose: object
    foreground: np.ndarray = None  # (m, 2) pixel coords inside the dilated mask

    def prepare(self, dilation: int) -> "TrainFrame":
        mask = self.alpha > 0.5
        if dilation > 0 and mask.any():
            mask = binary_dilation(mask, iterations=dilation)
        ys, xs = np.nonzero(mask)
        self.foreground = np.stack([xs, ys], 1)
        return self


@dataclass
class TrainBatch:
    frame: int
    pixels: np.ndarray
    target: np.ndarray  # ground truth over a black background
    alpha: np.ndarray | None = None  # ground-truth coverage; needed for background randomization


@dataclass
class TrainState:
    model: Avatar
    config: TrainConfig
    optimizer: torch.optim.Optimizer
    iteration: int = 0
    rng: np.random.Generator = None
    history: list = field(default_factory=list)

    @classmethod
    def create(cls, model: Avatar, config: TrainConfig) -> "TrainState":
        groups = [
            {"params": model.network_parameters(), "lr": config.lr_start, "scale": 1.0},
            {"params": model.code_parameters(), "lr": config.lr_start * config.code_lr_multiplier,
             "scale": config.code_lr_multiplier},
        ]
        opt = torch.optim.Adam(groups, betas=(0.9, 0.999), eps=1e-8)
        return cls(model, config, opt, 0, np.random.default_rng(config.seed))

    def set_learning_rate(self) -> float:
        lr = learning_rate(self.iteration, self.config)
        for g in self.optimizer.param_groups:
            g["lr"] = lr * g["scale"]
        return lr


def sample_batch(frames: list[TrainFrame], config: TrainConfig, rng: np.random.Generator) -> TrainBatch:
    """Pick one training frame, then draw foreground-weighted pixels from it."""
    fi = int(rng.integers(len(frames)))
    fr = frames[fi]
    H, W = fr.alpha.shape
    n = config.batch_rays
    n_fg = int(round(config.foreground_fraction * n)) if len(fr.foreground) else 0
    fg = fr.foreground[rng.integers(len(fr.foreground), size=n_fg)] if n_fg else np.zeros((0, 2), int)
    anywhere = np.stack([rng.integers(W, size=n - n_fg), rng.integers(H, size=n - n_fg)], 1)
    pix = np.concatenate([fg, anywhere]).astype(np.int64)
    return TrainBatch(fi, pix, fr.image[pix[:, 1], pix[:, 0]], fr.alpha[pix[:, 1], pix[:, 0]])


def predict_pixels(model: Avatar, camera: Camera, pose, pixels: np.ndarray, settings: RenderSettings,
                   rng: np.random.Generator | None = None, return_alpha: bool = False):
    """Differentiable render of a pixel set; rays missing the bounds return the background.

    With ``return_alpha`` the accumulated opacity is returned as well.
    """
    ctx = model.pose_context(pose)
    rays = generate_rays(camera, pixels)
    rays.near, rays.far, rays.hit = compute_bounds(rays.origins, rays.directions, ctx.posed_vertices, settings.margin)
    out = torch.as_tensor(settings.background, dtype=model.dtype).expand(len(pixels), 3).clone()
    acc = torch.zeros(len(pixels), dtype=model.dtype)
    hit = np.nonzero(rays.hit)[0]
    if len(hit):
        res = render_rays(model, ctx, rays.subset(hit), settings, rng=rng)
        out[torch.as_tensor(hit)] = res["color"]
        acc[torch.as_tensor(hit)] = res["alpha"]
    return (out, acc) if return_alpha else out


def train_step(state: TrainState, batch: TrainBatch, frames: list[TrainFrame]) -> float:
    """One Adam step on a ray batch. Returns the loss value."""
    model, cfg = state.model, state.config
    fr = frames[batch.frame]
    settings = RenderSettings(samples_per_ray=cfg.samples_per_ray, stochastic=cfg.stochastic, seed=cfg.seed)
    state.set_learning_rate()
    try:
        pred, acc = predict_pixels(model, fr.camera, fr.pose, batch.pixels, settings, rng=state.rng, return_alpha=True)
    except ArithmeticError as exc:
        raise TrainingError(f"iteration {state.iteration}: {exc}") from exc
    target = torch.as_tensor(batch.target, dtype=pred.dtype)
    if cfg.random_background and batch.alpha is not None:
        # a black background cannot tell empty space from black fog; a random one can
        bg = torch.as_tensor(state.rng.random((len(batch.pixels), 3)), dtype=pred.dtype)
        pred = pred + (1 - acc)[:, None] * bg
        target = target + (1 - torch.as_tensor(batch.alpha, dtype=pred.dtype))[:, None] * bg
    loss = photometric_loss(pred, target)
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite loss at iteration {state.iteration}")
    state.optimizer.zero_grad(set_to_none=False)
    loss.backward()
    state.optimizer.step()
    state.iteration += 1
    model.trained_iterations += 1
    return float(loss.detach())


def frames_from_dataset(dataset, split: str, dilation: int) -> list[TrainFrame]:
    return [TrainFrame(f.image, f.alpha, f.camera, f.pose).prepare(dilation) for f in dataset.frames(split)]


def evaluate_psnr(model: Avatar, frames: list[TrainFrame], samples_per_ray: int = 64) -> float:
    settings = RenderSettings(samples_per_ray=samples_per_ray)
    scores = [psnr(render_image(model, f.camera, f.pose, settings)["image"], f.image) for f in frames]
    return float(np.mean(scores))


def fit(dataset, config: TrainConfig = TrainConfig(), model_config: ModelConfig = ModelConfig(),
        log_path=None, eval_frames: list[TrainFrame] | None = None, model: Avatar | None = None,
        frames: list[TrainFrame] | None = None, callback=None) -> TrainState:
    """Train an avatar from scratch on the dataset's ``train`` split.

    Args:
        dataset: a ``synth_data.Dataset`` (only read when ``frames`` is None).
        config: optimization settings and ablation flags.
        model_config: network sizes.
        log_path: optional CSV path receiving (iteration, loss, lr, eval_psnr).
        eval_frames: frames rendered every ``eval_every`` iterations; defaults
            to the first training frame.

    Returns:
        The final training state.
    """
    if frames is None:
        frames = frames_from_dataset(dataset, "train", config.mask_dilation)
        skeleton, mesh = dataset.skeleton, dataset.mesh
    if not frames:
        raise ValueError("dataset has no training frames")
    if model is None:
        model = Avatar(skeleton, mesh, model_config, config.flags, seed=config.seed)
    state = TrainState.create(model, config)
    eval_frames = frames[:1] if eval_frames is None else eval_frames
    writer = None
    fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["iteration", "loss", "lr", "eval_psnr"])
    try:
        while state.iteration < config.total_iterations:
            lr = learning_rate(state.iteration, config)
            batch = sample_batch(frames, config, state.rng)
            loss = train_step(state, batch, frames)
            ev = ""
            if config.eval_every > 0 and (state.iteration % config.eval_every == 0 or state.iteration == config.total_iterations):
                ev = evaluate_psnr(model, eval_frames, config.samples_per_ray)
            state.history.append((state.iteration, loss, lr, ev))
            if writer is not None:
                writer.writerow([state.iteration, f"{loss:.8g}", f"{lr:.8g}", ev if ev == "" else f"{ev:.4f}"])
            if callback is not None:
                callback(state)
    finally:
        if fh is not None:
            fh.close()
    return state


# ---------------------------------------------------------------------------
# checkpoints
#
# layout: MAGIC | u32 version | u64 manifest length | manifest JSON |
#         repeated (u16 name length | name | u64 byte length | raw little-endian data)

CKPT_MAGIC = b"UVACKPT\x00"
CKPT_VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8"}


def _blocks_of(model: Avatar) -> dict[str, np.ndarray]:
    blocks = {f"param/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    m = model.mesh
    blocks.update({
        "mesh/vertices": m.vertices, "mesh/faces": m.faces.astype(np.int64), "mesh/uvs": m.uvs,
        "mesh/lbs_weights": m.lbs_weights, "skeleton/parents": model.skeleton.parents.astype(np.int64),
        "skeleton/joints": model.skeleton.joints,
    })
    return blocks


def save_checkpoint(model: Avatar, path, train_config: TrainConfig | None = None) -> None:
    """Write the model, anchor mesh, skeleton and configs to one archive file."""
    if isinstance(model, TrainState):
        model, train_config = model.model, model.config
    blocks = _blocks_of(model)
    entries, payload = [], []
    for name, arr in blocks.items():
        dt = np.dtype(arr.dtype).name
        if dt not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {dt} for {name}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dt]).tobytes()
        entries.append({"name": name, "dtype": dt, "shape": list(arr.shape)})
        nb = name.encode()
        payload.append(struct.pack("<H", len(nb)) + nb + struct.pack("<Q", len(raw)) + raw)
    body = b"".join(payload)
    manifest = {
        "format_version": CKPT_VERSION,
        "model_config": to_dict(model.config),
        "flags": to_dict(model.flags),
        "train_config": None if train_config is None else to_dict(train_config),
        "iteration": int(model.trained_iterations),
        "seed": int(getattr(model, "seed", 0)),
        "dtype": str(model.dtype).replace("torch.", ""),
        "bone_names": list(model.skeleton.names),
        "topology_hash": model.mesh.topology_hash(),
        "swap_config": None if model.swap is None else to_dict(model.swap_config),
        "blocks": entries,
        "payload_sha256": hashlib.sha256(body).hexdigest(),
    }
    mblob = json.dumps(manifest, sort_keys=True).encode()
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<I", CKPT_VERSION) + struct.pack("<Q", len(mblob)))
        fh.write(mblob)
        fh.write(body)
    tmp.replace(path)


def read_manifest(path) -> tuple[dict, bytes]:
    data = Path(path).read_bytes()
    if len(data) < 20 or data[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack("<I", data[8:12])
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: format version {version} unsupported (expected {CKPT_VERSION})")
    (n,) = struct.unpack("<Q", data[12:20])
    if len(data) < 20 + n:
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(data[20 : 20 + n])
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt manifest") from exc
    if manifest.get("format_version") != version:
        raise CheckpointError(f"{path}: manifest version disagrees with header")
    return manifest, data[20 + n :]


def _parse_blocks(path, manifest, body) -> dict[str, np.ndarray]:
    if hashlib.sha256(body).hexdigest() != manifest["payload_sha256"]:
        raise CheckpointError(f"{path}: payload truncated or corrupt")
    out, pos = {}, 0
    for e in manifest["blocks"]:
        (ln,) = struct.unpack_from("<H", body, pos)
        name = body[pos + 2 : pos + 2 + ln].decode()
        pos += 2 + ln
        (nb,) = struct.unpack_from("<Q", body, pos)
        pos += 8
        if name != e["name"]:
            raise CheckpointError(f"{path}: block order mismatch at {name}")
        arr = np.frombuffer(body[pos : pos + nb], dtype=_DTYPES[e["dtype"]]).reshape(e["shape"])
        out[name] = arr.astype(e["dtype"])
        pos += nb
    return out


def load_checkpoint(path) -> tuple[Avatar, dict]:
    """Rebuild the avatar from a checkpoint. Returns (model, manifest)."""
    manifest, body = read_manifest(path)
    blocks = _parse_blocks(path, manifest, body)
    skeleton = Skeleton(blocks["skeleton/parents"], blocks["skeleton/joints"], tuple(manifest["bone_names"]))
    mesh = AnchorMesh(blocks["mesh/vertices"], blocks["mesh/faces"], blocks["mesh/uvs"], blocks["mesh/lbs_weights"])
    config = from_dict(ModelConfig, manifest["model_config"])
    flags = from_dict(AblationFlags, manifest["flags"])
    dtype = getattr(torch, manifest["dtype"])
    model = Avatar(skeleton, mesh, config, flags, seed=manifest["seed"], dtype=dtype)
    if manifest.get("swap_config") is not None:
        src_cfg = from_dict(ModelConfig, manifest["swap_config"])
        model.attach_swap(make_swap_state(src_cfg, skeleton.bone_count, mesh.vertex_count, dtype), src_cfg)
    params = {k[len("param/"):]: torch.from_numpy(v.copy()) for k, v in blocks.items() if k.startswith("param/")}
    try:
        model.load_state_dict(params, strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: parameters do not match the recorded config: {exc}") from exc
    model.trained_iterations = int(manifest["iteration"])
    return model, manifest


def make_swap_state(source_config: ModelConfig, bone_count: int, vertex_count: int, dtype) -> SwapState:
    c = source_config
    color = ColorNet(encoded_dim(3, c.pe_frequencies) + c.code_dim, c.color_width, c.color_depth, c.color_skip,
                     c.feature_dim)
    shading = ShadingNet(c.feature_dim, 3 * bone_count, c.shading_width, c.shading_depth)
    st = SwapState(color, shading, torch.zeros(vertex_count, c.code_dim), torch.zeros(vertex_count))
    return st.to(dtype)
