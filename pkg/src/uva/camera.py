"""Pinhole camera record with JSON round trip."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class Camera:
    """OpenCV convention: x right, y down, z forward; ``R, t`` map world to camera."""

    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-6 or np.linalg.det(R) < 0:
            raise ValueError("camera rotation must be orthonormal with det +1")

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Continuous pixel coordinates (x, y) and camera-space depth for world points."""
        pc = np.asarray(points, dtype=np.float64).reshape(-1, 3) @ self.R.T + self.t
        z = pc[:, 2]
        px = np.stack([self.fx * pc[:, 0] / z + self.cx, self.fy * pc[:, 1] / z + self.cy], axis=1)
        return px, z

    def transformed(self, rotation: np.ndarray, translation: np.ndarray) -> "Camera":
        """Camera following a world-space rigid motion x -> rotation @ x + translation."""
        R = self.R @ rotation.T
        t = self.t - R @ translation
        return Camera(self.fx, self.fy, self.cx, self.cy, R, t, self.width, self.height)

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "R": self.R.reshape(-1).tolist(),
            "t": self.t.tolist(),
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
            np.asarray(d["R"], dtype=np.float64).reshape(3, 3), np.asarray(d["t"], dtype=np.float64),
            int(d["width"]), int(d["height"]),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "Camera":
        return cls.from_dict(json.loads(Path(path).read_text()))


def look_at(eye, target, up=(0.0, 1.0, 0.0), width=128, height=128, fov_y_deg=None, focal=None) -> Camera:
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    forward = target - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    if focal is None:
        focal = 0.5 * height / np.tan(np.radians(fov_y_deg or 40.0) / 2)
    return Camera(focal, focal, width / 2, height / 2, R, -R @ eye, width, height)
