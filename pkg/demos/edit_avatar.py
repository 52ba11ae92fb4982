"""Three edits on a fitted avatar: stretch an arm, paint the chest, borrow a second avatar's look.

    python3 demos/edit_avatar.py --checkpoint runs/demo/avatar.ckpt --source other/avatar.ckpt

Geometry edits move the anchor vertices and leave every learned weight alone. Painting
fine-tunes only the appearance codes of the nodes under a mask. Swapping copies codes
(and the colour decoder) from a source avatar onto a node selection.
"""

import argparse
from pathlib import Path

import numpy as np
import torch

from uva.body_model import Pose, capsule_bone_of_vertex
from uva.config import RenderSettings
from uva.editor import (
    GeometryEdit,
    NodeSelection,
    PaintJob,
    apply_geometry_edit,
    paint_texture,
    scale_about_axis,
    swap_texture,
)
from uva.images import save_png
from uva.renderer import render_image
from uva.synth_data import default_cameras
from uva.trainer import load_checkpoint, save_checkpoint

LEFT_ARM = 4


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--checkpoint", default="runs/demo/avatar.ckpt")
    ap.add_argument("--source", default=None, help="second avatar for the texture swap (skipped if absent)")
    ap.add_argument("--out", default="runs/demo/edits")
    ap.add_argument("--resolution", type=int, default=64)
    args = ap.parse_args()
    torch.set_num_threads(1)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    model, _ = load_checkpoint(args.checkpoint)
    rest = Pose.rest(model.skeleton.bone_count)
    cam = default_cameras(args.resolution)[0]
    settings = RenderSettings(samples_per_ray=48)

    def snap(name, m, pose=rest):
        save_png(out / f"{name}.png", render_image(m, cam, pose, settings)["image"])

    snap("original", model)

    # thicker left arm: scale its vertices radially about the bone axis
    mesh = model.mesh
    arm = np.nonzero(capsule_bone_of_vertex(mesh) == LEFT_ARM)[0]
    stretched = scale_about_axis(mesh.vertices, arm, np.array([0.22, 1.40, 0.0]), np.array([1.0, 0.0, 0.0]), 1.3)
    thick = apply_geometry_edit(model, GeometryEdit(stretched))
    snap("arm_thick", thick)
    # the edit follows the body into new poses because skinning is applied to the edited anchors
    rotations = np.zeros((model.skeleton.bone_count, 3))
    rotations[LEFT_ARM] = [0.0, 0.0, 0.6]
    lifted = Pose(rotations, np.zeros(3))
    snap("arm_thick_posed", thick, lifted)

    # paint a red square on the chest with the colour decoder frozen
    h, w = cam.height, cam.width
    mask = np.zeros((h, w), bool)
    mask[int(0.36 * h) : int(0.46 * h), int(0.45 * w) : int(0.55 * w)] = True
    job = PaintJob(cam, rest, np.tile([1.0, 0.0, 0.0], (h, w, 1)), mask, iterations=400, samples_per_ray=48)
    painted, sel = paint_texture(model, job)
    print(f"painted {len(sel)} nodes")
    snap("painted", painted)
    save_checkpoint(painted, out / "painted.ckpt")

    # lower body takes the source avatar's appearance
    if args.source:
        source, _ = load_checkpoint(args.source)
        legs = NodeSelection(np.nonzero(mesh.vertices[:, 1] < 0.9)[0])
        swapped = swap_texture(model, source, legs)
        snap("swapped_legs", swapped)
        save_checkpoint(swapped, out / "swapped.ckpt")
    print(f"renders in {out}")


if __name__ == "__main__":
    main()
