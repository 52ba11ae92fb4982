"""Minimal articulated body: skeleton, capsule anchor mesh, analytic skinning
weights, UV atlas and forward kinematics.

The default body is a chain of disjoint closed capsules, one per bone, so the
mesh is watertight per component and ray-parity inside tests stay valid.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial.transform import Rotation

ROOT = -1
JOINT_BAND = 0.15  # fraction of segment length blended with the parent bone


@dataclass(frozen=True)
class Skeleton:
    parents: np.ndarray
    joints: np.ndarray
    names: tuple = ()

    def __post_init__(self):
        parents = np.asarray(self.parents, dtype=np.int64)
        joints = np.asarray(self.joints, dtype=np.float64)
        object.__setattr__(self, "parents", parents)
        object.__setattr__(self, "joints", joints)
        if not self.names:
            object.__setattr__(self, "names", tuple(f"bone{i}" for i in range(len(parents))))
        n = len(parents)
        if n < 1:
            raise ValueError("skeleton needs at least one bone")
        if joints.shape != (n, 3) or not np.all(np.isfinite(joints)):
            raise ValueError(f"joints must be a finite ({n}, 3) array, got {joints.shape}")
        if np.count_nonzero(parents == ROOT) != 1:
            raise ValueError("skeleton must have exactly one root")
        if np.any((parents < ROOT) | (parents >= n)):
            raise ValueError("parent index out of range")
        self.topological_order()  # raises on cycles

    @property
    def bone_count(self) -> int:
        return len(self.parents)

    def topological_order(self) -> list[int]:
        children = [[] for _ in range(self.bone_count)]
        root = None
        for b, p in enumerate(self.parents):
            if p == ROOT:
                root = b
            else:
                children[p].append(b)
        order, stack = [], [root]
        while stack:
            b = stack.pop()
            order.append(b)
            stack.extend(reversed(children[b]))
        if len(order) != self.bone_count:
            raise ValueError("parent indices do not form a single rooted tree")
        return order


@dataclass(frozen=True)
class Pose:
    """Per-bone axis-angle rotations (radians) plus a root translation."""

    rotations: np.ndarray
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rot = np.asarray(self.rotations, dtype=np.float64).reshape(-1, 3)
        trans = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(rot)) and np.all(np.isfinite(trans))):
            raise ValueError("pose components must be finite")
        object.__setattr__(self, "rotations", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def rest(cls, bone_count: int) -> "Pose":
        return cls(np.zeros((bone_count, 3)), np.zeros(3))

    @property
    def bone_count(self) -> int:
        return len(self.rotations)

    def flat(self) -> np.ndarray:
        """Flattened axis-angle vector (3N,); the conditioning input of the pose networks."""
        return self.rotations.reshape(-1)

    def to_dict(self) -> dict:
        return {"rotations": self.rotations.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Pose":
        return cls(np.asarray(d["rotations"]), np.asarray(d.get("translation", np.zeros(3))))


@dataclass(frozen=True)
class BoneTransforms:
    """N+1 rigid 4x4 transforms; the trailing one is the (identity) background transform."""

    matrices: np.ndarray

    @property
    def rotations(self) -> np.ndarray:
        return self.matrices[:, :3, :3]

    @property
    def translations(self) -> np.ndarray:
        return self.matrices[:, :3, 3]

    def __len__(self) -> int:
        return len(self.matrices)


@dataclass(frozen=True)
class AnchorMesh:
    vertices: np.ndarray
    faces: np.ndarray
    uvs: np.ndarray
    lbs_weights: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "vertices", np.asarray(self.vertices, dtype=np.float64))
        object.__setattr__(self, "faces", np.asarray(self.faces, dtype=np.int64))
        object.__setattr__(self, "uvs", np.asarray(self.uvs, dtype=np.float64))
        object.__setattr__(self, "lbs_weights", np.asarray(self.lbs_weights, dtype=np.float64))

    @property
    def vertex_count(self) -> int:
        return len(self.vertices)

    @property
    def bone_count(self) -> int:
        return self.lbs_weights.shape[1]

    def face_areas(self, vertices: np.ndarray | None = None) -> np.ndarray:
        v = self.vertices if vertices is None else vertices
        tri = v[self.faces]
        return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)

    def validate(self) -> None:
        """Raise ``ValueError`` if any anchor-mesh invariant is violated."""
        V = self.vertex_count
        if self.vertices.shape != (V, 3) or self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise ValueError("vertices must be (V, 3) and faces (F, 3)")
        if self.faces.min() < 0 or self.faces.max() >= V:
            raise ValueError("face index out of range")
        if np.any(self.face_areas() <= 1e-12):
            raise ValueError("degenerate face (area <= 1e-12)")
        if self.uvs.shape != (V, 2) or self.uvs.min() < 0 or self.uvs.max() > 1:
            raise ValueError("uvs must be (V, 2) inside [0, 1]^2")
        w = self.lbs_weights
        if w.shape[0] != V or np.any(w < 0) or np.abs(w.sum(1) - 1).max() > 1e-6:
            raise ValueError("lbs weight rows must be non-negative and sum to 1")
        if V > 1:
            from scipy.spatial import cKDTree

            d, _ = cKDTree(self.vertices).query(self.vertices, k=2)
            if d[:, 1].min() <= 1e-9:
                raise ValueError("duplicate vertex positions")

    def with_vertices(self, vertices: np.ndarray) -> "AnchorMesh":
        vertices = np.asarray(vertices, dtype=np.float64)
        if vertices.shape != self.vertices.shape:
            raise ValueError(
                f"edited vertices have shape {vertices.shape}, expected {self.vertices.shape}"
            )
        return AnchorMesh(vertices, self.faces, self.uvs, self.lbs_weights)

    def topology_hash(self) -> str:
        """Hash of vertex count and face list; stable under vertex moves."""
        h = hashlib.sha256()
        h.update(np.int64(self.vertex_count).tobytes())
        h.update(np.ascontiguousarray(self.faces, dtype="<i8").tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# kinematics


def forward_kinematics(skeleton: Skeleton, pose: Pose) -> BoneTransforms:
    """Bone transforms mapping the rest pose to the posed world frame.

    Returns N+1 transforms; the last is the identity background transform.
    """
    n = skeleton.bone_count
    if pose.bone_count != n:
        raise ValueError(f"pose has {pose.bone_count} joint rotations, skeleton has {n} bones")
    local_rot = Rotation.from_rotvec(pose.rotations).as_matrix()
    joints = skeleton.joints
    world = np.zeros((n, 4, 4))
    for b in skeleton.topological_order():
        local = np.eye(4)
        local[:3, :3] = local_rot[b]
        p = skeleton.parents[b]
        if p == ROOT:
            local[:3, 3] = joints[b] + pose.translation
            world[b] = local
        else:
            local[:3, 3] = joints[b] - joints[p]
            world[b] = world[p] @ local
    out = np.tile(np.eye(4), (n + 1, 1, 1))
    out[:n, :3, :3] = world[:, :3, :3]
    out[:n, :3, 3] = world[:, :3, 3] - np.einsum("bij,bj->bi", world[:, :3, :3], joints)
    return BoneTransforms(out)


def pose_mesh(mesh: AnchorMesh, transforms: BoneTransforms, vertices: np.ndarray | None = None) -> np.ndarray:
    """Forward LBS of the rest vertices (or ``vertices`` if given)."""
    w = mesh.lbs_weights
    if len(transforms) != w.shape[1] + 1:
        raise ValueError(
            f"{w.shape[1]} weight columns but {len(transforms)} transforms (expected N+1)"
        )
    v = mesh.vertices if vertices is None else np.asarray(vertices, dtype=np.float64)
    blended = np.einsum("vb,bij->vij", w, transforms.matrices[:-1])
    return np.einsum("vij,vj->vi", blended[:, :3, :3], v) + blended[:, :3, 3]


# ---------------------------------------------------------------------------
# default capsule body

# (name, parent name, joint, segment start, segment end, radius); y up, facing +z
_SEGMENTS = [
    ("pelvis", None, (0.0, 0.95, 0.0), (-0.10, 0.95, 0.0), (0.10, 0.95, 0.0), 0.09),
    ("torso", "pelvis", (0.0, 1.05, 0.0), (0.0, 1.19, 0.0), (0.0, 1.36, 0.0), 0.13),
    ("neck", "torso", (0.0, 1.495, 0.0), (0.0, 1.535, 0.0), (0.0, 1.555, 0.0), 0.035),
    ("head", "neck", (0.0, 1.595, 0.0), (0.0, 1.70, 0.0), (0.0, 1.72, 0.0), 0.10),
    ("left_arm", "torso", (0.17, 1.40, 0.0), (0.22, 1.40, 0.0), (0.75, 1.40, 0.0), 0.045),
    ("right_arm", "torso", (-0.17, 1.40, 0.0), (-0.22, 1.40, 0.0), (-0.75, 1.40, 0.0), 0.045),
    ("left_leg", "pelvis", (0.10, 0.85, 0.0), (0.10, 0.78, 0.0), (0.10, 0.10, 0.0), 0.06),
    ("right_leg", "pelvis", (-0.10, 0.85, 0.0), (-0.10, 0.78, 0.0), (-0.10, 0.10, 0.0), 0.06),
]

BODY_BONE_NAMES = tuple(s[0] for s in _SEGMENTS)


@dataclass(frozen=True)
class BodySpec:
    bone_count: int = 8
    vertex_budget: int = 600
    scale: float = 1.0


@dataclass(frozen=True)
class Capsule:
    bone: int
    start: np.ndarray
    end: np.ndarray
    radius: float


def _segment_distance(p0, p1, q0, q1) -> float:
    # dense sampling is plenty for the handful of construction checks
    s = np.linspace(0, 1, 201)[:, None]
    a = p0 + s * (p1 - p0)
    b = q0 + s * (q1 - q0)
    return float(np.min(np.linalg.norm(a[:, None] - b[None], axis=-1)))


def _capsule_mesh(cap: Capsule, segments: int, rings: int):
    """Latitude-longitude capsule: two poles plus ``rings`` rings of ``segments`` vertices."""
    axis = cap.end - cap.start
    length = np.linalg.norm(axis)
    a = axis / length
    helper = np.array([0.0, 0.0, 1.0]) if abs(a[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(a, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(a, e1)
    r = cap.radius
    n_cap = max(1, rings // 3)
    n_body = rings - 2 * n_cap
    if n_body < 1:
        raise ValueError("vertex budget too small to triangulate capsule segments")
    # profile: (axial offset from start, ring radius, arc-length coordinate)
    total_arc = np.pi * r + length
    profile = []
    for k in range(1, n_cap + 1):
        alpha = k * (np.pi / 2) / (n_cap + 0.5)
        profile.append((-r * np.cos(alpha), r * np.sin(alpha), r * alpha))
    for k in range(n_body):
        t = (k + 0.5) / n_body
        profile.append((t * length, r, np.pi * r / 2 + t * length))
    for k in range(n_cap, 0, -1):
        alpha = k * (np.pi / 2) / (n_cap + 0.5)
        profile.append((length + r * np.cos(alpha), r * np.sin(alpha), total_arc - r * alpha))
    phi = 2 * np.pi * np.arange(segments) / segments
    # folded angular chart coordinate: continuous around the ring, no seam
    fold = 1.0 - np.abs(1.0 - phi / np.pi)

    verts = [cap.start - r * a]
    prof_uv = [(0.0, 0.5)]
    axial = [-r]
    for off, rad, arc in profile:
        ring = cap.start + off * a + rad * (np.cos(phi)[:, None] * e1 + np.sin(phi)[:, None] * e2)
        verts.extend(ring)
        prof_uv.extend((arc / total_arc, f) for f in fold)
        axial.extend([off] * segments)
    verts.append(cap.end + r * a)
    prof_uv.append((1.0, 0.5))
    axial.append(length + r)

    faces = []
    n_rings = len(profile)
    last = 1 + n_rings * segments
    for j in range(segments):
        j1 = (j + 1) % segments
        faces.append((0, 1 + j1, 1 + j))
        for k in range(n_rings - 1):
            a0 = 1 + k * segments + j
            a1 = 1 + k * segments + j1
            b0 = a0 + segments
            b1 = a1 + segments
            faces.append((a0, a1, b1))
            faces.append((a0, b1, b0))
        base = 1 + (n_rings - 1) * segments
        faces.append((last, base + j, base + j1))
    return np.array(verts), np.array(faces), np.array(prof_uv), np.array(axial) / length


def build_default_body(spec: BodySpec | None = None) -> tuple[Skeleton, AnchorMesh]:
    """Capsule humanoid with analytic skinning weights and a per-bone UV atlas."""
    spec = spec or BodySpec()
    n = spec.bone_count
    if not 1 <= n <= len(_SEGMENTS):
        raise ValueError(f"bone_count must be in [1, {len(_SEGMENTS)}], got {n}")
    segs = _SEGMENTS[:n]
    index = {s[0]: i for i, s in enumerate(segs)}
    parents = [ROOT if s[1] is None else index[s[1]] for s in segs]
    joints = np.array([s[2] for s in segs]) * spec.scale
    skeleton = Skeleton(np.array(parents), joints, tuple(s[0] for s in segs))
    capsules = [
        Capsule(i, np.array(s[3]) * spec.scale, np.array(s[4]) * spec.scale, s[5] * spec.scale)
        for i, s in enumerate(segs)
    ]
    for i in range(n):
        for j in range(i + 1, n):
            ci, cj = capsules[i], capsules[j]
            if _segment_distance(ci.start, ci.end, cj.start, cj.end) <= ci.radius + cj.radius:
                raise ValueError(f"capsules {segs[i][0]} and {segs[j][0]} overlap")

    per = spec.vertex_budget // n
    segments = max(6, int(np.sqrt(per)))
    rings = (per - 2) // segments
    if rings < 3:
        raise ValueError(
            f"vertex budget {spec.vertex_budget} too small for {n} capsules "
            f"(need at least {n * (2 + 3 * 6)})"
        )

    cols = int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / cols))
    pad = 0.02
    all_v, all_f, all_uv, all_w = [], [], [], []
    offset = 0
    for cap in capsules:
        v, f, prof_uv, s = _capsule_mesh(cap, segments, rings)
        c, r = cap.bone % cols, cap.bone // cols
        u0, v0 = c / cols, r / rows
        du, dv = 1.0 / cols, 1.0 / rows
        uv = np.stack(
            [u0 + du * (pad + (1 - 2 * pad) * prof_uv[:, 0]), v0 + dv * (pad + (1 - 2 * pad) * prof_uv[:, 1])],
            axis=1,
        )
        w = np.zeros((len(v), n))
        parent = parents[cap.bone]
        if parent == ROOT:
            w[:, cap.bone] = 1.0
        else:
            s_clip = np.clip(s, 0.0, 1.0)
            w_parent = 0.5 * np.clip(1.0 - s_clip / JOINT_BAND, 0.0, 1.0)
            w[:, parent] = w_parent
            w[:, cap.bone] = 1.0 - w_parent
        all_v.append(v)
        all_f.append(f + offset)
        all_uv.append(uv)
        all_w.append(w)
        offset += len(v)
    mesh = AnchorMesh(np.concatenate(all_v), np.concatenate(all_f), np.concatenate(all_uv), np.concatenate(all_w))
    mesh.validate()
    return skeleton, mesh


def capsule_bone_of_vertex(mesh: AnchorMesh) -> np.ndarray:
    """Capsule (hence UV chart and owning bone) of each vertex of a default body.

    Capsules are disjoint connected components emitted in bone order, so
    components are numbered by their first vertex.
    """
    V = mesh.vertex_count
    f = mesh.faces
    rows = np.concatenate([f[:, 0], f[:, 1], f[:, 2]])
    cols = np.concatenate([f[:, 1], f[:, 2], f[:, 0]])
    graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(V, V))
    _, labels = connected_components(graph, directed=False)
    _, first = np.unique(labels, return_index=True)
    order = np.argsort(np.argsort(first))
    return order[labels]


# ---------------------------------------------------------------------------
# OBJ and skeleton sidecar


def save_obj(path, vertices: np.ndarray, faces: np.ndarray, uvs: np.ndarray | None = None) -> None:
    lines = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in vertices]
    if uvs is not None:
        lines += [f"vt {u:.17g} {v:.17g}" for u, v in uvs]
        lines += [f"f {a+1}/{a+1} {b+1}/{b+1} {c+1}/{c+1}" for a, b, c in faces]
    else:
        lines += [f"f {a+1} {b+1} {c+1}" for a, b, c in faces]
    Path(path).write_text("\n".join(lines) + "\n")


def load_obj(path) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Read ``v``/``vt``/``f`` records. Per-vertex UVs are taken from the face corners."""
    verts, tex, faces, face_tex = [], [], [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "vt":
            tex.append([float(x) for x in parts[1:3]])
        elif parts[0] == "f":
            if len(parts) != 4:
                raise ValueError(f"only triangle faces are supported: {line!r}")
            idx = [p.split("/") for p in parts[1:]]
            faces.append([int(i[0]) - 1 for i in idx])
            if len(idx[0]) > 1 and idx[0][1]:
                face_tex.append([int(i[1]) - 1 for i in idx])
    vertices = np.array(verts, dtype=np.float64).reshape(-1, 3)
    faces = np.array(faces, dtype=np.int64).reshape(-1, 3)
    uvs = None
    if tex and face_tex:
        tex = np.array(tex)
        uvs = np.zeros((len(vertices), 2))
        uvs[faces.ravel()] = tex[np.array(face_tex).ravel()]
    return vertices, faces, uvs


def save_skeleton_json(path, skeleton: Skeleton, mesh: AnchorMesh) -> None:
    doc = {
        "bone_names": list(skeleton.names),
        "parents": skeleton.parents.tolist(),
        "joints": skeleton.joints.tolist(),
        "lbs_weights": mesh.lbs_weights.tolist(),
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_body(obj_path, skeleton_path) -> tuple[Skeleton, AnchorMesh]:
    vertices, faces, uvs = load_obj(obj_path)
    doc = json.loads(Path(skeleton_path).read_text())
    skeleton = Skeleton(np.array(doc["parents"]), np.array(doc["joints"]), tuple(doc["bone_names"]))
    if uvs is None:
        raise ValueError(f"{obj_path} carries no vt records")
    mesh = AnchorMesh(vertices, faces, uvs, np.array(doc["lbs_weights"]))
    mesh.validate()
    return skeleton, mesh
