"""Parametric skinned hand: linear blend skinning with per-vertex offsets.

A :class:`HandModel` is a template mesh plus a skinning rig (row-stochastic
weights over a joint tree).  Posing applies, in order: an optional linear
pose-corrective basis, per-vertex position offsets, forward kinematics of
per-joint axis-angle rotations about the rest joints, and a final root
translation.  Shape blend parameters are intentionally absent (fixed to
zero); left/right mirroring is out of scope.

Keypoints are the skeleton joints followed by the designated fingertip
vertices (16 + 5 = 21 for MANO-format models).  The repo ships no MANO data;
``make_test_hand`` builds a procedural three-finger hand for tests, and the
JSON schema accepted by :func:`load_hand_model` is documented in the README
so licensed MANO users can convert their own files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rotations import rotation_from_axis_angle, rotation_jacobian

ROOT_CLAMP = (-3.14, 3.14)
ARTICULATION_CLAMP = (-0.6, 1.65)


class HandModelError(Exception):
    pass


@dataclass(frozen=True)
class HandModel:
    """LBS template: vertices, faces, weights, joint tree and fingertips."""

    template: np.ndarray          # (V, 3)
    faces: np.ndarray             # (F, 3)
    weights: np.ndarray           # (V, J), rows sum to 1
    parents: np.ndarray           # (J,), parents[0] == -1
    joints_rest: np.ndarray       # (J, 3)
    fingertips: np.ndarray        # vertex ids, thumb-to-pinky order
    pose_blend: np.ndarray | None = None   # (9*(J-1), V*3), optional

    def __post_init__(self):
        t = np.asarray(self.template, dtype=float).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        w = np.asarray(self.weights, dtype=float)
        p = np.asarray(self.parents, dtype=np.int64).ravel()
        jr = np.asarray(self.joints_rest, dtype=float).reshape(-1, 3)
        tips = np.asarray(self.fingertips, dtype=np.int64).ravel()
        v, j = len(t), len(jr)
        if w.shape != (v, j):
            raise HandModelError(f"weights shape {w.shape} != ({v}, {j})")
        if np.any(np.abs(w.sum(axis=1) - 1.0) > 1e-6):
            raise HandModelError("skinning weight rows must sum to 1")
        if p[0] != -1:
            raise HandModelError("parents[0] must be -1 (root)")
        if np.any(p[1:] < 0) or np.any(p[1:] >= j):
            raise HandModelError("parent indices out of range")
        if np.any(p[1:] >= np.arange(1, j)):
            # topological order (parent before child) also rules out cycles
            raise HandModelError("joints must be ordered parent-before-child")
        if f.size and (f.min() < 0 or f.max() >= v):
            raise HandModelError("face index out of range")
        if tips.size and (tips.min() < 0 or tips.max() >= v):
            raise HandModelError("fingertip vertex id out of range")
        if self.pose_blend is not None:
            pb = np.asarray(self.pose_blend, dtype=float)
            if pb.shape != (9 * (j - 1), v * 3):
                raise HandModelError(
                    f"pose_blend shape {pb.shape} != ({9 * (j - 1)}, {v * 3})"
                )
            object.__setattr__(self, "pose_blend", pb)
        for name, val in (("template", t), ("faces", f), ("weights", w),
                          ("parents", p), ("joints_rest", jr), ("fingertips", tips)):
            object.__setattr__(self, name, val)

    @property
    def n_vertices(self) -> int:
        return len(self.template)

    @property
    def n_joints(self) -> int:
        return len(self.joints_rest)

    @property
    def n_keypoints(self) -> int:
        return self.n_joints + len(self.fingertips)


@dataclass
class HandPose:
    """Axis-angle pose (row 0 = global root rotation) plus offsets."""

    theta: np.ndarray                      # (J, 3) radians
    root_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    offsets: np.ndarray | None = None      # (V, 3), None means zero

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float).reshape(-1, 3)
        self.root_translation = np.asarray(self.root_translation, dtype=float).reshape(3)
        if self.offsets is not None:
            self.offsets = np.asarray(self.offsets, dtype=float).reshape(-1, 3)

    def copy(self) -> "HandPose":
        return HandPose(
            self.theta.copy(),
            self.root_translation.copy(),
            None if self.offsets is None else self.offsets.copy(),
        )


def clamp_pose(pose: HandPose) -> HandPose:
    """Componentwise projection onto the allowed pose box (idempotent).

    Root row clamps to [-3.14, 3.14], articulation rows to [-0.6, 1.65].
    Translation and offsets pass through.
    """
    theta = pose.theta.copy()
    theta[0] = np.clip(theta[0], *ROOT_CLAMP)
    theta[1:] = np.clip(theta[1:], *ARTICULATION_CLAMP)
    return HandPose(theta, pose.root_translation.copy(),
                    None if pose.offsets is None else pose.offsets.copy())


def load_hand_model(path: str | Path) -> HandModel:
    """Load and validate a hand model from its JSON interchange format."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise HandModelError(f"{path}: invalid JSON: {exc}") from exc
    try:
        vertices = np.asarray(doc["vertices"], dtype=float)
        faces = np.asarray(doc["faces"], dtype=np.int64)
        weights = np.asarray(doc["weights"], dtype=float)
        parents = np.asarray(doc["parents"], dtype=np.int64)
        joints_rest = np.asarray(doc["joints_rest"], dtype=float)
        fingertips = np.asarray(doc["fingertips"], dtype=np.int64)
    except KeyError as exc:
        raise HandModelError(f"{path}: missing field {exc}") from exc
    if weights.ndim == 1:
        weights = weights.reshape(len(vertices), len(joints_rest))  # row-major flat
    pose_blend = None
    if doc.get("pose_blend") is not None:
        pose_blend = np.asarray(doc["pose_blend"], dtype=float)
    try:
        return HandModel(
            template=vertices, faces=faces, weights=weights, parents=parents,
            joints_rest=joints_rest, fingertips=fingertips, pose_blend=pose_blend,
        )
    except HandModelError as exc:
        raise HandModelError(f"{path}: {exc}") from exc


def _rest_shape(model: HandModel, pose: HandPose, local_rots: np.ndarray) -> np.ndarray:
    rest = model.template
    if model.pose_blend is not None:
        feat = (local_rots[1:] - np.eye(3)).reshape(-1)   # 9*(J-1)
        rest = rest + (feat @ model.pose_blend).reshape(-1, 3)
    if pose.offsets is not None:
        rest = rest + pose.offsets
    return rest


def _forward_kinematics(model: HandModel, local_rots: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """World joint rotations (J,3,3) and positions (J,3), before root translation."""
    j = model.n_joints
    R = np.empty((j, 3, 3))
    t = np.empty((j, 3))
    R[0] = local_rots[0]
    t[0] = model.joints_rest[0]
    for k in range(1, j):
        p = model.parents[k]
        R[k] = R[p] @ local_rots[k]
        t[k] = R[p] @ (model.joints_rest[k] - model.joints_rest[p]) + t[p]
    return R, t


def lbs_forward(model: HandModel, pose: HandPose) -> tuple[np.ndarray, np.ndarray]:
    """Pose the hand: returns (posed vertices (V,3), posed joints (J,3)).

    Vertices blend per-joint rigid transforms of the (corrected) rest shape;
    the root translation is added last to both outputs.
    """
    if pose.theta.shape != (model.n_joints, 3):
        raise HandModelError(
            f"pose theta shape {pose.theta.shape} != ({model.n_joints}, 3)"
        )
    if pose.offsets is not None and pose.offsets.shape != (model.n_vertices, 3):
        raise HandModelError("offsets shape does not match vertex count")
    local_rots = np.stack([rotation_from_axis_angle(r) for r in pose.theta])
    rest = _rest_shape(model, pose, local_rots)
    R, t = _forward_kinematics(model, local_rots)
    # v' = sum_j w_vj (R_j (rest_v - jrest_j) + t_j)
    centered = rest[:, None, :] - model.joints_rest[None, :, :]     # (V, J, 3)
    moved = np.einsum("jab,vjb->vja", R, centered) + t[None, :, :]
    posed = np.einsum("vj,vja->va", model.weights, moved) + pose.root_translation
    joints = t + pose.root_translation
    return posed, joints


def keypoints(model: HandModel, posed_vertices: np.ndarray, posed_joints: np.ndarray) -> np.ndarray:
    """Skeleton joints followed by fingertip vertices (21x3 for MANO models)."""
    return np.concatenate([posed_joints, posed_vertices[model.fingertips]], axis=0)


# MANO-format models expose 21 keypoints; alias for that common case.
keypoints_21 = keypoints


@dataclass
class LbsJacobians:
    """Analytic partials of posed vertices and keypoints.

    ``d_vertices_d_theta`` has shape (V, 3, J, 3); ``d_keypoints_d_theta``
    (K, 3, J, 3).  The offset Jacobian is block-diagonal: vertex v depends
    only on its own offset through ``blend_rotations[v]`` (3, 3); keypoints
    depend on offsets only through the fingertip rows.  Derivatives with
    respect to the root translation are identity for every output row and
    are not materialized.
    """

    d_vertices_d_theta: np.ndarray
    d_keypoints_d_theta: np.ndarray
    blend_rotations: np.ndarray           # (V, 3, 3)
    fingertip_ids: np.ndarray


def lbs_jacobians(model: HandModel, pose: HandPose) -> LbsJacobians:
    """Chain-rule derivatives of :func:`lbs_forward` and :func:`keypoints`."""
    nj, nv = model.n_joints, model.n_vertices
    local_rots = np.stack([rotation_from_axis_angle(r) for r in pose.theta])
    local_jacs = np.stack([rotation_jacobian(r) for r in pose.theta])  # (J, 3, 3, 3)
    rest = _rest_shape(model, pose, local_rots)
    R, t = _forward_kinematics(model, local_rots)
    centered = rest[:, None, :] - model.joints_rest[None, :, :]       # (V, J, 3)

    d_verts = np.zeros((nv, 3, nj, 3))
    d_joints = np.zeros((nj, 3, nj, 3))
    bone = model.joints_rest[1:] - model.joints_rest[model.parents[1:]]

    for q in range(nj):
        for c in range(3):
            dR = np.zeros((nj, 3, 3))
            dt = np.zeros((nj, 3))
            if q == 0:
                dR[0] = local_jacs[0, c]
            for k in range(1, nj):
                p = model.parents[k]
                dR[k] = dR[p] @ local_rots[k]
                if k == q:
                    dR[k] += R[p] @ local_jacs[k, c]
                dt[k] = dR[p] @ bone[k - 1] + dt[p]
            contrib = np.einsum("vj,jab,vjb->va", model.weights, dR, centered)
            contrib += model.weights @ dt
            if model.pose_blend is not None and q >= 1:
                dfeat = np.zeros((nj - 1, 3, 3))
                dfeat[q - 1] = local_jacs[q, c]
                drest = (dfeat.reshape(-1) @ model.pose_blend).reshape(nv, 3)
                blended = np.einsum("vj,jab,vb->va", model.weights, R, drest)
                contrib += blended
                d_verts[:, :, q, c] = contrib
            else:
                d_verts[:, :, q, c] = contrib
            d_joints[:, :, q, c] = dt

    blend_rot = np.einsum("vj,jab->vab", model.weights, R)
    d_kp = np.concatenate([d_joints, d_verts[model.fingertips]], axis=0)
    return LbsJacobians(
        d_vertices_d_theta=d_verts,
        d_keypoints_d_theta=d_kp,
        blend_rotations=blend_rot,
        fingertip_ids=model.fingertips,
    )


def _ellipsoid(center, radii, subdivisions=2) -> tuple[np.ndarray, np.ndarray]:
    """Icosphere stretched to an ellipsoid; outward winding."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
            [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
            [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
        ],
        dtype=float,
    )
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [tuple(v) for v in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}
        new_faces = []

        def midpoint(i, j):
            key = (i, j) if i < j else (j, i)
            if key not in cache:
                a, b = np.array(verts[i]), np.array(verts[j])
                m = (a + b) / 2.0
                m /= np.linalg.norm(m)
                cache[key] = len(verts)
                verts.append(tuple(m))
            return cache[key]

        for (a, b, c) in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca)]
        faces = new_faces
    v = np.asarray(verts) * np.asarray(radii)[None, :] + np.asarray(center)[None, :]
    return v, np.asarray(faces, dtype=np.int64)


def icosphere(center=(0.0, 0.0, 0.0), radius=1.0, subdivisions=2) -> tuple[np.ndarray, np.ndarray]:
    """Unit-ish icosphere (vertices exactly at ``radius`` from ``center``)."""
    return _ellipsoid(center, (radius, radius, radius), subdivisions)


def _finger_tube(x0, x1, z, radius, rings=12, segments=12):
    """Open-based capped tube along +x at height y=0, depth z."""
    verts = []
    faces = []
    xs = np.linspace(x0, x1, rings)
    ang = np.linspace(0.0, 2 * np.pi, segments, endpoint=False)
    for x in xs:
        for a in ang:
            verts.append((x, radius * np.sin(a), z + radius * np.cos(a)))
    for r in range(rings - 1):
        for s in range(segments):
            a = r * segments + s
            b = r * segments + (s + 1) % segments
            c = (r + 1) * segments + s
            d = (r + 1) * segments + (s + 1) % segments
            faces.append((a, d, b))   # outward winding
            faces.append((a, c, d))
    tip = len(verts)
    verts.append((x1 + radius, 0.0, z))
    last = (rings - 1) * segments
    for s in range(segments):
        a = last + s
        b = last + (s + 1) % segments
        faces.append((b, a, tip))
    return np.asarray(verts), np.asarray(faces, dtype=np.int64), tip


def _smoothstep(x, lo, hi):
    t = np.clip((x - lo) / (hi - lo), 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def make_test_hand() -> HandModel:
    """Procedural three-finger test hand: 7 joints, ~600 vertices.

    Palm is an ellipsoid around the root; each finger is a capped tube with
    a proximal and a distal joint that flex about their local z-axis
    (positive rotation curls toward +y).  Fingertips are the tube apex
    vertices, index-to-ring order.
    """
    palm_v, palm_f = _ellipsoid(center=(0.015, 0.0, 0.0), radii=(0.030, 0.012, 0.032))
    verts = [palm_v]
    faces = [palm_f]
    tips = []
    finger_zs = (-0.022, 0.0, 0.022)
    x0, x1, radius = 0.036, 0.088, 0.008
    offset = len(palm_v)
    for z in finger_zs:
        fv, ff, tip = _finger_tube(x0, x1, z, radius)
        verts.append(fv)
        faces.append(ff + offset)
        tips.append(offset + tip)
        offset += len(fv)
    template = np.concatenate(verts, axis=0)
    all_faces = np.concatenate(faces, axis=0)

    prox_x, dist_x = 0.040, 0.066
    joints = [(0.010, 0.0, 0.0)]
    parents = [-1]
    for i, z in enumerate(finger_zs):
        joints.append((prox_x, 0.0, z))
        parents.append(0)
        joints.append((dist_x, 0.0, z))
        parents.append(1 + 2 * i)
    joints = np.asarray(joints)

    nv, nj = len(template), len(joints)
    weights = np.zeros((nv, nj))
    weights[: len(palm_v), 0] = 1.0
    base = len(palm_v)
    per_finger = (nv - len(palm_v)) // 3
    for i in range(3):
        sl = slice(base + i * per_finger, base + (i + 1) * per_finger)
        x = template[sl, 0]
        to_prox = _smoothstep(x, x0, prox_x + 0.006)
        to_dist = _smoothstep(x, dist_x - 0.006, dist_x + 0.008)
        weights[sl, 0] = 1.0 - to_prox
        weights[sl, 1 + 2 * i] = to_prox * (1.0 - to_dist)
        weights[sl, 2 + 2 * i] = to_prox * to_dist
    return HandModel(
        template=template,
        faces=all_faces,
        weights=weights,
        parents=np.asarray(parents),
        joints_rest=joints,
        fingertips=np.asarray(tips),
    )


def hand_model_to_json(model: HandModel) -> dict:
    """The documented JSON interchange form (see README for the schema)."""
    doc = {
        "vertices": model.template.tolist(),
        "faces": model.faces.tolist(),
        "weights": model.weights.tolist(),
        "parents": model.parents.tolist(),
        "joints_rest": model.joints_rest.tolist(),
        "fingertips": model.fingertips.tolist(),
    }
    if model.pose_blend is not None:
        doc["pose_blend"] = model.pose_blend.tolist()
    return doc
