"""Physics-based hand-object interaction optimization.

The hand is posed by LBS, rigidly placed against a frozen object point set
(Eq.-style composition: uniform scale, rotation, translation), and optimized
with Adam against five geometric losses: penetration, object-contact,
hand-contact, joint reposition, and parameter consistency.  All losses are
evaluated directly on vertex positions (no rendering) with analytic
gradients; nearest-neighbor correspondences and penetration/selection sets
are recomputed every iteration but held fixed inside each gradient
evaluation, making the objective piecewise smooth.

Object vertices never move.  Contact masks are initialized once and frozen.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import ConciseMesh, KnnIndex, TriMesh, build_knn, nearest_on_set, vertex_normals
from .hand import HandModel, HandPose, clamp_pose, keypoints, lbs_forward, lbs_jacobians
from .rotations import rotation_from_axis_angle, rotation_jacobian

DEFAULT_HAND_SCALE = 7.39
CONTACT_THRESHOLD = 0.005


class HoiError(Exception):
    pass


class NonFiniteLossError(HoiError):
    """Raised when a loss turns non-finite; carries a diagnostic snapshot."""

    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class HoiParams:
    """Relative hand placement: axis-angle rotation, translation, pose, scale.

    The scale is fixed during optimization; the optimized vector is
    (rotation, translation, pose.theta) and optionally the pose offsets.
    """

    rotation: np.ndarray
    translation: np.ndarray
    pose: HandPose
    scale: float = DEFAULT_HAND_SCALE

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=float).reshape(3)
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)
        if self.scale <= 0:
            raise HoiError("hand scale must be positive")

    def copy(self) -> "HoiParams":
        return HoiParams(self.rotation.copy(), self.translation.copy(),
                         self.pose.copy(), self.scale)


@dataclass
class ContactMasks:
    """Frozen binary contact selections for object vertices and keypoints."""

    object_mask: np.ndarray
    keypoint_mask: np.ndarray
    frozen: bool = False

    def __post_init__(self):
        self.object_mask = np.asarray(self.object_mask, dtype=bool)
        self.keypoint_mask = np.asarray(self.keypoint_mask, dtype=bool)

    def freeze(self) -> "ContactMasks":
        self.object_mask.flags.writeable = False
        self.keypoint_mask.flags.writeable = False
        self.frozen = True
        return self


@dataclass
class LossWeights:
    pene: float = 10.0
    hc: float = 0.5
    oc: float = 0.5
    repos: float = 1.0
    cons: float = 1.0
    xy_weight: float = 10.0   # per-axis pose-deviation weight on x and y

    def axis_weights(self) -> np.ndarray:
        return np.array([self.xy_weight, self.xy_weight, 1.0])


@dataclass
class AdamState:
    """Standard Adam moments over a flat parameter vector."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_size(cls, n: int, lr: float = 0.01) -> "AdamState":
        return cls(m=np.zeros(n), v=np.zeros(n), lr=lr)


def adam_step(state: AdamState, params: np.ndarray, gradient: np.ndarray) -> np.ndarray:
    """One Adam update; returns the new parameter vector."""
    if state.m.shape != params.shape or gradient.shape != params.shape:
        raise HoiError("Adam state / parameter / gradient shapes disagree")
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * gradient
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * gradient * gradient
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    return params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass
class HoiScene:
    """Frozen object (dense points + concise mesh) and a movable hand."""

    object_points: np.ndarray
    concise: ConciseMesh
    model: HandModel
    params: HoiParams
    init_params: HoiParams | None = None  # defaults to a copy of params
    masks: ContactMasks | None = None
    optimize_offsets: bool = False
    contact_threshold: float = CONTACT_THRESHOLD

    def __post_init__(self):
        pts = np.ascontiguousarray(np.asarray(self.object_points, dtype=float).reshape(-1, 3))
        pts.flags.writeable = False
        self.object_points = pts
        if self.init_params is None:
            self.init_params = self.params.copy()
        self._concise_index = build_knn(self.concise.vertices)
        self._object_index = build_knn(self.object_points)

    @property
    def n_params(self) -> int:
        n = 6 + self.model.n_joints * 3
        if self.optimize_offsets:
            n += self.model.n_vertices * 3
        return n

    def pack(self, params: HoiParams | None = None) -> np.ndarray:
        """Flatten (rotation, translation, theta[, offsets]) in documented order."""
        p = params if params is not None else self.params
        parts = [p.rotation, p.translation, p.pose.theta.ravel()]
        if self.optimize_offsets:
            off = p.pose.offsets
            if off is None:
                off = np.zeros((self.model.n_vertices, 3))
            parts.append(off.ravel())
        return np.concatenate(parts)

    def unpack(self, vec: np.ndarray) -> HoiParams:
        j = self.model.n_joints
        theta = vec[6 : 6 + 3 * j].reshape(j, 3)
        offsets = None
        if self.optimize_offsets:
            offsets = vec[6 + 3 * j :].reshape(self.model.n_vertices, 3)
        elif self.params.pose.offsets is not None:
            offsets = self.params.pose.offsets.copy()
        pose = HandPose(theta, self.params.pose.root_translation.copy(), offsets)
        return HoiParams(vec[0:3].copy(), vec[3:6].copy(), pose, self.params.scale)


def compose_hand(
    params: HoiParams, model: HandModel
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Place the posed hand in object space.

    world vertices = scale * (lbs vertices) @ R^T + translation; keypoints
    transform identically; vertex normals rotate without scaling.  The object
    is untouched by construction.
    """
    verts, joints = lbs_forward(model, params.pose)
    kps = keypoints(model, verts, joints)
    normals = vertex_normals(TriMesh(verts, model.faces))
    rot = rotation_from_axis_angle(params.rotation)
    world_v = params.scale * verts @ rot.T + params.translation
    world_k = params.scale * kps @ rot.T + params.translation
    world_n = normals @ rot.T
    return world_v, world_k, world_n


@dataclass
class SceneEval:
    """Everything derived from one (scene, params) evaluation.

    Correspondences are part of the evaluation: they are recomputed here and
    treated as constants by the loss gradients.  ``jac`` is filled lazily the
    first time a gradient is requested.
    """

    params: HoiParams
    lbs_vertices: np.ndarray
    lbs_keypoints: np.ndarray
    hand_vertices: np.ndarray
    hand_keypoints: np.ndarray
    hand_normals: np.ndarray
    rot: np.ndarray
    drot: np.ndarray
    nearest_hand: np.ndarray        # per object vertex
    nearest_hand_dist: np.ndarray
    penetrating: np.ndarray         # bool per object vertex
    kp_nearest_concise: np.ndarray  # per keypoint
    kp_concise_dist: np.ndarray
    kp_inside: np.ndarray           # bool per keypoint
    jac: object = None


def evaluate_scene(
    scene: HoiScene, params: HoiParams | None = None, with_jacobians: bool = False
) -> SceneEval:
    p = params if params is not None else scene.params
    verts, joints = lbs_forward(scene.model, p.pose)
    kps = keypoints(scene.model, verts, joints)
    normals = vertex_normals(TriMesh(verts, scene.model.faces))
    rot = rotation_from_axis_angle(p.rotation)
    world_v = p.scale * verts @ rot.T + p.translation
    world_k = p.scale * kps @ rot.T + p.translation
    world_n = normals @ rot.T

    hand_index = build_knn(world_v)
    near_h, dist_h = nearest_on_set(hand_index, scene.object_points)
    dots = np.einsum(
        "ij,ij->i", world_n[near_h], world_v[near_h] - scene.object_points
    )
    penetrating = dots > 0.0

    near_c, dist_c = nearest_on_set(scene._concise_index, world_k)
    inside = (
        np.einsum(
            "ij,ij->i",
            scene.concise.normals[near_c],
            world_k - scene.concise.vertices[near_c],
        )
        < 0.0
    )
    return SceneEval(
        params=p,
        lbs_vertices=verts,
        lbs_keypoints=kps,
        hand_vertices=world_v,
        hand_keypoints=world_k,
        hand_normals=world_n,
        rot=rot,
        drot=rotation_jacobian(p.rotation),
        nearest_hand=near_h,
        nearest_hand_dist=dist_h,
        penetrating=penetrating,
        kp_nearest_concise=near_c,
        kp_concise_dist=dist_c,
        kp_inside=inside,
        jac=lbs_jacobians(scene.model, p.pose) if with_jacobians else None,
    )


def detect_penetration(
    hand_vertices: np.ndarray, hand_normals: np.ndarray, object_vertices: np.ndarray
) -> np.ndarray:
    """Penetrating (object index, nearest hand index) pairs, shape (M, 2).

    An object vertex penetrates iff the outward normal at its nearest hand
    vertex points from the object vertex toward that hand vertex.
    """
    index = build_knn(hand_vertices)
    near, _ = nearest_on_set(index, object_vertices)
    dots = np.einsum("ij,ij->i", hand_normals[near], hand_vertices[near] - object_vertices)
    obj_idx = np.nonzero(dots > 0.0)[0]
    return np.stack([obj_idx, near[obj_idx]], axis=1) if len(obj_idx) else np.zeros((0, 2), dtype=np.int64)


def init_contact_masks(scene: HoiScene) -> ContactMasks:
    """One-time contact mask initialization (then frozen).

    Object mask: the penetrating object vertices, or the 5 closest to the
    hand if nothing penetrates.  Keypoint mask: the 5 keypoints closest to
    the object vertices.  Ties break to the lowest index.
    """
    ev = evaluate_scene(scene)
    n_obj = len(scene.object_points)
    obj_mask = ev.penetrating.copy()
    if not obj_mask.any():
        closest = np.argsort(ev.nearest_hand_dist, kind="stable")[:5]
        obj_mask = np.zeros(n_obj, dtype=bool)
        obj_mask[closest] = True
    _, kp_obj_dist = nearest_on_set(scene._object_index, ev.hand_keypoints)
    kp_mask = np.zeros(scene.model.n_keypoints, dtype=bool)
    kp_mask[np.argsort(kp_obj_dist, kind="stable")[:5]] = True
    return ContactMasks(object_mask=obj_mask, keypoint_mask=kp_mask).freeze()


@dataclass
class LossResult:
    value: float
    grad: np.ndarray
    info: dict = field(default_factory=dict)


def _backprop_world(
    scene: HoiScene, ev: SceneEval, d_world_v: np.ndarray | None, d_world_k: np.ndarray | None
) -> np.ndarray:
    """Chain upstream world-space gradients back to the packed parameters."""
    if ev.jac is None:
        ev.jac = lbs_jacobians(scene.model, ev.params.pose)
    model = scene.model
    s = ev.params.scale
    nj = model.n_joints
    grad = np.zeros(scene.n_params)
    d_rot_acc = np.zeros((3, 3))
    d_local_v = None
    d_local_k = None
    if d_world_v is not None and np.any(d_world_v):
        grad[3:6] += d_world_v.sum(axis=0)
        d_rot_acc += s * d_world_v.T @ ev.lbs_vertices
        d_local_v = s * d_world_v @ ev.rot
    if d_world_k is not None and np.any(d_world_k):
        grad[3:6] += d_world_k.sum(axis=0)
        d_rot_acc += s * d_world_k.T @ ev.lbs_keypoints
        d_local_k = s * d_world_k @ ev.rot
    for i in range(3):
        grad[i] = float(np.sum(d_rot_acc * ev.drot[i]))
    dtheta = np.zeros((nj, 3))
    if d_local_v is not None:
        dtheta += np.einsum("va,vaqc->qc", d_local_v, ev.jac.d_vertices_d_theta)
    if d_local_k is not None:
        dtheta += np.einsum("ka,kaqc->qc", d_local_k, ev.jac.d_keypoints_d_theta)
    grad[6 : 6 + 3 * nj] = dtheta.ravel()
    if scene.optimize_offsets:
        d_off = np.zeros((model.n_vertices, 3))
        if d_local_v is not None:
            d_off += np.einsum("vab,va->vb", ev.jac.blend_rotations, d_local_v)
        if d_local_k is not None:
            tips = ev.jac.fingertip_ids
            tip_grad = np.einsum(
                "vab,va->vb", ev.jac.blend_rotations[tips], d_local_k[nj:]
            )
            np.add.at(d_off, tips, tip_grad)
        grad[6 + 3 * nj :] = d_off.ravel()
    return grad


def loss_pene(scene: HoiScene, ev: SceneEval | None = None) -> LossResult:
    """Squared distance between penetrating object vertices and their nearest
    hand vertices; pulls the hand surface onto the trapped object points."""
    ev = ev or evaluate_scene(scene)
    pen = np.nonzero(ev.penetrating)[0]
    if len(pen) == 0:
        return LossResult(0.0, np.zeros(scene.n_params), {"n_penetrating": 0})
    near = ev.nearest_hand[pen]
    diff = ev.hand_vertices[near] - scene.object_points[pen]
    value = float(np.sum(diff * diff))
    d_world_v = np.zeros_like(ev.hand_vertices)
    np.add.at(d_world_v, near, 2.0 * diff)
    return LossResult(value, _backprop_world(scene, ev, d_world_v, None),
                      {"n_penetrating": int(len(pen))})


def loss_oc(scene: HoiScene, masks: ContactMasks, ev: SceneEval | None = None) -> LossResult:
    """Masked object vertices to their current nearest hand vertices.

    Object positions are frozen; gradients flow only through the hand.
    """
    ev = ev or evaluate_scene(scene)
    sel = np.nonzero(masks.object_mask)[0]
    if len(sel) == 0:
        return LossResult(0.0, np.zeros(scene.n_params))
    near = ev.nearest_hand[sel]
    diff = scene.object_points[sel] - ev.hand_vertices[near]
    value = float(np.sum(diff * diff))
    d_world_v = np.zeros_like(ev.hand_vertices)
    np.add.at(d_world_v, near, -2.0 * diff)
    return LossResult(value, _backprop_world(scene, ev, d_world_v, None))


def loss_hc(scene: HoiScene, masks: ContactMasks, ev: SceneEval | None = None) -> LossResult:
    """Masked keypoints to their nearest concise-mesh vertices."""
    ev = ev or evaluate_scene(scene)
    sel = np.nonzero(masks.keypoint_mask)[0]
    if len(sel) == 0:
        return LossResult(0.0, np.zeros(scene.n_params))
    targets = scene.concise.vertices[ev.kp_nearest_concise[sel]]
    diff = ev.hand_keypoints[sel] - targets
    value = float(np.sum(diff * diff))
    d_world_k = np.zeros_like(ev.hand_keypoints)
    d_world_k[sel] = 2.0 * diff
    return LossResult(value, _backprop_world(scene, ev, None, d_world_k))


def loss_repos(scene: HoiScene, masks: ContactMasks, ev: SceneEval | None = None) -> LossResult:
    """Pull selected keypoints to the object surface.

    A keypoint is selected when it is inside the concise mesh or marked as a
    contact joint; the selection is recomputed on every call.
    """
    ev = ev or evaluate_scene(scene)
    selected = ev.kp_inside | masks.keypoint_mask
    sel = np.nonzero(selected)[0]
    if len(sel) == 0:
        return LossResult(0.0, np.zeros(scene.n_params), {"n_repos": 0})
    targets = scene.concise.vertices[ev.kp_nearest_concise[sel]]
    diff = ev.hand_keypoints[sel] - targets
    value = float(np.sum(diff * diff))
    d_world_k = np.zeros_like(ev.hand_keypoints)
    d_world_k[sel] = 2.0 * diff
    return LossResult(value, _backprop_world(scene, ev, None, d_world_k),
                      {"n_repos": int(len(sel))})


def loss_cons(
    params: HoiParams, init_params: HoiParams, weights: LossWeights
) -> LossResult:
    """Deviation from the initial parameters.

    |t - t0|^2 + |r - r0|^2 + |W (.) (theta - theta0)|_F^2 with per-axis
    weights (x, y, z) = (w, w, 1); the gradient covers the (r, t, theta)
    packing only.
    """
    dt = params.translation - init_params.translation
    dr = params.rotation - init_params.rotation
    dth = params.pose.theta - init_params.pose.theta
    w = weights.axis_weights()
    wth = w[None, :] * dth
    value = float(dt @ dt + dr @ dr + np.sum(wth * wth))
    nj = params.pose.theta.shape[0]
    grad = np.zeros(6 + 3 * nj)
    grad[0:3] = 2.0 * dr
    grad[3:6] = 2.0 * dt
    grad[6:] = (2.0 * (w ** 2)[None, :] * dth).ravel()
    return LossResult(value, grad)


def total_loss(
    scene: HoiScene, masks: ContactMasks, weights: LossWeights,
    ev: SceneEval | None = None,
) -> LossResult:
    """Weighted sum of all terms with the packed gradient.

    Packing order: rotation (3), translation (3), theta (J*3 row-major),
    then offsets (V*3) when offset optimization is enabled.
    """
    ev = ev or evaluate_scene(scene)
    pene = loss_pene(scene, ev)
    oc = loss_oc(scene, masks, ev)
    hc = loss_hc(scene, masks, ev)
    repos = loss_repos(scene, masks, ev)
    cons = loss_cons(ev.params, scene.init_params, weights)
    value = (
        weights.pene * pene.value
        + weights.oc * oc.value
        + weights.hc * hc.value
        + weights.repos * repos.value
        + weights.cons * cons.value
    )
    grad = (
        weights.pene * pene.grad
        + weights.oc * oc.grad
        + weights.hc * hc.grad
        + weights.repos * repos.grad
    )
    grad[: len(cons.grad)] += weights.cons * cons.grad
    info = {
        "pene": pene.value, "oc": oc.value, "hc": hc.value,
        "repos": repos.value, "cons": cons.value,
        "n_penetrating": pene.info.get("n_penetrating", 0),
        "n_repos": repos.info.get("n_repos", 0),
    }
    return LossResult(value, grad, info)


@dataclass
class HoiMetrics:
    max_penetration: float
    mean_penetration: float
    contact: bool
    min_distance: float
    n_penetrating: int

    def to_dict(self) -> dict:
        return {
            "max_penetration": self.max_penetration,
            "mean_penetration": self.mean_penetration,
            "contact": self.contact,
            "min_distance": self.min_distance,
            "n_penetrating": self.n_penetrating,
        }


def metrics(scene: HoiScene, ev: SceneEval | None = None) -> HoiMetrics:
    """Penetration depth statistics and the contact indicator.

    Depth of a penetrating object vertex is its distance to the nearest hand
    vertex; max/mean are 0 when nothing penetrates.  Contact is true when
    the minimum hand-object vertex distance falls below the scene threshold.
    """
    ev = ev or evaluate_scene(scene)
    depths = ev.nearest_hand_dist[ev.penetrating]
    min_dist = float(ev.nearest_hand_dist.min()) if len(ev.nearest_hand_dist) else float("inf")
    return HoiMetrics(
        max_penetration=float(depths.max()) if len(depths) else 0.0,
        mean_penetration=float(depths.mean()) if len(depths) else 0.0,
        contact=bool(min_dist < scene.contact_threshold),
        min_distance=min_dist,
        n_penetrating=int(len(depths)),
    )


def contact_ratio(batch: list[HoiMetrics]) -> float:
    """Fraction of scenes whose contact indicator is true."""
    if not batch:
        return 0.0
    return sum(1 for m in batch if m.contact) / len(batch)


def optimize(
    scene: HoiScene,
    weights: LossWeights | None = None,
    iterations: int = 1000,
    trace: bool = True,
    lr: float = 0.01,
    offsets_lr: float = 0.01,
    laplacian_weight: float = 1.0e5,
) -> tuple[HoiParams, list[dict], HoiMetrics]:
    """Run the Adam loop; returns (final params, per-iteration trace, metrics).

    Masks are initialized once before the loop if the scene has none.  Every
    iteration recomputes correspondences, evaluates the total loss, steps
    Adam, and clamps the pose.  Object vertices are never modified.  When
    offset optimization is enabled, offsets are stepped by a second Adam
    state and regularized by a frozen-stencil Laplacian on the template.
    """
    weights = weights or LossWeights()
    if scene.masks is None:
        scene.masks = init_contact_masks(scene)
    nj = scene.model.n_joints
    base_len = 6 + 3 * nj
    adam = AdamState.for_size(base_len, lr=lr)
    adam_off = None
    lap_stencil = None
    if scene.optimize_offsets:
        from .gaussmap import build_stencil, laplacian, laplacian_transpose

        adam_off = AdamState.for_size(scene.model.n_vertices * 3, lr=offsets_lr)
        lap_stencil = build_stencil(scene.model.template, k=8)
    history: list[dict] = []
    for it in range(iterations):
        ev = evaluate_scene(scene)
        result = total_loss(scene, scene.masks, weights, ev)
        value, grad = result.value, result.grad
        if scene.optimize_offsets:
            off = scene.params.pose.offsets
            if off is None:
                off = np.zeros((scene.model.n_vertices, 3))
            r = laplacian(off, lap_stencil)
            lap_val = laplacian_weight * float(np.sum(r * r))
            value += lap_val
            grad[base_len:] += (2.0 * laplacian_weight * laplacian_transpose(r, lap_stencil)).ravel()
            result.info["lap"] = lap_val
        if not np.isfinite(value) or not np.all(np.isfinite(grad)):
            raise NonFiniteLossError(
                f"non-finite loss at iteration {it}",
                snapshot={
                    "iteration": it,
                    "terms": result.info,
                    "params": scene.pack().tolist(),
                },
            )
        if trace:
            history.append({"iteration": it, "total": value, **result.info})
        vec = scene.pack()
        new_base = adam_step(adam, vec[:base_len], grad[:base_len])
        if adam_off is not None:
            new_off = adam_step(adam_off, vec[base_len:], grad[base_len:])
            vec = np.concatenate([new_base, new_off])
        else:
            vec = new_base
        params = scene.unpack(vec)
        params.pose = clamp_pose(params.pose)
        scene.params = params
    final = metrics(scene)
    return scene.params, history, final
