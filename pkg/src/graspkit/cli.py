"""Command-line pipeline: prepare, optimize, refine, render, metrics.

A single JSON config file describes a run; flags override the config.  Every
command is deterministic for a fixed config and seed, and writes outputs
under the configured directory.  The seed is recorded in outputs even though
no default component draws random numbers.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import gaussmap, geometry, hoiopt, meshio, refine, render
from .hand import HandPose, load_hand_model


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    object_mesh: Path
    hand_model: Path
    output_dir: Path
    init_rotation: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    init_translation: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    init_theta: list | None = None
    scale: float = hoiopt.DEFAULT_HAND_SCALE
    weights: hoiopt.LossWeights = field(default_factory=hoiopt.LossWeights)
    iterations: int = 1000
    fps_count: int = 2048
    alpha_radius: float = 0.1
    dense_target: int | None = None
    render_width: int = 512
    render_height: int = 512
    contact_threshold: float = hoiopt.CONTACT_THRESHOLD
    eta: float = refine.DEFAULT_ETA
    keep: int = refine.DEFAULT_KEEP
    batch: int = refine.DEFAULT_BATCH
    vlm: dict = field(default_factory=dict)
    seed: int = 0

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        try:
            init = doc.get("init", {})
            weights = hoiopt.LossWeights(**doc.get("weights", {}))
            cfg = cls(
                object_mesh=Path(doc["object_mesh"]),
                hand_model=Path(doc["hand_model"]),
                output_dir=Path(doc.get("output_dir", "out")),
                init_rotation=init.get("rotation", [0.0, 0.0, 0.0]),
                init_translation=init.get("translation", [0.0, 0.0, 0.0]),
                init_theta=init.get("theta"),
                scale=float(init.get("scale", hoiopt.DEFAULT_HAND_SCALE)),
                weights=weights,
                iterations=int(doc.get("iterations", 1000)),
                fps_count=int(doc.get("fps_count", 2048)),
                alpha_radius=float(doc.get("alpha_radius", 0.1)),
                dense_target=doc.get("dense_target"),
                render_width=int(doc.get("render", {}).get("width", 512)),
                render_height=int(doc.get("render", {}).get("height", 512)),
                contact_threshold=float(doc.get("contact_threshold", hoiopt.CONTACT_THRESHOLD)),
                eta=float(doc.get("eta", refine.DEFAULT_ETA)),
                keep=int(doc.get("keep", refine.DEFAULT_KEEP)),
                batch=int(doc.get("batch", refine.DEFAULT_BATCH)),
                vlm=doc.get("vlm", {}),
                seed=int(doc.get("seed", 0)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"{path}: bad config: {exc}") from exc
        cfg.validate()
        return cfg

    def validate(self):
        for name, p in (("object_mesh", self.object_mesh), ("hand_model", self.hand_model)):
            if not Path(p).exists():
                raise ConfigError(f"{name} path does not exist: {p}")
        if self.iterations < 0 or self.fps_count < 4:
            raise ConfigError("iterations must be >= 0 and fps_count >= 4")
        if self.alpha_radius <= 0 or self.scale <= 0 or self.eta <= 0:
            raise ConfigError("alpha_radius, scale and eta must be positive")
        if not 2 <= self.batch <= 3:
            raise ConfigError("batch must be 2 or 3")


def build_scene(cfg: RunConfig) -> hoiopt.HoiScene:
    """Config to scene: load, optionally upsample, bind, FPS + alpha shape.

    The FPS count is capped at the available vertex count so small meshes
    keep working with the 2048-point default.
    """
    mesh = meshio.load_mesh(cfg.object_mesh)
    if cfg.dense_target is not None and cfg.dense_target > mesh.n_vertices:
        mesh, _ = geometry.upsample_to_target(mesh, int(cfg.dense_target))
    model = load_hand_model(cfg.hand_model)
    n_fps = min(cfg.fps_count, mesh.n_vertices)
    sample = geometry.farthest_point_sample(mesh.vertices, n_fps)
    concise = geometry.alpha_shape(mesh.vertices[sample], cfg.alpha_radius)
    theta = np.zeros((model.n_joints, 3)) if cfg.init_theta is None else np.asarray(cfg.init_theta, dtype=float)
    params = hoiopt.HoiParams(
        rotation=np.asarray(cfg.init_rotation, dtype=float),
        translation=np.asarray(cfg.init_translation, dtype=float),
        pose=HandPose(theta),
        scale=cfg.scale,
    )
    return hoiopt.HoiScene(
        object_points=mesh.vertices,
        concise=concise,
        model=model,
        params=params,
        contact_threshold=cfg.contact_threshold,
    )


def _scene_snapshot(scene: hoiopt.HoiScene, cfg: RunConfig, path: Path):
    ev = hoiopt.evaluate_scene(scene)
    hand_mesh = geometry.TriMesh(ev.hand_vertices, scene.model.faces)
    pts = np.concatenate([ev.hand_vertices, scene.concise.vertices], axis=0)
    cam = render.default_hoi_camera(
        pts.min(axis=0), pts.max(axis=0), width=cfg.render_width, height=cfg.render_height
    )
    img = render.rasterize(
        [(scene.concise.mesh, (0.85, 0.62, 0.25)), (hand_mesh, (0.80, 0.55, 0.45))], cam
    )
    render.write_png(img, path)


def _params_dict(params: hoiopt.HoiParams) -> dict:
    return {
        "rotation": params.rotation.tolist(),
        "translation": params.translation.tolist(),
        "theta": params.pose.theta.tolist(),
        "scale": params.scale,
    }


def _write_json(path: Path, doc: dict):
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def cmd_prepare(cfg: RunConfig) -> int:
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    mesh = meshio.load_mesh(cfg.object_mesh)
    if cfg.dense_target is not None and cfg.dense_target > mesh.n_vertices:
        mesh, _ = geometry.upsample_to_target(mesh, int(cfg.dense_target))
    gaussians, _ = gaussmap.bind_vertices(mesh, gaussmap.OBJECT_MIN_OPACITY)
    gaussmap.save_gaussians(gaussians, out / "dense_gaussians.ply")
    n_fps = min(cfg.fps_count, mesh.n_vertices)
    sample = geometry.farthest_point_sample(mesh.vertices, n_fps)
    concise = geometry.alpha_shape(mesh.vertices[sample], cfg.alpha_radius)
    meshio.save_mesh(concise.mesh, out / "concise.ply", format="ply-binary")
    watertight, euler = geometry.is_watertight(concise.mesh)
    _write_json(
        out / "prepare_summary.json",
        {
            "dense_vertices": mesh.n_vertices,
            "fps_count": n_fps,
            "alpha_radius": cfg.alpha_radius,
            "concise_vertices": concise.mesh.n_vertices,
            "concise_faces": concise.mesh.n_faces,
            "watertight": watertight,
            "euler_characteristic": euler,
            "seed": cfg.seed,
        },
    )
    print(f"prepare: wrote {out / 'dense_gaussians.ply'} and {out / 'concise.ply'} "
          f"(watertight={watertight}, euler={euler})")
    return 0


def cmd_optimize(cfg: RunConfig) -> int:
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    scene = build_scene(cfg)
    _scene_snapshot(scene, cfg, out / "before.png")
    initial = hoiopt.metrics(scene)
    params, trace, final = hoiopt.optimize(
        scene, cfg.weights, iterations=cfg.iterations, trace=True
    )
    _scene_snapshot(scene, cfg, out / "after.png")
    result = {
        "seed": cfg.seed,
        "iterations": cfg.iterations,
        "final_params": _params_dict(params),
        "initial_metrics": initial.to_dict(),
        "metrics": final.to_dict(),
        "masks": {
            "object_indices": np.nonzero(scene.masks.object_mask)[0].tolist(),
            "keypoint_indices": np.nonzero(scene.masks.keypoint_mask)[0].tolist(),
        },
        "trace": trace,
    }
    _write_json(out / "result.json", result)
    with (out / "trace.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["iteration", "total", "pene", "oc", "hc", "repos", "cons",
                            "n_penetrating", "n_repos"]
        )
        writer.writeheader()
        for row in trace:
            writer.writerow(row)
    print(
        f"optimize: {cfg.iterations} iterations, max penetration "
        f"{initial.max_penetration:.6g} -> {final.max_penetration:.6g}, "
        f"contact={final.contact}"
    )
    return 0


def _make_selector(spec: str, cfg: RunConfig, scene: hoiopt.HoiScene):
    if spec == "mock:penetration":
        return refine.make_penetration_selector(scene)
    if spec == "mock:first":
        return lambda group: 1
    if spec == "mock:closest":
        return refine.make_closest_to_base_selector(scene.params.translation)
    if spec == "vlm":
        vlm = cfg.vlm
        missing = [k for k in ("base_url", "model") if not vlm.get(k)]
        if missing:
            raise ConfigError(f"vlm config missing fields: {missing}")
        return refine.VlmSelector(
            base_url=vlm["base_url"],
            model=vlm["model"],
            description=vlm.get("description", "a hand grasping the object"),
            timeout=float(vlm.get("timeout", 60.0)),
        )
    raise ConfigError(f"unknown selector {spec!r}")


def cmd_refine(cfg: RunConfig, selector_spec: str) -> int:
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    scene = build_scene(cfg)
    selector = _make_selector(selector_spec, cfg, scene)

    def renderer(sc, cand):
        return refine.default_renderer(sc, cand, width=cfg.render_width, height=cfg.render_height)

    translation, transcript, grid = refine.refine_translation(
        scene, selector, renderer=renderer, eta=cfg.eta, keep=cfg.keep, batch=cfg.batch
    )
    candidates_dir = out / "candidates"
    candidates_dir.mkdir(exist_ok=True)
    for c in grid.candidates:
        if c.image is not None:
            (candidates_dir / f"{c.id:03d}.png").write_bytes(c.image)
    _write_json(
        out / "refined.json",
        {
            "seed": cfg.seed,
            "selector": selector_spec,
            "base_translation": grid.base_translation.tolist(),
            "eta": grid.eta,
            "refined_translation": translation.tolist(),
            "transcript": transcript.to_dict(),
        },
    )
    print(f"refine: translation {grid.base_translation.tolist()} -> {translation.tolist()}")
    return 0


def cmd_render(cfg: RunConfig) -> int:
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    scene = build_scene(cfg)
    _scene_snapshot(scene, cfg, out / "scene.png")
    print(f"render: wrote {out / 'scene.png'}")
    return 0


METRICS_HEADER = ["scene", "max_penetration", "mean_penetration", "contact"]


def cmd_metrics(result_paths: list[str]) -> int:
    rows = []
    for p in result_paths:
        path = Path(p)
        if not path.exists():
            raise ConfigError(f"result file not found: {path}")
        doc = json.loads(path.read_text())
        m = doc["metrics"]
        rows.append((str(path), m["max_penetration"], m["mean_penetration"], bool(m["contact"])))
    print("\t".join(METRICS_HEADER))
    for name, mx, mn, contact in rows:
        print(f"{name}\t{mx:.9g}\t{mn:.9g}\t{int(contact)}")
    ratio = sum(1 for r in rows if r[3]) / len(rows) if rows else 0.0
    print(f"contact_ratio\t{ratio:.6g}")
    return 0


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if args.out is not None:
        cfg.output_dir = Path(args.out)
    if getattr(args, "iters", None) is not None:
        cfg.iterations = args.iters
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="graspkit", description="Hand-object grasp optimization pipeline"
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("prepare", "optimize", "refine", "render"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--out", default=None)
        p.add_argument("--iters", type=int, default=None)
        p.add_argument("--seed", type=int, default=None)
        if name == "refine":
            p.add_argument("--selector", default="mock:penetration")
    p = sub.add_parser("metrics")
    p.add_argument("results", nargs="+")
    args = parser.parse_args(argv)
    try:
        if args.command == "metrics":
            return cmd_metrics(args.results)
        cfg = _apply_overrides(RunConfig.load(args.config), args)
        if args.command == "prepare":
            return cmd_prepare(cfg)
        if args.command == "optimize":
            return cmd_optimize(cfg)
        if args.command == "refine":
            return cmd_refine(cfg, args.selector)
        if args.command == "render":
            return cmd_render(cfg)
    except (ConfigError, refine.RefineError, geometry.GeometryError,
            meshio.MeshFormatError, hoiopt.HoiError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
