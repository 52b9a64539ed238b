"""Minimal deterministic software rasterizer.

Produces the candidate images consumed by the translation-refinement
selector and the before/after snapshots written by the CLI.  Deliberately
plain: perspective projection, z-buffer, flat per-face Lambertian shading
from a headlight at the eye, white background.  No anti-aliasing, textures
or gamma; selection only needs silhouettes and contact to be legible.

Determinism contract: triangles are rasterized in (mesh, face) order;
inverse view depth is interpolated linearly in screen space and a later
triangle wins a pixel only when strictly nearer, so depth ties resolve to
the lower mesh id then lower face id.  Identical inputs give byte-identical
buffers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import TriMesh


class RenderError(Exception):
    pass


@dataclass(frozen=True)
class Camera:
    eye: tuple[float, float, float]
    look_at: tuple[float, float, float]
    up: tuple[float, float, float] = (0.0, 1.0, 0.0)
    vfov_deg: float = 40.0
    width: int = 512
    height: int = 512

    def __post_init__(self):
        if not 0.0 < self.vfov_deg < 180.0:
            raise RenderError("vertical field of view must be in (0, 180)")
        if np.allclose(self.eye, self.look_at):
            raise RenderError("camera eye must differ from look_at")
        if self.width < 1 or self.height < 1:
            raise RenderError("viewport must be at least 1x1")


@dataclass
class Image:
    """8-bit RGB raster, row-major with the origin at the top left."""

    width: int
    height: int
    pixels: np.ndarray  # (height, width, 3) uint8

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.uint8).reshape(self.height, self.width, 3)

    @property
    def buffer(self) -> bytes:
        return self.pixels.tobytes()


def _view_basis(camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    eye = np.asarray(camera.eye, dtype=float)
    forward = np.asarray(camera.look_at, dtype=float) - eye
    forward = forward / np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(camera.up, dtype=float))
    nr = np.linalg.norm(right)
    if nr < 1e-12:
        raise RenderError("camera up vector is parallel to the view direction")
    right /= nr
    true_up = np.cross(right, forward)
    # rows: right, up, -forward  (camera looks down -z in view space)
    basis = np.stack([right, true_up, -forward])
    return basis, eye


def rasterize(meshes: list[tuple[TriMesh, tuple[float, float, float]]], camera: Camera) -> Image:
    """Render flat-colored meshes; see the module docstring for the contract."""
    w, h = camera.width, camera.height
    if w * h == 0:
        raise RenderError("zero-area viewport")
    basis, eye = _view_basis(camera)
    f = 1.0 / np.tan(np.radians(camera.vfov_deg) / 2.0)
    aspect = w / h
    color_buf = np.full((h, w, 3), 255, dtype=np.uint8)
    inv_depth = np.zeros((h, w))  # background at infinity

    for mesh_id, (mesh, color) in enumerate(meshes):
        if mesh.n_faces == 0:
            continue
        col = np.clip(np.asarray(color, dtype=float), 0.0, 1.0)
        view = (mesh.vertices - eye) @ basis.T
        depth = -view[:, 2]
        tri = mesh.faces
        # skip any triangle touching the near plane rather than clipping it
        ok = np.all(depth[tri] > 1e-9, axis=1)
        sx = (f / aspect) * view[:, 0] / depth
        sy = f * view[:, 1] / depth
        px = (sx + 1.0) * 0.5 * w
        py = (1.0 - sy) * 0.5 * h
        inv_z = 1.0 / depth

        vw = mesh.vertices
        fn = np.cross(vw[tri[:, 1]] - vw[tri[:, 0]], vw[tri[:, 2]] - vw[tri[:, 0]])
        centroids = (vw[tri[:, 0]] + vw[tri[:, 1]] + vw[tri[:, 2]]) / 3.0

        for fid in np.nonzero(ok)[0]:
            i0, i1, i2 = tri[fid]
            x0, y0, x1, y1, x2, y2 = px[i0], py[i0], px[i1], py[i1], px[i2], py[i2]
            area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
            if area == 0.0:
                continue
            xmin = max(int(np.floor(min(x0, x1, x2))), 0)
            xmax = min(int(np.ceil(max(x0, x1, x2))), w - 1)
            ymin = max(int(np.floor(min(y0, y1, y2))), 0)
            ymax = min(int(np.ceil(max(y0, y1, y2))), h - 1)
            if xmin > xmax or ymin > ymax:
                continue
            xs = np.arange(xmin, xmax + 1) + 0.5
            ys = np.arange(ymin, ymax + 1) + 0.5
            gx, gy = np.meshgrid(xs, ys)
            w0 = ((x1 - x0) * (gy - y0) - (gx - x0) * (y1 - y0)) / area
            w1 = ((gx - x0) * (y2 - y0) - (x2 - x0) * (gy - y0)) / area
            lam1, lam2 = w1, w0
            lam0 = 1.0 - lam1 - lam2
            inside = (lam0 >= 0.0) & (lam1 >= 0.0) & (lam2 >= 0.0)
            if not inside.any():
                continue
            iz = lam0 * inv_z[i0] + lam1 * inv_z[i1] + lam2 * inv_z[i2]
            region = inv_depth[ymin : ymax + 1, xmin : xmax + 1]
            win = inside & (iz > region)
            if not win.any():
                continue
            n = fn[fid]
            nl = np.linalg.norm(n)
            if nl == 0.0:
                continue
            light = eye - centroids[fid]
            shade = abs(float(n @ light)) / (nl * np.linalg.norm(light))
            rgb = np.floor(col * shade * 255.0 + 0.5).astype(np.uint8)
            region[win] = iz[win]
            color_buf[ymin : ymax + 1, xmin : xmax + 1][win] = rgb
    return Image(width=w, height=h, pixels=color_buf)


def write_png(image: Image, path) -> None:
    """Write an 8-bit RGB PNG."""
    if image.width < 1 or image.height < 1:
        raise RenderError("cannot write a zero-size image")
    from PIL import Image as PilImage

    PilImage.fromarray(image.pixels, mode="RGB").save(path, format="PNG")


def png_bytes(image: Image) -> bytes:
    """PNG-encode an image in memory (used for selector prompts)."""
    import io

    from PIL import Image as PilImage

    buf = io.BytesIO()
    PilImage.fromarray(image.pixels, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def read_png(path) -> Image:
    """Read an 8-bit RGB PNG back into an :class:`Image`."""
    from PIL import Image as PilImage

    with PilImage.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return Image(width=arr.shape[1], height=arr.shape[0], pixels=arr)


def default_hoi_camera(
    bounds_min, bounds_max, width: int = 512, height: int = 512, vfov_deg: float = 40.0
) -> Camera:
    """Frame a bounding box from the (+1, +1, +1) diagonal with 10% margin.

    Zero-extent bounds fall back to a fixed viewing distance of 1.0.
    """
    lo = np.asarray(bounds_min, dtype=float)
    hi = np.asarray(bounds_max, dtype=float)
    center = (lo + hi) / 2.0
    radius = float(np.linalg.norm(hi - lo) / 2.0)
    if radius <= 0.0:
        dist = 1.0
    else:
        dist = 1.1 * radius / np.sin(np.radians(vfov_deg) / 2.0)
    direction = np.array([1.0, 1.0, 1.0]) / np.sqrt(3.0)
    eye = center + dist * direction
    return Camera(
        eye=tuple(eye), look_at=tuple(center), up=(0.0, 1.0, 0.0),
        vfov_deg=vfov_deg, width=width, height=height,
    )
