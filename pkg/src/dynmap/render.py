"""Software rasterizer for the 64x64 RGB observation.

The camera maps the 1 m x 1 m workspace onto the image with row 0 at the top
(y = 1 m), so one pixel spans 15.625 mm.  Bodies are filled with a scanline
rule on pixel centers: a pixel is painted when its center lies inside the
box, with the top and left edges inclusive.  No blending or anti-aliasing.
"""
from __future__ import annotations

import math
import os
from pathlib import Path

import numpy as np

from .sim import WorldState
from .tasks import GOAL_GREEN, EpisodeConfig, TaskId

SIZE = 64
EXTENT = 1.0
SCALE = EXTENT / SIZE  # meters per pixel


def world_to_pixel(x, y, size: int = SIZE):
    """Continuous pixel coordinates ``(u, v)``: column and row, origin top-left."""
    return np.asarray(x) * size / EXTENT, (EXTENT - np.asarray(y)) * size / EXTENT


def pixel_center(row, col, size: int = SIZE):
    """World coordinates of a pixel center."""
    return (col + 0.5) * EXTENT / size, EXTENT - (row + 0.5) * EXTENT / size


def box_polygon(cx, cy, theta, half_w, half_h) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    local = np.array([[-half_w, -half_h], [half_w, -half_h], [half_w, half_h], [-half_w, half_h]])
    return local @ np.array([[c, s], [-s, c]]) + (cx, cy)


def scanline_mask(polygon: np.ndarray, size: int = SIZE) -> np.ndarray:
    """Boolean coverage of a convex polygon given in world coordinates."""
    u, v = world_to_pixel(polygon[:, 0], polygon[:, 1], size)
    centers = np.arange(size) + 0.5
    left = np.full(size, np.inf)
    right = np.full(size, -np.inf)
    n = len(u)
    for i in range(n):
        u0, v0, u1, v1 = u[i], v[i], u[(i + 1) % n], v[(i + 1) % n]
        if v0 == v1:
            continue
        lo, hi = min(v0, v1), max(v0, v1)
        rows = (centers >= lo) & (centers < hi)
        if not rows.any():
            continue
        t = (centers[rows] - v0) / (v1 - v0)
        x = u0 + t * (u1 - u0)
        left[rows] = np.minimum(left[rows], x)
        right[rows] = np.maximum(right[rows], x)
    mask = (centers[None, :] >= left[:, None]) & (centers[None, :] < right[:, None])
    return mask


def _paint_box(img, color, cx, cy, theta, half_w, half_h):
    img[scanline_mask(box_polygon(cx, cy, theta, half_w, half_h), img.shape[0])] = color


def goal_marker_cell(x, y, size: int = SIZE):
    return int(math.floor((EXTENT - y) * size / EXTENT)), int(math.floor(x * size / EXTENT))


def render_frame(world: WorldState | None, config: EpisodeConfig, size: int = SIZE,
                 draw_bodies: bool = True) -> np.ndarray:
    """Render the scene as a ``(size, size, 3)`` uint8 image."""
    img = np.empty((size, size, 3), dtype=np.uint8)
    img[:] = config.background_color
    green = np.array(GOAL_GREEN, dtype=np.uint8)
    for box in config.static_boxes():
        if box.tag in ("obstacle", "bin"):
            _paint_box(img, green, box.cx, box.cy, box.theta, box.half_w, box.half_h)
    if config.task is not TaskId.BIN_DROPPING:
        r, c = goal_marker_cell(*config.target, size=size)
        img[max(r - 1, 0):max(r + 2, 0), max(c - 1, 0):max(c + 2, 0)] = green
    if world is not None and draw_bodies:
        for body, shape, color in ((world.cart, world.cart_shape, config.cart_color),
                                   (world.block, world.block_shape, config.block_color)):
            _paint_box(img, np.array(color, dtype=np.uint8), body.x, body.y, body.theta,
                       shape.half_w, shape.half_h)
    return img


def contact_sheet(images, columns: int = 12, pad: int = 2) -> np.ndarray:
    images = list(images)
    h, w, _ = images[0].shape
    rows = -(-len(images) // columns)
    sheet = np.full((rows * (h + pad) + pad, columns * (w + pad) + pad, 3), 255, dtype=np.uint8)
    for k, im in enumerate(images):
        r, c = divmod(k, columns)
        y, x = pad + r * (h + pad), pad + c * (w + pad)
        sheet[y:y + h, x:x + w] = im
    return sheet


def export_frames(records, path) -> list:
    """Write one PNG per record plus ``sheet.png``; returns the written paths."""
    from PIL import Image

    records = list(records)
    if not records:
        raise ValueError("no records to export")
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise PermissionError(f"cannot write to {out}")
    written = []
    for i, rec in enumerate(records):
        p = out / f"frame_{i:04d}.png"
        Image.fromarray(np.ascontiguousarray(rec.image), "RGB").save(p, format="PNG")
        written.append(p)
    p = out / "sheet.png"
    Image.fromarray(contact_sheet(r.image for r in records), "RGB").save(p, format="PNG")
    written.append(p)
    return written
