"""Multi-view consistency and timing measurements for stylized scenes.

Consistency uses exact depth-based reprojection: geometry is known, so each
covered pixel of view A is unprojected with its rendered depth and looked up
in view B, no optical flow involved.  Timing separates the one-shot transfer
cost (stats + alignment + decode) from the steady per-frame render cost.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .decoder import KnnDecoder, decode
from .errors import ContractError
from .render import Camera, render
from .scene import GaussianScene, KnnIndex
from .style import StyleStats, adain_transfer

COVERAGE_MIN = 0.5
DEPTH_REL_TOL = 0.02


@dataclass
class ConsistencyReport:
    rmse: float
    valid_fraction: float
    view_pair: tuple


@dataclass
class TimingReport:
    transfer_seconds: float
    render_seconds: float      # median per frame
    num_gaussians: int
    image_size: tuple          # (width, height)
    frames: int


def _bilinear(image: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Sample (H, W, C) at continuous pixel coords (pixel centers at +0.5).

    Coordinates within 1e-9 px of a grid point snap onto it, so an identity
    warp reproduces pixels exactly instead of leaking float round-trip noise.
    """
    h, w = image.shape[:2]
    x = np.clip(u - 0.5, 0.0, w - 1.0)
    y = np.clip(v - 0.5, 0.0, h - 1.0)
    xr = np.round(x)
    yr = np.round(y)
    x = np.where(np.abs(x - xr) < 1e-9, xr, x)
    y = np.where(np.abs(y - yr) < 1e-9, yr, y)
    x0 = np.floor(x).astype(int)
    y0 = np.floor(y).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    top = image[y0, x0] * (1 - fx) + image[y0, x1] * fx
    bot = image[y1, x0] * (1 - fx) + image[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def warp_consistency(scene: GaussianScene, cam_a: Camera, cam_b: Camera,
                     channel: str = "styled_color") -> ConsistencyReport:
    """RMSE between view A and its reprojection into view B.

    Covered pixels of A (accumulated weight above 0.5) are unprojected with
    A's expected depth, reprojected into B, and kept when they land inside
    B's viewport with agreeing depth (2% relative).  RMSE is over the valid
    RGB pairs only.
    """
    if channel == "styled_color" and scene.styled_colors is None:
        raise ContractError("styled_color is not populated; stylize the scene first")
    out_a = render(scene, cam_a, channel=channel, retain_cache=False)
    out_b = render(scene, cam_b, channel=channel, retain_cache=False)

    h, w = cam_a.height, cam_a.width
    wsum_a = out_a.weight_sum
    covered = wsum_a > COVERAGE_MIN
    if not covered.any():
        return ConsistencyReport(rmse=0.0, valid_fraction=0.0, view_pair=(0, 1))
    # expected depth given a hit = blended depth / accumulated weight
    z_a = np.where(covered, out_a.depth_map / np.maximum(wsum_a, 1e-12), 0.0)

    ys, xs = np.nonzero(covered)
    u = xs + 0.5
    v = ys + 0.5
    z = z_a[ys, xs]
    x_cam = np.stack([(u - cam_a.cx) / cam_a.fx * z,
                      (v - cam_a.cy) / cam_a.fy * z,
                      z], axis=1)
    world = (x_cam - cam_a.translation) @ cam_a.rotation   # R^T (x - t)
    in_b = world @ cam_b.rotation.T + cam_b.translation
    zb = in_b[:, 2]
    front = zb > cam_b.near_clip
    ub = np.where(front, cam_b.fx * in_b[:, 0] / np.where(front, zb, 1.0) + cam_b.cx, -1.0)
    vb = np.where(front, cam_b.fy * in_b[:, 1] / np.where(front, zb, 1.0) + cam_b.cy, -1.0)
    inside = front & (ub >= 0) & (ub <= cam_b.width) & (vb >= 0) & (vb <= cam_b.height)

    wsum_b = np.maximum(out_b.weight_sum, 1e-12)
    exp_depth_b = out_b.depth_map / wsum_b
    zb_seen = _bilinear(exp_depth_b[..., None], ub, vb)[:, 0]
    depth_ok = np.abs(zb_seen - zb) < DEPTH_REL_TOL * np.maximum(zb, 1e-12)
    valid = inside & depth_ok

    n_covered = len(xs)
    if not valid.any():
        return ConsistencyReport(rmse=1.0, valid_fraction=0.0, view_pair=(0, 1))
    rgb_a = out_a.image[ys, xs][valid]
    rgb_b = _bilinear(out_b.image, ub[valid], vb[valid])
    rmse = float(np.sqrt(np.mean((rgb_a - rgb_b) ** 2)))
    return ConsistencyReport(rmse=rmse, valid_fraction=float(valid.sum() / n_covered),
                             view_pair=(0, 1))


def measure_timing(scene: GaussianScene, decoder: KnnDecoder, style: StyleStats,
                   cameras: List[Camera], knn: KnnIndex, min_frames: int = 20) -> TimingReport:
    """Wall time of one style transfer and the median per-frame render time.

    Transfer = statistic alignment + decode, once.  Rendering reuses the
    decoded colors; at least min_frames frames are rendered by cycling the
    camera list.  File I/O is excluded throughout.
    """
    t0 = time.perf_counter()
    adain_transfer(scene, style)
    decode(scene, decoder, knn)
    transfer_seconds = time.perf_counter() - t0

    frames = max(min_frames, len(cameras))
    per_frame = []
    for i in range(frames):
        cam = cameras[i % len(cameras)]
        t0 = time.perf_counter()
        render(scene, cam, channel="styled_color", retain_cache=False)
        per_frame.append(time.perf_counter() - t0)
    cam0 = cameras[0]
    return TimingReport(transfer_seconds=transfer_seconds,
                        render_seconds=float(np.median(per_frame)),
                        num_gaussians=scene.num_gaussians,
                        image_size=(cam0.width, cam0.height),
                        frames=frames)


def consistency_csv(reports: List[ConsistencyReport], path):
    from pathlib import Path
    lines = ["view_a,view_b,rmse,valid_fraction"]
    for r in reports:
        lines.append(f"{r.view_pair[0]},{r.view_pair[1]},{r.rmse!r},{r.valid_fraction!r}")
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text("\n".join(lines) + "\n")
