"""Feature embedding: low-dimensional rendering with a learned affine lift.

Rendering a D-dimensional feature image directly is memory-hungry, so each
Gaussian carries a low-dimensional feature f' instead.  The rendered
low-dim image F' is mapped to the high-dim target space by an affine pair
(A, b), with the bias scaled by the pixel's accumulated blending weight:

    F = A F' + b * sum_i w_i

Because compositing is linear, the same map applies per Gaussian, which is
how the optimized low-dim features are lifted to high-dim features:
f = A f' + b.  Training fits f', A, b against ground-truth feature maps
with an L1 objective, rendering at the feature maps' own resolution.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from .errors import ConfigError, ContractError, ParseError
from .features import FeatureMap
from .optim import Adam
from .render import Camera, compute_cache, scale_camera
from .scene import GaussianScene

AFFINE_MAGIC = b"GSAF"


@dataclass
class AffineLift:
    A: np.ndarray   # (D, D')
    b: np.ndarray   # (D,)

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.A.ndim != 2 or self.b.shape != (self.A.shape[0],):
            raise ConfigError(f"affine shapes A{self.A.shape} b{self.b.shape} do not chain")
        if not (np.isfinite(self.A).all() and np.isfinite(self.b).all()):
            raise ConfigError("affine lift contains non-finite entries")


@dataclass
class EmbedConfig:
    iterations: int = 30000
    lr_features: float = 0.01
    lr_affine: float = 0.001
    d_low: int = 32
    d_high: int = 256
    embed_layer: str = "L3"

    def __post_init__(self):
        if self.lr_features <= 0 or self.lr_affine <= 0:
            raise ConfigError("learning rates must be positive")
        if self.d_low > self.d_high:
            raise ConfigError(f"d_low {self.d_low} must not exceed d_high {self.d_high}")


@dataclass
class EmbedResult:
    lift: AffineLift
    loss_history: np.ndarray   # (iterations,)
    seed: int


def lift_pixel(f_low: np.ndarray, weight_sum, lift: AffineLift) -> np.ndarray:
    """Affine lift of rendered low-dim features; bias scales with coverage.

    Accepts a single (D',) vector or an (..., D') image with matching
    (...,) weight sums.
    """
    f_low = np.asarray(f_low, dtype=np.float64)
    weight_sum = np.asarray(weight_sum, dtype=np.float64)
    return f_low @ lift.A.T + weight_sum[..., None] * lift.b


def lift_gaussians(scene: GaussianScene, lift: AffineLift):
    """Populate high_feats = A f' + b from optimized low-dim features."""
    if scene.low_feats is None:
        raise ContractError("low_feat is not populated; run embedding first")
    if lift.A.shape[1] != scene.low_feats.shape[1]:
        raise ConfigError(f"lift A {lift.A.shape} does not match D'={scene.low_feats.shape[1]}")
    high = scene.low_feats.astype(np.float64) @ lift.A.T + lift.b
    scene.high_feats = high.astype(np.float32)
    scene.feature_dims = (scene.low_feats.shape[1], lift.A.shape[0])
    scene.validate()


def embed_train(scene: GaussianScene, cameras: List[Camera],
                gt_maps: List[FeatureMap], cfg: EmbedConfig,
                seed: int = 0, freeze_affine: bool = False,
                low_init_scale: float = 0.01) -> EmbedResult:
    """Optimize per-Gaussian low-dim features plus the affine lift.

    One uniformly sampled view per iteration; the objective is the mean L1
    error between lifted rendered features and that view's ground-truth map.
    Blending weights per camera are computed once up front (geometry is
    fixed), so each iteration is a pair of sparse matrix products.

    Populates scene.low_feats/high_feats and returns the lift plus the full
    training-loss history.
    """
    if len(cameras) != len(gt_maps):
        raise ConfigError(f"{len(cameras)} cameras but {len(gt_maps)} ground-truth maps")
    if not cameras:
        raise ConfigError("at least one training view is required")
    d_high = cfg.d_high

    def gt_entry(m):
        # ground truth is either an on-table FeatureMap or a raw (H, W, C)
        # array rendered at the configured layer's stride
        if isinstance(m, FeatureMap):
            return m.data.astype(np.float64), m.stride
        from .features import LAYER_TABLE
        return np.asarray(m, dtype=np.float64), LAYER_TABLE[cfg.embed_layer][0]

    entries = [gt_entry(m) for m in gt_maps]
    for cam, (data, stride) in zip(cameras, entries):
        if data.shape[2] != d_high:
            raise ConfigError(f"gt map has {data.shape[2]} channels, config expects {d_high}")
        scaled = scale_camera(cam, stride)
        if (scaled.height, scaled.width) != data.shape[:2]:
            raise ConfigError(
                f"gt map resolution {data.shape[:2]} != camera/{stride} "
                f"= {(scaled.height, scaled.width)}")

    p = scene.num_gaussians
    rng = np.random.default_rng(seed)
    low = rng.uniform(-low_init_scale, low_init_scale, size=(p, cfg.d_low))
    a_mat = rng.uniform(-1.0, 1.0, size=(d_high, cfg.d_low)) / np.sqrt(cfg.d_low)
    b_vec = np.zeros(d_high)

    caches = []
    for cam, (_, stride) in zip(cameras, entries):
        caches.append(compute_cache(scene, scale_camera(cam, stride)))
    gts = [data.reshape(-1, d_high) for data, _ in entries]

    opt_low = Adam([low], lr=cfg.lr_features)
    opt_affine = Adam([a_mat, b_vec], lr=cfg.lr_affine)

    history = np.zeros(cfg.iterations)
    for it in range(cfg.iterations):
        view = int(rng.integers(len(cameras)))
        cache, gt = caches[view], gts[view]
        f_low = cache.matrix @ low                     # (HW, D')
        wsum = cache.weight_sum                        # (HW,)
        lifted = f_low @ a_mat.T + wsum[:, None] * b_vec
        resid = lifted - gt
        history[it] = np.abs(resid).mean()
        g = np.sign(resid) / resid.size                # L1 subgradient, 0 at 0
        grad_low = cache.backward((g @ a_mat).reshape(cache.shape + (cfg.d_low,)))
        opt_low.step([grad_low])
        if not freeze_affine:
            grad_a = g.T @ f_low
            grad_b = g.T @ wsum
            opt_affine.step([grad_a, grad_b])

    scene.low_feats = low.astype(np.float32)
    scene.feature_dims = (cfg.d_low, d_high)
    lift = AffineLift(A=a_mat, b=b_vec)
    lift_gaussians(scene, lift)
    return EmbedResult(lift=lift, loss_history=history, seed=seed)


# ---------------------------------------------------------------------------
# GSAF checkpoint

def save_affine(lift: AffineLift, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    d, d_low = lift.A.shape
    blob = struct.pack("<4sHH", AFFINE_MAGIC, d, d_low)
    blob += lift.A.astype("<f4").tobytes() + lift.b.astype("<f4").tobytes()
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)


def load_affine(path) -> AffineLift:
    data = Path(path).read_bytes()
    head = struct.calcsize("<4sHH")
    if len(data) < head:
        raise ParseError("truncated GSAF header", offset=len(data))
    magic, d, d_low = struct.unpack_from("<4sHH", data, 0)
    if magic != AFFINE_MAGIC:
        raise ParseError(f"bad magic {magic!r}", offset=0)
    need = head + 4 * (d * d_low + d)
    if len(data) != need:
        raise ParseError(f"GSAF size {len(data)} != expected {need}", offset=len(data))
    a = np.frombuffer(data, dtype="<f4", count=d * d_low, offset=head).reshape(d, d_low)
    b = np.frombuffer(data, dtype="<f4", count=d, offset=head + 4 * d * d_low)
    return AffineLift(A=a.astype(np.float64), b=b.astype(np.float64))
