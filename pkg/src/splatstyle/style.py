"""Zero-shot feature transfer: statistic alignment plus style interpolation.

Transfer re-normalizes every Gaussian's high-dim feature so the population
channel-wise mean/std over the whole Gaussian set match the style image's
feature statistics.  It is parameter-free, runs once per style, and writes
only the transformed-feature channel.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence

import numpy as np

from . import counters
from .errors import ConfigError, ContractError, ParseError
from .features import FeatureMap
from .scene import GaussianScene

EPS = 1e-8
STATS_MAGIC = b"GSST"


@dataclass
class StyleStats:
    mean: np.ndarray      # (D,)
    std: np.ndarray       # (D,) non-negative, population convention
    source_id: str

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise ConfigError(f"stats shapes {self.mean.shape}/{self.std.shape} mismatch")
        if not (np.isfinite(self.mean).all() and np.isfinite(self.std).all()):
            raise ConfigError("non-finite style statistics")
        if (self.std < 0).any():
            raise ConfigError("negative std in style statistics")


@dataclass
class SceneFeatureStats:
    mean: np.ndarray
    std: np.ndarray


def compute_style_stats(style_map) -> StyleStats:
    """Channel-wise population mean/std over all spatial positions.

    Accepts a FeatureMap or a raw (H, W, C) array.
    """
    raw = style_map.data if isinstance(style_map, FeatureMap) else np.asarray(style_map)
    data = raw.astype(np.float64)
    if data.ndim != 3 or data.shape[0] * data.shape[1] == 0:
        raise ConfigError(f"style feature map must be non-empty HxWxC, got {data.shape}")
    flat = data.reshape(-1, data.shape[2])
    source_id = hashlib.sha256(np.ascontiguousarray(raw).tobytes()).hexdigest()
    return StyleStats(mean=flat.mean(axis=0), std=flat.std(axis=0), source_id=source_id)


def compute_scene_stats(scene: GaussianScene) -> SceneFeatureStats:
    """Channel-wise population mean/std over all P Gaussians' high-dim features."""
    if scene.high_feats is None:
        raise ContractError("high_feat is not populated; embed the scene first")
    feats = scene.high_feats.astype(np.float64)
    return SceneFeatureStats(mean=feats.mean(axis=0), std=feats.std(axis=0))


def transfer_features(feats: np.ndarray, scene_stats: SceneFeatureStats,
                      style: StyleStats) -> np.ndarray:
    """Statistic alignment on a raw (P, D) feature block.

    f_t = std_s * (f - mean_scene) / max(std_scene, eps) + mean_s, per channel.
    Channels with zero scene spread collapse to the style mean exactly.
    """
    feats = np.asarray(feats, dtype=np.float64)
    denom = np.maximum(scene_stats.std, EPS)
    return style.std * (feats - scene_stats.mean) / denom + style.mean


def adain_transfer(scene: GaussianScene, style: StyleStats):
    """Populate transformed_feat by aligning scene feature stats to the style."""
    if scene.high_feats is None:
        raise ContractError("high_feat is not populated; embed the scene first")
    feats = scene.high_feats.astype(np.float64)
    if style.mean.shape[0] != feats.shape[1]:
        raise ConfigError(f"style stats have {style.mean.shape[0]} channels, "
                          f"scene features have {feats.shape[1]}")
    counters.bump("adain_transfer")
    transformed = transfer_features(feats, compute_scene_stats(scene), style)
    scene.transformed_feats = transformed.astype(np.float32)
    scene.validate()


def interpolate_styles(feature_sets: Sequence[np.ndarray], weights: Sequence[float]) -> np.ndarray:
    """Convex blend of transformed feature sets (each (P, D))."""
    if len(feature_sets) != len(weights):
        raise ConfigError(f"{len(feature_sets)} sets but {len(weights)} weights")
    if len(feature_sets) == 0:
        raise ConfigError("at least one feature set is required")
    weights = [float(w) for w in weights]
    if any(w < 0 for w in weights):
        raise ConfigError("interpolation weights must be non-negative")
    if abs(sum(weights) - 1.0) > 1e-6:
        raise ConfigError(f"interpolation weights sum to {sum(weights)}, expected 1")
    shape = np.asarray(feature_sets[0]).shape
    for s in feature_sets[1:]:
        if np.asarray(s).shape != shape:
            raise ConfigError(f"feature set shape {np.asarray(s).shape} != {shape}")
    out = None
    for w, s in zip(weights, feature_sets):
        if w == 0.0:
            continue
        term = w * np.asarray(s)
        out = term if out is None else out + term
    return out if out is not None else np.zeros(shape)


# ---------------------------------------------------------------------------
# GSST stats files

def save_style_stats(stats: StyleStats, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    d = stats.mean.shape[0]
    digest = bytes.fromhex(stats.source_id) if len(stats.source_id) == 64 else \
        hashlib.sha256(stats.source_id.encode()).digest()
    blob = struct.pack("<4sH", STATS_MAGIC, d)
    blob += stats.mean.astype("<f4").tobytes() + stats.std.astype("<f4").tobytes() + digest
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)


def load_style_stats(path) -> StyleStats:
    data = Path(path).read_bytes()
    head = struct.calcsize("<4sH")
    if len(data) < head:
        raise ParseError("truncated GSST header", offset=len(data))
    magic, d = struct.unpack_from("<4sH", data, 0)
    if magic != STATS_MAGIC:
        raise ParseError(f"bad magic {magic!r}", offset=0)
    need = head + 8 * d + 32
    if len(data) != need:
        raise ParseError(f"GSST size {len(data)} != expected {need}", offset=len(data))
    mean = np.frombuffer(data, dtype="<f4", count=d, offset=head)
    std = np.frombuffer(data, dtype="<f4", count=d, offset=head + 4 * d)
    digest = data[head + 8 * d:]
    return StyleStats(mean=mean.astype(np.float64), std=std.astype(np.float64),
                      source_id=digest.hex())
