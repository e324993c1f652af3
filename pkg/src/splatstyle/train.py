"""Decoder training: content + style losses through renderer and extractor.

Per iteration, one (style, camera) pair is drawn from seeded streams.  The
cached style-transformed features are decoded to per-Gaussian colors, those
colors are blended into an image with the camera's precomputed weights, and
the image's extracted feature maps are scored against (a) the features of
the rendered original-color view (content) and (b) the style's channel
statistics (style), combined as total = content + lambda * style.

The renderer is linear in the colors and the geometry never moves, so the
whole chain is differentiable in closed form; only decoder parameters are
updated.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .decoder import ConvLayer, KnnDecoder, conv_backward, _conv_forward_ctx, load_decoder
from .errors import ConfigError, ContractError
from .features import LAYER_IDS, LAYER_TABLE, FeatureMap, ToyExtractor
from .optim import Adam
from .render import Camera, compute_cache
from .scene import GaussianScene, KnnIndex
from .style import StyleStats, compute_scene_stats, compute_style_stats, transfer_features


@dataclass
class StyleLossConfig:
    lam: float = 10.0
    loss_layers: Sequence[str] = ("L1", "L2", "L3", "L4")

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError("lambda must be non-negative")
        for lid in self.loss_layers:
            if lid not in LAYER_TABLE:
                raise ConfigError(f"unknown loss layer {lid!r}")


@dataclass
class StylizeTrainConfig:
    iterations: int = 100000
    iterations_initialized: int = 30000
    lr: float = 0.001
    style_set: Optional[list] = None     # list of (H, W, 3) style images
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")


@dataclass
class TrainResult:
    decoder: KnnDecoder
    history: np.ndarray     # (iterations, 3): content, style, total


def _map_data(m) -> np.ndarray:
    return (m.data if isinstance(m, FeatureMap) else np.asarray(m)).astype(np.float64)


def content_loss(stylized_feats: List, content_feats: List) -> float:
    """Mean over layers of the elementwise MSE between feature maps.

    Entries may be FeatureMaps or raw (H, W, C) arrays.
    """
    if len(stylized_feats) != len(content_feats):
        raise ConfigError(f"{len(stylized_feats)} vs {len(content_feats)} layers")
    total = 0.0
    for a, b in zip(stylized_feats, content_feats):
        da, db = _map_data(a), _map_data(b)
        if da.shape != db.shape:
            raise ConfigError(f"layer shape mismatch {da.shape} vs {db.shape}")
        diff = da - db
        total += np.mean(diff * diff)
    return total / len(stylized_feats)


def style_loss(stylized_feats: List, style_stats_per_layer: List[StyleStats]) -> float:
    """Mean over layers of per-channel (mean, std) MSE against the style."""
    if len(stylized_feats) != len(style_stats_per_layer):
        raise ConfigError(f"{len(stylized_feats)} maps vs {len(style_stats_per_layer)} stats")
    total = 0.0
    for fmap, stats in zip(stylized_feats, style_stats_per_layer):
        data = _map_data(fmap)
        c = data.shape[2]
        flat = data.reshape(-1, c)
        if stats.mean.shape[0] != c:
            raise ConfigError(f"stats channels {stats.mean.shape[0]} != map {c}")
        mu = flat.mean(axis=0)
        sd = flat.std(axis=0)
        total += (np.sum((mu - stats.mean) ** 2) + np.sum((sd - stats.std) ** 2)) / c
    return total / len(stylized_feats)


def _loss_grads_for_maps(maps64, content_maps, style_stats, lam, layer_pick):
    """Total loss plus d(total)/d(map) for each selected extractor tap.

    maps64 are the extractor's float64 tap outputs; content targets are
    constant FeatureMaps.
    """
    n_layers = len(layer_pick)
    lc = 0.0
    ls = 0.0
    grads = [None] * len(maps64)
    for j, li in enumerate(layer_pick):
        f = maps64[li]
        t = content_maps[j].data.astype(np.float64)
        diff = f - t
        lc += np.mean(diff * diff)
        g = 2.0 * diff / (diff.size * n_layers)

        c = f.shape[2]
        n = f.shape[0] * f.shape[1]
        flat = f.reshape(n, c)
        mu = flat.mean(axis=0)
        sd = flat.std(axis=0)
        stats = style_stats[j]
        ls += (np.sum((mu - stats.mean) ** 2) + np.sum((sd - stats.std) ** 2)) / c
        g_mu = 2.0 * (mu - stats.mean) / (c * n)
        safe_sd = np.where(sd > 0, sd, 1.0)
        g_sd = np.where(sd > 0, 2.0 * (sd - stats.std) / (c * n * safe_sd), 0.0)
        g_style = (g_mu + g_sd * (flat - mu)).reshape(f.shape) / n_layers
        grads[li] = g + lam * g_style
    return lc / n_layers, ls / n_layers, grads


def pipeline_loss_and_grads(transformed: np.ndarray, decoder: KnnDecoder, knn: KnnIndex,
                            cache, extractor: ToyExtractor,
                            content_maps: List[FeatureMap],
                            style_stats: List[StyleStats],
                            loss_cfg: StyleLossConfig, want_grads: bool = True):
    """One full forward (and optionally backward) pass of the training objective.

    Returns (content, style, total, grads) where grads matches
    decoder.parameters() order ([W1, b1, W2, b2, ...]); grads is None when
    want_grads is False.
    """
    layer_pick = [LAYER_IDS.index(lid) for lid in loss_cfg.loss_layers]
    x = np.asarray(transformed, dtype=np.float64)
    acts = [x]
    ctxs = []
    for layer in decoder.layers:
        x, ctx = _conv_forward_ctx(x, knn, layer)
        acts.append(x)
        ctxs.append(ctx)
    image = cache.composite(acts[-1], background=np.zeros(3))
    maps, ext_ctx = extractor.extract_with_ctx(image)
    lc, ls, map_grads = _loss_grads_for_maps(ext_ctx["maps64"], content_maps, style_stats,
                                             loss_cfg.lam, layer_pick)
    total = lc + loss_cfg.lam * ls
    if not want_grads:
        return lc, ls, total, None
    grad_image = extractor.backward(ext_ctx, map_grads)
    grad_x = cache.backward(grad_image)
    grads: list = [None] * (2 * len(decoder.layers))
    for i in reversed(range(len(decoder.layers))):
        grad_x, gw, gb = conv_backward(acts[i], knn, decoder.layers[i], grad_x, ctx=ctxs[i])
        grads[2 * i] = gw
        grads[2 * i + 1] = gb
    return lc, ls, total, grads


def train_decoder(scene: GaussianScene, cameras: List[Camera], styles: Optional[list],
                  extractor: ToyExtractor, decoder: KnnDecoder,
                  loss_cfg: StyleLossConfig, train_cfg: StylizeTrainConfig,
                  knn: Optional[KnnIndex] = None) -> TrainResult:
    """Train the decoder in place; everything else stays frozen.

    styles may be None when train_cfg.style_set is provided.
    """
    if scene.high_feats is None:
        raise ContractError("scene has no high-dim features; run embedding first")
    if knn is None:
        raise ContractError("a prebuilt KNN index is required")
    if knn.K != decoder.K:
        raise ConfigError(f"knn K={knn.K} != decoder K={decoder.K}")
    style_images = styles if styles is not None else train_cfg.style_set
    if not style_images:
        raise ConfigError("at least one style image is required")
    if not cameras:
        raise ConfigError("at least one training camera is required")
    d = scene.high_feats.shape[1]
    if decoder.layers[0].d_in != d:
        raise ConfigError(f"decoder input {decoder.layers[0].d_in} != scene feature dim {d}")

    # which extractor tap matches the scene's feature dimension (for transfer)
    adain_layer = None
    for lid, (_, c) in LAYER_TABLE.items():
        if c == d:
            adain_layer = lid
    if adain_layer is None:
        raise ConfigError(f"no extractor layer has {d} channels")

    layer_pick = [LAYER_IDS.index(lid) for lid in loss_cfg.loss_layers]
    scene_stats = compute_scene_stats(scene)
    feats = scene.high_feats.astype(np.float64)

    # per-style caches: loss-layer statistics + transformed feature set
    style_stats_by_layer = []
    transformed_sets = []
    for img in style_images:
        maps = extractor.extract(np.asarray(img, dtype=np.float64))
        style_stats_by_layer.append([compute_style_stats(maps[i]) for i in layer_pick])
        embed_stats = compute_style_stats(maps[LAYER_IDS.index(adain_layer)])
        transformed_sets.append(transfer_features(feats, scene_stats, embed_stats))

    # per-camera caches: blending weights + content-feature targets
    caches = [compute_cache(scene, cam) for cam in cameras]
    content_maps_by_cam = []
    for cam, cache in zip(cameras, caches):
        image = cache.composite(scene.colors.astype(np.float64), background=np.zeros(3))
        maps = extractor.extract(image)
        content_maps_by_cam.append([maps[i] for i in layer_pick])

    params = decoder.parameters()
    opt = Adam(params, lr=train_cfg.lr)
    rng = np.random.default_rng(train_cfg.seed)
    history = np.zeros((train_cfg.iterations, 3))
    for it in range(train_cfg.iterations):
        si = int(rng.integers(len(style_images)))
        ci = int(rng.integers(len(cameras)))
        lc, ls, total, grads = pipeline_loss_and_grads(
            transformed_sets[si], decoder, knn, caches[ci], extractor,
            content_maps_by_cam[ci], style_stats_by_layer[si], loss_cfg)
        history[it] = (lc, ls, total)
        opt.step(grads)
    return TrainResult(decoder=decoder, history=history)


def init_decoder_from(source, expected_channels=None, expected_k=None) -> KnnDecoder:
    """Deep-copy a decoder (object or GSDC checkpoint path) for a new scene.

    The copied decoder must match the requested channel schedule and K; a
    mismatch reports both schedules.
    """
    src = source if isinstance(source, KnnDecoder) else load_decoder(source)
    if expected_k is not None and src.K != expected_k:
        raise ConfigError(f"decoder K={src.K} does not match requested K={expected_k} "
                          f"(schedule {src.channel_schedule})")
    if expected_channels is not None:
        want = tuple(expected_channels)
        if src.channel_schedule != want:
            raise ConfigError(f"decoder schedule {src.channel_schedule} does not match "
                              f"requested {want}")
    return src.copy()


def write_loss_csv(history: np.ndarray, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["iteration,content,style,total"]
    for i, (lc, ls, total) in enumerate(history):
        lines.append(f"{i},{lc!r},{ls!r},{total!r}")
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    tmp.replace(path)
