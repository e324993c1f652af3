"""Multi-scale image feature extraction and the GSFM feature-file format.

The built-in extractor is a small deterministic convolution pyramid whose
weights are a pure function of a seed: four taps with the channel/stride
layout of the usual perceptual layers (64/1, 128/2, 256/4, 512/8), clamped
at zero after every convolution so the feature statistics behave like
post-ReLU activations.  Real network features arrive as GSFM files from an
external exporter; this module treats those as opaque ground truth.

The extractor is differentiable: training backpropagates content/style
losses through it to the rendered image.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np

from .errors import ConfigError, ParseError, ValidationError

# layer id -> (stride, channels); closed table, nothing off-table loads
LAYER_TABLE = {
    "L1": (1, 64),
    "L2": (2, 128),
    "L3": (4, 256),
    "L4": (8, 512),
}
LAYER_IDS = ("L1", "L2", "L3", "L4")

FEATURE_MAGIC = b"GSFM"
FEATURE_VERSION = 1


@dataclass
class FeatureMap:
    data: np.ndarray          # (H, W, C) float32
    layer_id: str             # "L1".."L4"
    source: str = "toy"       # "toy" | "external"

    def __post_init__(self):
        if self.layer_id not in LAYER_TABLE:
            raise ValidationError(f"unknown layer id {self.layer_id!r}")
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ValidationError(f"feature map must be HxWxC, got shape {self.data.shape}")
        stride, channels = LAYER_TABLE[self.layer_id]
        if self.data.shape[2] != channels:
            raise ValidationError(
                f"layer {self.layer_id} expects {channels} channels, got {self.data.shape[2]}")
        if not np.isfinite(self.data).all():
            raise ValidationError(f"non-finite values in {self.layer_id} feature map")

    @property
    def stride(self) -> int:
        return LAYER_TABLE[self.layer_id][0]

    @property
    def channels(self) -> int:
        return LAYER_TABLE[self.layer_id][1]


# ---------------------------------------------------------------------------
# convolution helpers (3x3, edge padding so constant inputs stay constant)

def _pad_edge(x):
    return np.pad(x, ((1, 1), (1, 1), (0, 0)), mode="edge")


def _fold_edge_grad(gp):
    """Transpose of edge padding: fold padded-border gradients back inside."""
    g = gp[1:-1, 1:-1].copy()
    g[0, :] += gp[0, 1:-1]
    g[-1, :] += gp[-1, 1:-1]
    g[:, 0] += gp[1:-1, 0]
    g[:, -1] += gp[1:-1, -1]
    g[0, 0] += gp[0, 0]
    g[0, -1] += gp[0, -1]
    g[-1, 0] += gp[-1, 0]
    g[-1, -1] += gp[-1, -1]
    return g


def _im2col(xp, h, w):
    # xp: (H+2, W+2, C) -> (H*W, 9*C), window-major to match kernel layout
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(0, 1))
    # win: (H, W, C, 3, 3) -> (H, W, 3, 3, C)
    win = win.transpose(0, 1, 3, 4, 2)
    return win.reshape(h * w, -1)


def _conv3x3(x, kernel, bias):
    """x: (H, W, Cin); kernel: (Cout, 3, 3, Cin); bias: (Cout,)."""
    h, w, _ = x.shape
    cols = _im2col(_pad_edge(x), h, w)
    kmat = kernel.reshape(kernel.shape[0], -1)
    out = cols @ kmat.T + bias
    return out.reshape(h, w, -1), cols


def _conv3x3_backward_input(grad_out, kernel, shape):
    """Gradient w.r.t. the conv input (edge-padded 3x3, stride 1)."""
    h, w, cin = shape
    kmat = kernel.reshape(kernel.shape[0], -1)
    gcols = grad_out.reshape(h * w, -1) @ kmat          # (H*W, 9*Cin)
    gcols = gcols.reshape(h, w, 3, 3, cin)
    gp = np.zeros((h + 2, w + 2, cin))
    for di in range(3):
        for dj in range(3):
            gp[di:di + h, dj:dj + w] += gcols[:, :, di, dj, :]
    return _fold_edge_grad(gp)


def _avgpool2(x):
    h, w, c = x.shape
    return x.reshape(h // 2, 2, w // 2, 2, c).mean(axis=(1, 3))


def _avgpool2_backward(grad, shape):
    h, w, c = shape
    g = np.repeat(np.repeat(grad, 2, axis=0), 2, axis=1) * 0.25
    return g.reshape(h, w, c)


class ToyExtractor:
    """Deterministic four-tap feature pyramid standing in for a big network.

    Weights are drawn once from ``seed``; extraction is a pure function of
    (seed, image).
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        rng = np.random.default_rng(self.seed)
        chans = [3, 64, 128, 256, 512]
        self.kernels = []
        self.biases = []
        for cin, cout in zip(chans[:-1], chans[1:]):
            k = rng.normal(0.0, 1.0 / np.sqrt(9 * cin), size=(cout, 3, 3, cin))
            b = rng.uniform(-0.1, 0.1, size=cout)
            self.kernels.append(k)
            self.biases.append(b)

    def extract(self, image: np.ndarray) -> List[FeatureMap]:
        """Feature maps at all four taps for an (H, W, 3) image in [0, 1]."""
        maps, _ = self.extract_with_ctx(image)
        return maps

    def extract_with_ctx(self, image: np.ndarray):
        """Like extract(), but also returns the context needed for backward()."""
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 3 or image.shape[2] != 3:
            raise ConfigError(f"expected an HxWx3 image, got shape {image.shape}")
        h, w, _ = image.shape
        if h % 8 or w % 8:
            raise ConfigError(f"image size {h}x{w} must be divisible by 8")
        ctx = {"shapes": [], "cols": [], "masks": [], "maps64": []}
        maps = []
        x = image
        for li, layer_id in enumerate(LAYER_IDS):
            if li > 0:
                ctx["shapes"].append(x.shape)
                x = _avgpool2(x)
            pre, cols = _conv3x3(x, self.kernels[li], self.biases[li])
            mask = pre > 0
            x = np.where(mask, pre, 0.0)
            ctx["cols"].append(cols)
            ctx["masks"].append(mask)
            ctx["maps64"].append(x)           # float64 view for loss gradients
            maps.append(FeatureMap(data=x, layer_id=layer_id, source="toy"))
        return maps, ctx

    def backward(self, ctx, grad_maps: List[Optional[np.ndarray]]) -> np.ndarray:
        """Gradient w.r.t. the input image given per-tap feature-map gradients.

        grad_maps entries may be None for taps that do not receive a loss.
        """
        grad_x = None
        for li in reversed(range(len(LAYER_IDS))):
            mask = ctx["masks"][li]
            h, w, cout = mask.shape
            g = np.zeros((h, w, cout)) if grad_maps[li] is None else \
                np.asarray(grad_maps[li], dtype=np.float64).copy()
            if grad_x is not None:
                g += grad_x
            g = np.where(mask, g, 0.0)
            cin = self.kernels[li].shape[3]
            grad_in = _conv3x3_backward_input(g, self.kernels[li], (h, w, cin))
            if li > 0:
                grad_in = _avgpool2_backward(grad_in, ctx["shapes"][li - 1])
            grad_x = grad_in
        return grad_x

    def extract_layer(self, image: np.ndarray, layer_id: str) -> FeatureMap:
        idx = LAYER_IDS.index(layer_id)
        return self.extract(image)[idx]


# ---------------------------------------------------------------------------
# GSFM feature files

def save_feature_map(fmap: FeatureMap, path):
    """Write one feature map as a GSFM file (header + f32 payload + CRC32)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    h, w, c = fmap.data.shape
    layer_num = LAYER_IDS.index(fmap.layer_id) + 1
    header = struct.pack("<4sHBBHII", FEATURE_MAGIC, FEATURE_VERSION,
                         layer_num, fmap.stride, c, h, w)
    payload = fmap.data.astype("<f4").tobytes()
    crc = zlib.crc32(header + payload) & 0xFFFFFFFF
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(header + payload + struct.pack("<I", crc))
    tmp.replace(path)


def feature_map_crc(path) -> int:
    """CRC32 stored in a GSFM file (the cross-component checksum)."""
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise ParseError("file too short for a GSFM trailer", offset=len(data))
    return struct.unpack("<I", data[-4:])[0]


def load_feature_map(path) -> FeatureMap:
    path = Path(path)
    data = path.read_bytes()
    head_size = struct.calcsize("<4sHBBHII")
    if len(data) < head_size + 4:
        raise ParseError("truncated GSFM header", offset=len(data))
    magic, version, layer_num, stride, c, h, w = struct.unpack_from("<4sHBBHII", data, 0)
    if magic != FEATURE_MAGIC:
        raise ParseError(f"bad magic {magic!r}", offset=0)
    if version != FEATURE_VERSION:
        raise ParseError(f"unsupported GSFM version {version}", offset=4)
    if not 1 <= layer_num <= 4:
        raise ParseError(f"layer id {layer_num} out of range", offset=6)
    layer_id = LAYER_IDS[layer_num - 1]
    want_stride, want_c = LAYER_TABLE[layer_id]
    if stride != want_stride or c != want_c:
        raise ValidationError(
            f"header (layer {layer_id}, stride {stride}, channels {c}) violates the layer table")
    need = head_size + 4 * h * w * c + 4
    if len(data) != need:
        raise ParseError(f"GSFM payload size {len(data)} != expected {need}", offset=len(data))
    stored_crc = struct.unpack("<I", data[-4:])[0]
    actual = zlib.crc32(data[:-4]) & 0xFFFFFFFF
    if stored_crc != actual:
        raise ValidationError(f"GSFM checksum mismatch: stored {stored_crc:#x}, actual {actual:#x}")
    arr = np.frombuffer(data, dtype="<f4", count=h * w * c, offset=head_size).reshape(h, w, c)
    return FeatureMap(data=arr.copy(), layer_id=layer_id, source="external")
