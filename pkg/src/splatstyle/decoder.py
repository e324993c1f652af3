"""KNN-based 3D convolution decoder: transformed features -> stylized RGB.

Each Gaussian's sliding window is its K nearest neighbors (self first).
A layer owns one weight matrix per neighbor rank plus a bias:

    out[p] = sigmoid( sum_k W_k @ feats[knn[p][k]] + B )

The same operation is computed two ways: a per-window loop (the defining
form) and a batched gather/matmul (the fast form); they must agree.  The
decoder runs entirely in 3D, so decoded colors are camera-independent by
construction.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import counters
from .errors import ConfigError, ContractError, ParseError
from .scene import GaussianScene, KnnIndex

DECODER_MAGIC = b"GSDC"
DECODER_VERSION = 1
DEFAULT_CHANNELS = (256, 128, 64, 32, 3)
DEFAULT_K = 8

_ACTIVATIONS = ("sigmoid",)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class ConvLayer:
    weights: np.ndarray    # (K, D_out, D_in)
    bias: np.ndarray       # (D_out,)
    activation: str = "sigmoid"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 3:
            raise ConfigError(f"weights must be (K, D_out, D_in), got {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[1],):
            raise ConfigError(f"bias shape {self.bias.shape} != ({self.weights.shape[1]},)")
        if self.activation not in _ACTIVATIONS:
            raise ConfigError(f"unsupported activation {self.activation!r}")
        if not (np.isfinite(self.weights).all() and np.isfinite(self.bias).all()):
            raise ConfigError("layer has non-finite parameters")

    @property
    def K(self) -> int:
        return self.weights.shape[0]

    @property
    def d_out(self) -> int:
        return self.weights.shape[1]

    @property
    def d_in(self) -> int:
        return self.weights.shape[2]

    def flat_weights(self) -> np.ndarray:
        """(D_out, K*D_in) matrix whose block k matches neighbor rank k."""
        k, dout, din = self.weights.shape
        return self.weights.transpose(1, 0, 2).reshape(dout, k * din)


class KnnDecoder:
    """Stack of KNN convolutions ending in 3 output channels."""

    def __init__(self, layers: Sequence[ConvLayer]):
        self.layers = list(layers)
        if not self.layers:
            raise ConfigError("decoder needs at least one layer")
        k = self.layers[0].K
        for i, layer in enumerate(self.layers):
            if layer.K != k:
                raise ConfigError(f"layer {i} has K={layer.K}, expected {k}")
            if i > 0 and layer.d_in != self.layers[i - 1].d_out:
                raise ConfigError(
                    f"layer {i} input {layer.d_in} != layer {i-1} output {self.layers[i-1].d_out}")
        if self.layers[-1].d_out != 3:
            raise ConfigError(f"final layer must output 3 channels, got {self.layers[-1].d_out}")
        self.K = k

    @property
    def channel_schedule(self):
        return (self.layers[0].d_in,) + tuple(layer.d_out for layer in self.layers)

    @staticmethod
    def create(d_in: int = DEFAULT_CHANNELS[0], channels: Sequence[int] = DEFAULT_CHANNELS,
               K: int = DEFAULT_K, seed: int = 0) -> "KnnDecoder":
        """Fresh decoder with uniform(-s, s) init, s = 1/sqrt(K * D_in) per layer."""
        rng = np.random.default_rng(seed)
        layers = []
        prev = d_in
        for dout in channels:
            s = 1.0 / np.sqrt(K * prev)
            layers.append(ConvLayer(
                weights=rng.uniform(-s, s, size=(K, dout, prev)),
                bias=rng.uniform(-s, s, size=dout)))
            prev = dout
        return KnnDecoder(layers)

    def copy(self) -> "KnnDecoder":
        return KnnDecoder([ConvLayer(weights=l.weights.copy(), bias=l.bias.copy(),
                                     activation=l.activation) for l in self.layers])

    def parameters(self):
        out = []
        for layer in self.layers:
            out.extend([layer.weights, layer.bias])
        return out


def conv_forward_naive(feats: np.ndarray, knn: KnnIndex, layer: ConvLayer) -> np.ndarray:
    """Per-window form: loop every Gaussian, sum W_k over its neighbor ranks."""
    if knn.K != layer.K:
        raise ConfigError(f"knn K={knn.K} != layer K={layer.K}")
    feats = np.asarray(feats, dtype=np.float64)
    if feats.shape != (knn.num_points, layer.d_in):
        raise ConfigError(f"feats shape {feats.shape} != {(knn.num_points, layer.d_in)}")
    out = np.empty((knn.num_points, layer.d_out))
    for p in range(knn.num_points):
        acc = layer.bias.copy()
        for k in range(layer.K):
            acc += layer.weights[k] @ feats[knn.neighbors[p, k]]
        out[p] = acc
    return _sigmoid(out)


def conv_forward_fast(feats: np.ndarray, knn: KnnIndex, layer: ConvLayer) -> np.ndarray:
    out, _ = _conv_forward_ctx(feats, knn, layer)
    return out


def _conv_forward_ctx(feats, knn, layer):
    """Batched form: gather neighbors to (P, K*D_in), one matmul, bias, sigmoid."""
    if knn.K != layer.K:
        raise ConfigError(f"knn K={knn.K} != layer K={layer.K}")
    feats = np.asarray(feats, dtype=np.float64)
    if feats.shape != (knn.num_points, layer.d_in):
        raise ConfigError(f"feats shape {feats.shape} != {(knn.num_points, layer.d_in)}")
    gathered = feats[knn.neighbors].reshape(knn.num_points, layer.K * layer.d_in)
    pre = gathered @ layer.flat_weights().T + layer.bias
    out = _sigmoid(pre)
    return out, (gathered, out)


def conv_backward(feats: np.ndarray, knn: KnnIndex, layer: ConvLayer,
                  grad_out: np.ndarray, ctx=None):
    """Exact gradients of the fast form.

    Returns (grad_feats (P, D_in), grad_weights (K, D_out, D_in), grad_bias).
    The neighbor-gather transpose is a scatter-add, accumulated in a fixed
    order so repeated runs are bitwise identical.
    """
    if ctx is None:
        _, ctx = _conv_forward_ctx(feats, knn, layer)
    gathered, out = ctx
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != out.shape:
        raise ConfigError(f"grad_out shape {grad_out.shape} != {out.shape}")
    grad_pre = grad_out * out * (1.0 - out)
    grad_flat_w = grad_pre.T @ gathered                      # (D_out, K*D_in)
    grad_weights = grad_flat_w.reshape(layer.d_out, layer.K, layer.d_in).transpose(1, 0, 2)
    grad_bias = grad_pre.sum(axis=0)
    grad_gather = (grad_pre @ layer.flat_weights()).reshape(
        knn.num_points, layer.K, layer.d_in)
    order, starts = knn.scatter_plan()
    flat = grad_gather.reshape(knn.num_points * layer.K, layer.d_in)[order]
    grad_feats = np.add.reduceat(flat, starts, axis=0)
    return grad_feats, grad_weights, grad_bias


def decode(scene: GaussianScene, decoder: KnnDecoder, knn: KnnIndex):
    """Populate styled_color from transformed features. Camera-free."""
    if scene.transformed_feats is None:
        raise ContractError("transformed_feat is not populated; run a style transfer first")
    if decoder.layers[0].d_in != scene.transformed_feats.shape[1]:
        raise ConfigError(f"decoder expects D={decoder.layers[0].d_in} inputs, "
                          f"scene has D={scene.transformed_feats.shape[1]}")
    counters.bump("decode")
    x = scene.transformed_feats.astype(np.float64)
    for layer in decoder.layers:
        x = conv_forward_fast(x, knn, layer)
    styled = x.astype(np.float32)
    # keep colors strictly inside (0, 1) after float32 rounding
    lo = np.nextafter(np.float32(0), np.float32(1))
    hi = np.nextafter(np.float32(1), np.float32(0))
    scene.styled_colors = np.clip(styled, lo, hi)
    scene.validate()


# ---------------------------------------------------------------------------
# GSDC checkpoints (scene-independent, reusable across scenes)

def save_decoder(decoder: KnnDecoder, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    parts = [struct.pack("<4sHHH", DECODER_MAGIC, DECODER_VERSION,
                         decoder.K, len(decoder.layers))]
    for layer in decoder.layers:
        act = _ACTIVATIONS.index(layer.activation)
        parts.append(struct.pack("<HHB", layer.d_in, layer.d_out, act))
        parts.append(layer.weights.astype("<f4").tobytes())
        parts.append(layer.bias.astype("<f4").tobytes())
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def load_decoder(path) -> KnnDecoder:
    data = Path(path).read_bytes()
    head = struct.calcsize("<4sHHH")
    if len(data) < head:
        raise ParseError("truncated GSDC header", offset=len(data))
    magic, version, k, n_layers = struct.unpack_from("<4sHHH", data, 0)
    if magic != DECODER_MAGIC:
        raise ParseError(f"bad magic {magic!r}", offset=0)
    if version != DECODER_VERSION:
        raise ParseError(f"unsupported GSDC version {version}", offset=4)
    offset = head
    layers = []
    for _ in range(n_layers):
        lh = struct.calcsize("<HHB")
        if offset + lh > len(data):
            raise ParseError("truncated GSDC layer header", offset=offset)
        d_in, d_out, act = struct.unpack_from("<HHB", data, offset)
        offset += lh
        if act >= len(_ACTIVATIONS):
            raise ParseError(f"unknown activation tag {act}", offset=offset - 1)
        nw = k * d_out * d_in
        if offset + 4 * (nw + d_out) > len(data):
            raise ParseError("truncated GSDC layer payload", offset=offset)
        weights = np.frombuffer(data, dtype="<f4", count=nw, offset=offset).reshape(k, d_out, d_in)
        offset += 4 * nw
        bias = np.frombuffer(data, dtype="<f4", count=d_out, offset=offset)
        offset += 4 * d_out
        layers.append(ConvLayer(weights=weights.astype(np.float64),
                                bias=bias.astype(np.float64),
                                activation=_ACTIVATIONS[act]))
    if offset != len(data):
        raise ParseError("trailing bytes after GSDC payload", offset=offset)
    return KnnDecoder(layers)
