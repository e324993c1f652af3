"""Differentiable forward splatting of per-Gaussian channels to images.

Gaussians are projected with the standard EWA approximation (perspective
Jacobian at the mean), sorted globally front-to-back by camera-space depth
(ties by index), and alpha-composited per pixel.  The composite is linear
in the channel values, so the backward pass w.r.t. a channel is exactly
the cached blending weights transposed.

Geometry is fixed throughout stylization, so the per-pixel weights for a
camera can be computed once and reused as a sparse linear map; training
loops lean on that through ``RenderOutput.cache``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, ContractError, ValidationError
from .scene import GaussianScene, Gaussian, quat_to_matrix, scene_covariances

BLUR_FLOOR = 0.3          # px^2 added to the 2D covariance diagonal
ALPHA_MAX = 0.999
ALPHA_MIN = 1.0 / 255.0   # per-splat contribution cutoff
STOP_TRANSMITTANCE = 1e-4  # per-pixel traversal early-out
FOOTPRINT_SIGMA = 3.0


@dataclass(frozen=True)
class Camera:
    """Pinhole intrinsics plus a rigid world-to-camera pose."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray      # (3, 3) world-to-camera
    translation: np.ndarray   # (3,)
    near_clip: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValidationError("viewport must be at least 1x1")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-6:
            raise ValidationError(f"camera rotation not orthonormal (residual {err:.2e})")

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "rotation": self.rotation.reshape(-1).tolist(),
            "translation": self.translation.tolist(),
            "near_clip": self.near_clip,
        }

    @staticmethod
    def from_dict(d: dict) -> "Camera":
        return Camera(
            fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]), cy=float(d["cy"]),
            width=int(d["width"]), height=int(d["height"]),
            rotation=np.asarray(d["rotation"], dtype=np.float64).reshape(3, 3),
            translation=np.asarray(d["translation"], dtype=np.float64),
            near_clip=float(d.get("near_clip", 0.01)),
        )


def scale_camera(cam: Camera, stride: int) -> Camera:
    """Camera for rendering at 1/stride resolution (half-pixel-center convention:
    all intrinsics divide by the stride)."""
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    if stride == 1:
        return cam
    if cam.width % stride or cam.height % stride:
        warnings.warn(f"viewport {cam.width}x{cam.height} not divisible by stride "
                      f"{stride}; flooring", RuntimeWarning)
    return Camera(fx=cam.fx / stride, fy=cam.fy / stride,
                  cx=cam.cx / stride, cy=cam.cy / stride,
                  width=cam.width // stride, height=cam.height // stride,
                  rotation=cam.rotation, translation=cam.translation,
                  near_clip=cam.near_clip)


@dataclass
class SplatProjection:
    mean2d: np.ndarray    # (2,) pixels
    cov2d: np.ndarray     # (2, 2) pixels^2, blur floor included
    depth: float          # camera-frame z
    radius: float         # 3-sigma extent in pixels


def _project_arrays(scene: GaussianScene, cam: Camera):
    """Vectorized projection of all Gaussians.

    Returns (mean2d (P,2), cov2d packed (P,3) as [a,b,c], depth (P,), radius (P,),
    in_front (P,) bool).  The blur floor is already added.
    """
    means = scene.means.astype(np.float64)
    xc = means @ cam.rotation.T + cam.translation
    z = xc[:, 2]
    in_front = z > cam.near_clip
    zs = np.where(in_front, z, 1.0)  # placeholder to keep the math finite

    u = cam.fx * xc[:, 0] / zs + cam.cx
    v = cam.fy * xc[:, 1] / zs + cam.cy
    mean2d = np.stack([u, v], axis=1)

    sigma = scene_covariances(scene)                      # (P,3,3) world
    sig_cam = np.einsum("ij,pjk,lk->pil", cam.rotation, sigma, cam.rotation)
    j = np.zeros((means.shape[0], 2, 3))
    j[:, 0, 0] = cam.fx / zs
    j[:, 0, 2] = -cam.fx * xc[:, 0] / zs**2
    j[:, 1, 1] = cam.fy / zs
    j[:, 1, 2] = -cam.fy * xc[:, 1] / zs**2
    cov = np.einsum("pij,pjk,plk->pil", j, sig_cam, j)
    a = cov[:, 0, 0] + BLUR_FLOOR
    b = cov[:, 0, 1]
    c = cov[:, 1, 1] + BLUR_FLOOR
    # largest eigenvalue of [[a,b],[b,c]]
    lam = 0.5 * (a + c) + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    radius = FOOTPRINT_SIGMA * np.sqrt(lam)
    return mean2d, np.stack([a, b, c], axis=1), z, radius, in_front


def project(g: Gaussian, cam: Camera) -> Optional[SplatProjection]:
    """Project one Gaussian; returns None when culled (behind the near plane
    or 3-sigma footprint outside the viewport)."""
    tiny = GaussianScene(means=g.mean[None], scales=g.scale[None],
                         rotations=g.rotation[None], opacities=np.array([g.opacity]),
                         colors=g.color[None])
    mean2d, cov, z, radius, in_front = _project_arrays(tiny, cam)
    if not in_front[0]:
        return None
    u, v = mean2d[0]
    r = radius[0]
    if u + r < 0 or u - r > cam.width or v + r < 0 or v - r > cam.height:
        return None
    a, b, c = cov[0]
    return SplatProjection(mean2d=mean2d[0], cov2d=np.array([[a, b], [b, c]]),
                           depth=float(z[0]), radius=float(r))


def alpha_at(proj: SplatProjection, opacity: float, pixel) -> float:
    """Opacity-scaled Gaussian falloff at a pixel, clamped to 0.999."""
    d = np.asarray(pixel, dtype=np.float64) - proj.mean2d
    a, b = proj.cov2d[0]
    c = proj.cov2d[1, 1]
    det = a * c - b * b
    q = (c * d[0] ** 2 - 2.0 * b * d[0] * d[1] + a * d[1] ** 2) / det
    return float(min(opacity * np.exp(-0.5 * q), ALPHA_MAX))


@dataclass
class SplatCache:
    """Per-pixel blending weights of one render, in front-to-back order.

    Entries are grouped contiguously by Gaussian (in global depth order);
    within any one pixel the entry order is therefore front-to-back.
    """

    pixel_idx: np.ndarray    # (E,) int64, flattened row-major pixel index
    gauss_idx: np.ndarray    # (E,) int32
    weights: np.ndarray      # (E,) float64
    run_starts: np.ndarray   # (R+1,) int64, contiguous runs per gaussian
    run_gauss: np.ndarray    # (R,) int32
    shape: tuple             # (H, W)
    num_gaussians: int
    weight_sum: np.ndarray   # (H*W,) float64
    depths: np.ndarray       # (P,) camera-frame z per gaussian
    _matrix: Optional[sp.csr_matrix] = field(default=None, repr=False)

    @property
    def matrix(self) -> sp.csr_matrix:
        """(H*W, P) sparse blending-weight matrix."""
        if self._matrix is None:
            h, w = self.shape
            self._matrix = sp.csr_matrix(
                (self.weights, (self.pixel_idx, self.gauss_idx)),
                shape=(h * w, self.num_gaussians))
        return self._matrix

    def composite(self, values: np.ndarray, background=None) -> np.ndarray:
        """Blend per-Gaussian values (P, C) into an (H, W, C) image."""
        values = np.asarray(values, dtype=np.float64)
        flat = self.matrix @ values
        if background is not None:
            bg = np.asarray(background, dtype=np.float64).reshape(1, -1)
            flat = flat + (1.0 - self.weight_sum)[:, None] * bg
        h, w = self.shape
        return flat.reshape(h, w, values.shape[1])

    def backward(self, grad_image: np.ndarray) -> np.ndarray:
        """Transpose of composite: (H, W, C) pixel grads -> (P, C) value grads.

        Accumulation happens run-by-run in a fixed order, so results are
        bitwise reproducible.
        """
        h, w = self.shape
        grad_flat = np.asarray(grad_image, dtype=np.float64).reshape(h * w, -1)
        grads = np.zeros((self.num_gaussians, grad_flat.shape[1]))
        if len(self.weights) == 0:
            return grads
        contrib = self.weights[:, None] * grad_flat[self.pixel_idx]
        sums = np.add.reduceat(contrib, self.run_starts[:-1], axis=0)
        grads[self.run_gauss] = sums
        return grads

    def per_pixel_lists(self):
        """List of (gauss_idx, weight) arrays per flattened pixel, front-to-back."""
        order = np.argsort(self.pixel_idx, kind="stable")
        px = self.pixel_idx[order]
        starts = np.searchsorted(px, np.arange(self.shape[0] * self.shape[1] + 1))
        g = self.gauss_idx[order]
        ws = self.weights[order]
        return [(g[s:e], ws[s:e]) for s, e in zip(starts[:-1], starts[1:])]


@dataclass
class RenderOutput:
    image: np.ndarray        # (H, W, C)
    weight_sum: np.ndarray   # (H, W)
    depth_map: np.ndarray    # (H, W), weight-blended camera-space z
    cache: Optional[SplatCache]
    channel: str
    background: np.ndarray


_CHANNELS = ("color", "low_feat", "styled_color", "depth")


def render(scene: GaussianScene, cam: Camera, channel: str = "color",
           background=None, exact: bool = False,
           retain_cache: bool = True) -> RenderOutput:
    """Forward-splat one channel of the scene through a camera.

    Per pixel, Gaussians are composited front-to-back with weights
    w_i = alpha_i * prod_{j<i} (1 - alpha_j); remaining transmittance
    multiplies the background.  With ``exact=True`` every skip threshold
    (footprint bound, alpha cutoff, transmittance early-out) is disabled so
    the result matches a brute-force per-pixel loop to float precision.
    """
    if channel not in _CHANNELS:
        raise ConfigError(f"unknown channel {channel!r}; expected one of {_CHANNELS}")
    if channel == "depth":
        values = None  # filled from projected depths below
        c_dim = 1
    else:
        values = scene.channel(channel)
        if values is None:
            raise ContractError(f"channel {channel!r} is not populated on this scene")
        values = values.astype(np.float64)
        c_dim = values.shape[1]
    if background is None:
        background = np.zeros(c_dim)
    background = np.asarray(background, dtype=np.float64).reshape(c_dim)

    h, w = cam.height, cam.width
    mean2d, cov, depth, radius, in_front = _project_arrays(scene, cam)
    if channel == "depth":
        values = depth[:, None].copy()

    keep = in_front.copy()
    if not exact:
        u, v = mean2d[:, 0], mean2d[:, 1]
        keep &= (u + radius >= 0) & (u - radius <= w) & (v + radius >= 0) & (v - radius <= h)
    idx = np.nonzero(keep)[0]
    order = idx[np.lexsort((idx, depth[idx]))]   # front-to-back, ties by index

    image = np.zeros((h * w, c_dim))
    wsum = np.zeros(h * w)
    dmap = np.zeros(h * w)
    trans = np.ones(h * w)
    ent_px, ent_g, ent_w = [], [], []
    run_gauss, run_len = [], []

    ys = np.arange(h) + 0.5
    xs = np.arange(w) + 0.5
    opac = scene.opacities.astype(np.float64)

    for g in order:
        a, b, c = cov[g]
        det = a * c - b * b
        u, v = mean2d[g]
        if exact:
            x0, x1, y0, y1 = 0, w, 0, h
        else:
            r = radius[g]
            x0 = max(int(np.floor(u - r)), 0)
            x1 = min(int(np.ceil(u + r)) + 1, w)
            y0 = max(int(np.floor(v - r)), 0)
            y1 = min(int(np.ceil(v + r)) + 1, h)
            if x0 >= x1 or y0 >= y1:
                continue
        dx = xs[x0:x1] - u                      # (bw,)
        dy = ys[y0:y1] - v                      # (bh,)
        q = (c * dx[None, :] ** 2 - 2.0 * b * dy[:, None] * dx[None, :]
             + a * dy[:, None] ** 2) / det
        alpha = np.minimum(opac[g] * np.exp(-0.5 * q), ALPHA_MAX).ravel()

        cols = np.tile(np.arange(x0, x1), y1 - y0)
        rows = np.repeat(np.arange(y0, y1), x1 - x0)
        flat = rows * w + cols
        t_here = trans[flat]
        if exact:
            active = np.ones(alpha.shape, dtype=bool)
        else:
            active = (alpha >= ALPHA_MIN) & (t_here >= STOP_TRANSMITTANCE)
        if not active.any():
            continue
        flat_a = flat[active]
        alpha_a = alpha[active]
        w_contrib = alpha_a * t_here[active]
        image[flat_a] += w_contrib[:, None] * values[g]
        wsum[flat_a] += w_contrib
        dmap[flat_a] += w_contrib * depth[g]
        trans[flat_a] = t_here[active] * (1.0 - alpha_a)
        if retain_cache:
            ent_px.append(flat_a)
            ent_g.append(np.full(len(flat_a), g, dtype=np.int32))
            ent_w.append(w_contrib)
            run_gauss.append(g)
            run_len.append(len(flat_a))

    image += trans[:, None] * background[None, :]

    cache = None
    if retain_cache:
        if ent_px:
            pixel_idx = np.concatenate(ent_px)
            gauss_idx = np.concatenate(ent_g)
            weights = np.concatenate(ent_w)
        else:
            pixel_idx = np.empty(0, dtype=np.int64)
            gauss_idx = np.empty(0, dtype=np.int32)
            weights = np.empty(0)
        starts = np.concatenate([[0], np.cumsum(run_len)]).astype(np.int64)
        cache = SplatCache(pixel_idx=pixel_idx.astype(np.int64), gauss_idx=gauss_idx,
                           weights=weights, run_starts=starts,
                           run_gauss=np.asarray(run_gauss, dtype=np.int32),
                           shape=(h, w), num_gaussians=scene.num_gaussians,
                           weight_sum=wsum.copy(), depths=depth)
    return RenderOutput(image=image.reshape(h, w, c_dim),
                        weight_sum=wsum.reshape(h, w),
                        depth_map=dmap.reshape(h, w),
                        cache=cache, channel=channel, background=background)


def backward_channel(out: RenderOutput, grad_image: np.ndarray) -> np.ndarray:
    """Gradient of the rendered image w.r.t. per-Gaussian channel values.

    The composite is linear in the channel, so grad[g] is the weight-weighted
    sum of pixel gradients over the cached contributions of g.
    """
    if out.cache is None:
        raise ContractError("render cache was not retained; cannot backpropagate")
    h, w = out.cache.shape
    grad_image = np.asarray(grad_image, dtype=np.float64)
    if grad_image.shape[:2] != (h, w):
        raise ConfigError(f"grad_image shape {grad_image.shape} does not match render {(h, w)}")
    return out.cache.backward(grad_image)


def compute_cache(scene: GaussianScene, cam: Camera) -> SplatCache:
    """Blending weights of a camera against fixed geometry (channel-agnostic)."""
    return render(scene, cam, channel="depth", retain_cache=True).cache
