"""Shared scene/camera builders and independent oracles for the test suite.

Oracles here deliberately avoid the package's own math: rotations go through
scipy, projection and compositing are written out longhand.
"""

import numpy as np
from scipy.spatial.transform import Rotation

from splatstyle.scene import GaussianScene
from splatstyle.render import Camera, BLUR_FLOOR, ALPHA_MAX


def random_scene(rng, p, box=1.0, scale_range=(0.02, 0.08), opacity_range=(0.3, 0.95),
                 d_low=None, d_high=None, center=(0.0, 0.0, 0.0)):
    means = rng.uniform(-box, box, size=(p, 3)) + np.asarray(center)
    scales = rng.uniform(*scale_range, size=(p, 3))
    quats = rng.normal(size=(p, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    opac = rng.uniform(*opacity_range, size=p)
    colors = rng.uniform(0.0, 1.0, size=(p, 3))
    kw = {}
    dims = [32, 256]
    if d_low is not None:
        kw["low_feats"] = rng.normal(size=(p, d_low)).astype(np.float32)
        dims[0] = d_low
    if d_high is not None:
        kw["high_feats"] = rng.normal(size=(p, d_high)).astype(np.float32)
        dims[1] = d_high
    return GaussianScene(means=means, scales=scales, rotations=quats,
                         opacities=opac, colors=colors, feature_dims=tuple(dims), **kw)


def covered_scene(rng, p, box=0.5, d_low=None, d_high=None):
    """Dense blob that fills a tightly framed orbit view (see covered_cameras).

    Mirrors real captures, where every pixel of every training view sees
    scene content; the optimization objectives assume that.
    """
    return random_scene(rng, p, box=box, scale_range=(0.08, 0.2),
                        opacity_range=(0.7, 0.95), d_low=d_low, d_high=d_high)


def covered_cameras(n, width=32, height=32, radius=2.0, arc=None, start=0.0):
    """Cameras whose frustum stays inside the covered_scene blob's silhouette."""
    return orbit_cameras(n, radius=radius, width=width, height=height,
                         fx=1.6 * width, arc=arc, start=start)


def look_at_camera(eye, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0),
                   width=32, height=32, fx=None, near_clip=0.01):
    """World-to-camera pose looking from eye toward target, +z forward."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    fwd = target - eye
    fwd = fwd / np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-8:
        right = np.cross(fwd, np.array([1.0, 0.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])           # rows: camera axes in world
    t = -rot @ eye
    if fx is None:
        fx = 0.8 * width
    return Camera(fx=fx, fy=fx, cx=width / 2.0, cy=height / 2.0,
                  width=width, height=height, rotation=rot, translation=t,
                  near_clip=near_clip)


def orbit_cameras(n, radius=3.0, elevation=0.3, target=(0.0, 0.0, 0.0),
                  width=32, height=32, fx=None, arc=None, start=0.0):
    """n cameras on a circular arc around the target."""
    cams = []
    angles = (np.linspace(0.0, 2.0 * np.pi, n, endpoint=False) if arc is None
              else start + np.linspace(0.0, arc, n))
    t = np.asarray(target, dtype=np.float64)
    for a in angles:
        eye = t + radius * np.array([np.sin(a) * np.cos(elevation),
                                     np.sin(elevation),
                                     np.cos(a) * np.cos(elevation)])
        cams.append(look_at_camera(eye, target=t, width=width, height=height, fx=fx))
    return cams


def toy_style_image(seed, size=32):
    """Seeded smooth color-field image standing in for an art style."""
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:size, 0:size] / size
    img = np.zeros((size, size, 3))
    for _ in range(4):
        freq = rng.uniform(1.0, 4.0, size=2)
        phase = rng.uniform(0.0, 2.0 * np.pi, size=2)
        color = rng.uniform(0.0, 1.0, size=3)
        wave = (np.sin(2 * np.pi * freq[0] * xs + phase[0])
                * np.sin(2 * np.pi * freq[1] * ys + phase[1]))
        img += wave[..., None] * color
    lo, hi = img.min(), img.max()
    return (img - lo) / (hi - lo + 1e-9)


# ---------------------------------------------------------------------------
# independent oracles

def oracle_world_covariances(scene):
    """R diag(scale^2) R^T via scipy (package uses its own quaternion code)."""
    q = scene.rotations.astype(np.float64)
    rot = Rotation.from_quat(q[:, [1, 2, 3, 0]]).as_matrix()   # scipy is x-y-z-w
    out = np.empty((scene.num_gaussians, 3, 3))
    for i in range(scene.num_gaussians):
        s = np.diag(scene.scales[i].astype(np.float64) ** 2)
        out[i] = rot[i] @ s @ rot[i].T
    return out


def oracle_project(scene, cam):
    """Longhand EWA projection. Returns (mean2d, cov2d (P,2,2), depth)."""
    means = scene.means.astype(np.float64)
    xc = means @ cam.rotation.T + cam.translation
    z = xc[:, 2]
    u = cam.fx * xc[:, 0] / z + cam.cx
    v = cam.fy * xc[:, 1] / z + cam.cy
    sig = oracle_world_covariances(scene)
    cov = np.empty((len(means), 2, 2))
    for i in range(len(means)):
        j = np.array([[cam.fx / z[i], 0.0, -cam.fx * xc[i, 0] / z[i] ** 2],
                      [0.0, cam.fy / z[i], -cam.fy * xc[i, 1] / z[i] ** 2]])
        sc = cam.rotation @ sig[i] @ cam.rotation.T
        cov[i] = j @ sc @ j.T + BLUR_FLOOR * np.eye(2)
    return np.stack([u, v], axis=1), cov, z


def oracle_render(scene, cam, values, background=None):
    """Per-pixel exhaustive compositing: full sort, no tiling, no thresholds."""
    values = np.asarray(values, dtype=np.float64)
    c_dim = values.shape[1]
    bg = np.zeros(c_dim) if background is None else np.asarray(background, dtype=np.float64)
    mean2d, cov, z = oracle_project(scene, cam)
    order = [i for i in sorted(range(scene.num_gaussians), key=lambda i: (z[i], i))
             if z[i] > cam.near_clip]
    inv = np.linalg.inv(cov)
    opac = scene.opacities.astype(np.float64)
    img = np.zeros((cam.height, cam.width, c_dim))
    for r in range(cam.height):
        for c in range(cam.width):
            px = np.array([c + 0.5, r + 0.5])
            t = 1.0
            acc = np.zeros(c_dim)
            for g in order:
                d = px - mean2d[g]
                alpha = min(opac[g] * np.exp(-0.5 * d @ inv[g] @ d), ALPHA_MAX)
                acc += alpha * t * values[g]
                t *= 1.0 - alpha
            img[r, c] = acc + t * bg
    return img
