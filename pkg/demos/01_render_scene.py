"""Build a small synthetic splat scene and render a turntable.

Outputs land in demos/out/01/: a handful of PNG frames plus the scene file
in the native format, reloadable by every other demo.
"""

from pathlib import Path

import numpy as np

from splatstyle import Camera, render, save_scene
from splatstyle.imageio import save_png
from splatstyle.scene import GaussianScene

OUT = Path(__file__).parent / "out" / "01"


def make_scene(rng, p=800):
    # a dense colorful blob; opacities high enough that views are covered
    means = rng.uniform(-0.5, 0.5, size=(p, 3))
    scales = rng.uniform(0.08, 0.2, size=(p, 3))
    quats = rng.normal(size=(p, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    return GaussianScene(
        means=means, scales=scales, rotations=quats,
        opacities=rng.uniform(0.7, 0.95, size=p),
        colors=rng.uniform(0.0, 1.0, size=(p, 3)),
        name="demo-blob")


def orbit_camera(angle, radius=2.0, size=128):
    eye = radius * np.array([np.sin(angle), 0.3, np.cos(angle)])
    fwd = -eye / np.linalg.norm(eye)
    right = np.cross(fwd, [0.0, 1.0, 0.0])
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])
    return Camera(fx=1.6 * size, fy=1.6 * size, cx=size / 2, cy=size / 2,
                  width=size, height=size, rotation=rot, translation=-rot @ eye)


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(7)
    scene = make_scene(rng)
    save_scene(scene, OUT / "blob.gssc")
    print(f"scene: {scene.num_gaussians} gaussians -> {OUT / 'blob.gssc'}")

    for i, angle in enumerate(np.linspace(0, 2 * np.pi, 8, endpoint=False)):
        cam = orbit_camera(angle)
        out = render(scene, cam, channel="color", retain_cache=False)
        save_png(out.image, OUT / f"frame_{i:02d}.png")
        print(f"frame {i}: coverage {out.weight_sum.mean():.3f}, "
              f"depth {out.depth_map.max():.2f}")
    print(f"wrote 8 frames to {OUT}")


if __name__ == "__main__":
    main()
