"""Blend two styles continuously by interpolating transformed feature sets.

Each style's transformed features are computed once; sliding the blend
weight only re-mixes and re-decodes, which is what makes interactive
slider dragging cheap.
"""

from pathlib import Path

import numpy as np

from splatstyle import (EmbedConfig, KnnDecoder, ToyExtractor, adain_transfer,
                        build_knn, compute_style_stats, decode, embed_train,
                        interpolate_styles, render)
from splatstyle.imageio import save_png

import importlib
demo1 = importlib.import_module("01_render_scene")
demo3 = importlib.import_module("03_instant_style_transfer")

OUT = Path(__file__).parent / "out" / "04"


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(7)
    scene = demo1.make_scene(rng, p=800)
    cams = [demo1.orbit_camera(a, size=32)
            for a in np.linspace(0, 2 * np.pi, 6, endpoint=False)]
    extractor = ToyExtractor(seed=0)
    gt = [extractor.extract(render(scene, c, channel="color").image)[0] for c in cams]
    embed_train(scene, cams, gt,
                EmbedConfig(iterations=600, d_low=16, d_high=64, embed_layer="L1"),
                seed=1)
    knn = build_knn(scene, 8)
    decoder = KnnDecoder.create(d_in=64, channels=(64, 32, 3), K=8, seed=2)

    transformed = []
    for seed in (11, 55):
        stats = compute_style_stats(extractor.extract(demo3.color_field(seed))[0])
        adain_transfer(scene, stats)
        transformed.append(scene.transformed_feats.copy())

    cam = demo1.orbit_camera(0.7, size=128)
    for i, w in enumerate(np.linspace(0.0, 1.0, 5)):
        scene.transformed_feats = np.asarray(
            interpolate_styles(transformed, [1.0 - w, w]), dtype=np.float32)
        decode(scene, decoder, knn)
        frame = render(scene, cam, channel="styled_color", retain_cache=False).image
        save_png(frame, OUT / f"blend_{i}_w{w:.2f}.png")
        print(f"blend weight {w:.2f} -> blend_{i}_w{w:.2f}.png")
    print(f"outputs in {OUT}")


if __name__ == "__main__":
    main()
