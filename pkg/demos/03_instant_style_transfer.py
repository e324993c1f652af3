"""Train a decoder once, then restyle the scene instantly with new styles.

The expensive part (decoder training) happens once per scene.  After that,
applying any style is statistic alignment + one decoder pass, timed here
per style; rendering needs no further style work.
"""

import time
from pathlib import Path

import numpy as np

from splatstyle import (EmbedConfig, KnnDecoder, StyleLossConfig,
                        StylizeTrainConfig, ToyExtractor, adain_transfer,
                        build_knn, compute_style_stats, decode, embed_train,
                        render, train_decoder)
from splatstyle.imageio import save_png

import importlib
demo1 = importlib.import_module("01_render_scene")

OUT = Path(__file__).parent / "out" / "03"


def color_field(seed, size=32):
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:size, 0:size] / size
    img = np.zeros((size, size, 3))
    for _ in range(4):
        f = rng.uniform(1, 4, 2)
        ph = rng.uniform(0, 2 * np.pi, 2)
        img += (np.sin(2 * np.pi * f[0] * xs + ph[0])
                * np.sin(2 * np.pi * f[1] * ys + ph[1]))[..., None] * rng.uniform(0, 1, 3)
    return (img - img.min()) / (img.max() - img.min() + 1e-9)


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(7)
    scene = demo1.make_scene(rng, p=800)
    cams = [demo1.orbit_camera(a, size=32)
            for a in np.linspace(0, 2 * np.pi, 6, endpoint=False)]
    extractor = ToyExtractor(seed=0)

    gt = [extractor.extract(render(scene, c, channel="color").image)[0] for c in cams]
    embed_train(scene, cams, gt,
                EmbedConfig(iterations=800, d_low=16, d_high=64, embed_layer="L1"),
                seed=1)
    knn = build_knn(scene, 8)
    decoder = KnnDecoder.create(d_in=64, channels=(64, 32, 3), K=8, seed=2)
    training_styles = [color_field(i) for i in range(4)]
    print("training decoder (one-time, per scene)...")
    result = train_decoder(scene, cams, None, extractor, decoder,
                           StyleLossConfig(),
                           StylizeTrainConfig(iterations=800, style_set=training_styles,
                                              seed=3), knn=knn)
    total = result.history[:, 2]
    print(f"decoder loss: {total[:50].mean():.4f} -> {total[-50:].mean():.4f}")

    # zero-shot: styles the decoder never saw
    for i, seed in enumerate((101, 202, 303)):
        style_img = color_field(seed)
        t0 = time.perf_counter()
        stats = compute_style_stats(extractor.extract(style_img)[0])
        adain_transfer(scene, stats)
        decode(scene, decoder, knn)
        ms = (time.perf_counter() - t0) * 1000
        frame = render(scene, demo1.orbit_camera(0.7, size=128),
                       channel="styled_color", retain_cache=False).image
        save_png(style_img, OUT / f"style_{i}.png")
        save_png(frame, OUT / f"styled_{i}.png")
        print(f"style {i}: transfer+decode {ms:.1f} ms -> styled_{i}.png")
    print(f"outputs in {OUT}")


if __name__ == "__main__":
    main()
