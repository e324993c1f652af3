import json

import numpy as np
import pytest

from splatstyle.cli import main
from splatstyle.decoder import KnnDecoder, decode, load_decoder, save_decoder
from splatstyle.embed import EmbedConfig, embed_train
from splatstyle.features import ToyExtractor, save_feature_map
from splatstyle.imageio import load_gsim, load_png, save_png
from splatstyle.render import render
from splatstyle.scene import build_knn, load_scene, save_scene
from splatstyle.style import adain_transfer, compute_style_stats
from util import covered_cameras, covered_scene, toy_style_image


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A small embedded scene plus cameras/styles on disk."""
    root = tmp_path_factory.mktemp("cli")
    rng = np.random.default_rng(40)
    scene = covered_scene(rng, 90)
    cams = covered_cameras(3, width=16, height=16)
    (root / "cams.json").write_text(json.dumps([c.to_dict() for c in cams]))

    ext = ToyExtractor(seed=0)
    feat_dir = root / "features"
    for i, cam in enumerate(cams):
        img = render(scene, cam, channel="color").image
        save_feature_map(ext.extract(img)[0], feat_dir / f"view_{i:03d}.gsfm")

    save_scene(scene, root / "scene.gssc")
    cfg = EmbedConfig(iterations=300, d_low=8, d_high=64, embed_layer="L1")
    embed_train(scene, cams, [ext.extract(render(scene, c, channel="color").image)[0]
                              for c in cams], cfg, seed=1)
    save_scene(scene, root / "embedded.gssc")

    styles_dir = root / "styles"
    styles_dir.mkdir()
    for i in range(2):
        save_png(toy_style_image(i, 16), styles_dir / f"style_{i}.png")

    decoder = KnnDecoder.create(d_in=64, channels=(8, 3), K=4, seed=2)
    save_decoder(decoder, root / "decoder.gsdc")
    return root


class TestEmbedCommand:
    def test_zero_iterations_copies_and_manifests(self, workspace, tmp_path):
        out = tmp_path / "copy.gssc"
        code = main(["embed", "--scene", str(workspace / "scene.gssc"),
                     "--cameras", str(workspace / "cams.json"),
                     "--out-scene", str(out), "--iterations", "0"])
        assert code == 0
        assert out.exists()
        assert (workspace / "scene.gssc").read_bytes() == out.read_bytes()
        manifest = out.with_name(out.name + ".manifest.txt")
        assert manifest.exists()
        assert "command = embed" in manifest.read_text()

    def test_missing_features_dir_exit_2(self, workspace, tmp_path, capsys):
        code = main(["embed", "--scene", str(workspace / "scene.gssc"),
                     "--cameras", str(workspace / "cams.json"),
                     "--features", str(tmp_path / "nope"),
                     "--out-scene", str(tmp_path / "o.gssc"),
                     "--iterations", "10"])
        assert code == 2
        assert "nope" in capsys.readouterr().err

    def test_seeded_run_reproducible(self, workspace, tmp_path):
        args = ["embed", "--scene", str(workspace / "scene.gssc"),
                "--cameras", str(workspace / "cams.json"),
                "--features", str(workspace / "features"),
                "--iterations", "40", "--d-low", "8", "--seed", "7"]
        out1, out2 = tmp_path / "a.gssc", tmp_path / "b.gssc"
        assert main(args + ["--out-scene", str(out1),
                            "--out-affine", str(tmp_path / "a.gsaf")]) == 0
        assert main(args + ["--out-scene", str(out2),
                            "--out-affine", str(tmp_path / "b.gsaf")]) == 0
        assert out1.read_bytes() == out2.read_bytes()
        assert (tmp_path / "a.gsaf").read_bytes() == (tmp_path / "b.gsaf").read_bytes()


class TestTrainCommand:
    def test_zero_iterations_with_init_emits_equal_checkpoint(self, workspace, tmp_path):
        out = tmp_path / "d.gsdc"
        code = main(["train", "--scene", str(workspace / "embedded.gssc"),
                     "--cameras", str(workspace / "cams.json"),
                     "--out", str(out), "--iterations", "0",
                     "--init-from", str(workspace / "decoder.gsdc"),
                     "--k", "4", "--channels", "8,3"])
        assert code == 0
        assert out.read_bytes() == (workspace / "decoder.gsdc").read_bytes()

    def test_schedule_mismatch_exit_2(self, workspace, tmp_path, capsys):
        code = main(["train", "--scene", str(workspace / "embedded.gssc"),
                     "--cameras", str(workspace / "cams.json"),
                     "--out", str(tmp_path / "d.gsdc"), "--iterations", "0",
                     "--init-from", str(workspace / "decoder.gsdc"),
                     "--k", "8", "--channels", "8,3"])
        assert code == 2
        assert "schedule" in capsys.readouterr().err

    def test_short_training_run(self, workspace, tmp_path):
        out = tmp_path / "trained.gsdc"
        code = main(["train", "--scene", str(workspace / "embedded.gssc"),
                     "--cameras", str(workspace / "cams.json"),
                     "--styles", str(workspace / "styles"),
                     "--out", str(out), "--iterations", "12",
                     "--k", "4", "--channels", "8,3", "--seed", "3"])
        assert code == 0
        assert out.exists()
        trained = load_decoder(out)
        assert trained.channel_schedule == (64, 8, 3)
        assert (out.parent / "train_loss.csv").exists()


class TestStylizeCommand:
    def test_single_style_equals_weight_one(self, workspace, tmp_path):
        base = ["stylize", "--scene", str(workspace / "embedded.gssc"),
                "--decoder", str(workspace / "decoder.gsdc"),
                "--style", str(workspace / "styles" / "style_0.png")]
        out1, out2 = tmp_path / "s1.gssc", tmp_path / "s2.gssc"
        assert main(base + ["--out", str(out1)]) == 0
        assert main(base + ["--interpolate", "1", "--out", str(out2)]) == 0
        assert out1.read_bytes() == out2.read_bytes()

    def test_malformed_weights_exit_2(self, workspace, tmp_path):
        code = main(["stylize", "--scene", str(workspace / "embedded.gssc"),
                     "--decoder", str(workspace / "decoder.gsdc"),
                     "--style", str(workspace / "styles" / "style_0.png"),
                     "--interpolate", "0.5,oops",
                     "--out", str(tmp_path / "s.gssc")])
        assert code == 2

    def test_matches_library_pipeline(self, workspace, tmp_path):
        out = tmp_path / "styled.gssc"
        assert main(["stylize", "--scene", str(workspace / "embedded.gssc"),
                     "--decoder", str(workspace / "decoder.gsdc"),
                     "--style", str(workspace / "styles" / "style_0.png"),
                     "--out", str(out)]) == 0
        got = load_scene(out)

        scene = load_scene(workspace / "embedded.gssc")
        ext = ToyExtractor(seed=0)
        maps = ext.extract(load_png(workspace / "styles" / "style_0.png"))
        stats = compute_style_stats([m for m in maps if m.channels == 64][0])
        adain_transfer(scene, stats)
        decoder = load_decoder(workspace / "decoder.gsdc")
        decode(scene, decoder, build_knn(scene, 4))
        np.testing.assert_array_equal(got.styled_colors, scene.styled_colors)

    def test_interpolated_two_styles(self, workspace, tmp_path):
        out = tmp_path / "blend.gssc"
        assert main(["stylize", "--scene", str(workspace / "embedded.gssc"),
                     "--decoder", str(workspace / "decoder.gsdc"),
                     "--style", str(workspace / "styles" / "style_0.png"),
                     "--style", str(workspace / "styles" / "style_1.png"),
                     "--interpolate", "0.3,0.7", "--out", str(out)]) == 0
        assert load_scene(out).styled_colors is not None


class TestRenderCommand:
    def test_zero_cameras_empty_dir_with_manifest(self, workspace, tmp_path):
        cams = tmp_path / "none.json"
        cams.write_text("[]")
        out_dir = tmp_path / "frames"
        code = main(["render", "--scene", str(workspace / "embedded.gssc"),
                     "--cameras", str(cams), "--out", str(out_dir),
                     "--channel", "color"])
        assert code == 0
        assert (out_dir / "manifest.txt").exists()
        assert not list(out_dir.glob("*.png"))

    def test_unknown_channel_exit_2(self, workspace, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["render", "--scene", str(workspace / "embedded.gssc"),
                  "--cameras", str(workspace / "cams.json"),
                  "--out", str(tmp_path / "f"), "--channel", "bogus"])
        assert exc.value.code == 2

    def test_frames_match_renderer(self, workspace, tmp_path):
        out_dir = tmp_path / "frames"
        assert main(["render", "--scene", str(workspace / "embedded.gssc"),
                     "--cameras", str(workspace / "cams.json"),
                     "--out", str(out_dir), "--channel", "color",
                     "--format", "gsim"]) == 0
        scene = load_scene(workspace / "embedded.gssc")
        cams = [c for c in json.loads((workspace / "cams.json").read_text())]
        from splatstyle.render import Camera
        img = render(scene, Camera.from_dict(cams[1]), channel="color").image
        stored = load_gsim(out_dir / "frame_0001.gsim")
        np.testing.assert_allclose(stored, img.astype(np.float32), atol=1e-6)

    def test_png_roundtrip_quantized(self, workspace, tmp_path):
        out_dir = tmp_path / "png_frames"
        assert main(["render", "--scene", str(workspace / "embedded.gssc"),
                     "--cameras", str(workspace / "cams.json"),
                     "--out", str(out_dir), "--channel", "color"]) == 0
        img = load_png(out_dir / "frame_0000.png")
        assert img.shape == (16, 16, 3)


class TestMetricsCommand:
    def test_self_pair_rmse_zero(self, workspace, tmp_path):
        styled = tmp_path / "styled.gssc"
        assert main(["stylize", "--scene", str(workspace / "embedded.gssc"),
                     "--decoder", str(workspace / "decoder.gsdc"),
                     "--style", str(workspace / "styles" / "style_0.png"),
                     "--out", str(styled)]) == 0
        out_dir = tmp_path / "metrics"
        assert main(["metrics", "--scene", str(styled),
                     "--cameras", str(workspace / "cams.json"),
                     "--pairs", "0:0,0:1", "--out", str(out_dir)]) == 0
        rows = (out_dir / "consistency.csv").read_text().strip().splitlines()
        assert rows[0] == "view_a,view_b,rmse,valid_fraction"
        first = rows[1].split(",")
        assert float(first[2]) == 0.0

    def test_missing_styled_color_exit_2(self, workspace, tmp_path):
        code = main(["metrics", "--scene", str(workspace / "embedded.gssc"),
                     "--cameras", str(workspace / "cams.json"),
                     "--pairs", "0:1", "--out", str(tmp_path / "m")])
        assert code == 2
