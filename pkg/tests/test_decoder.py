import numpy as np
import pytest

from splatstyle import counters
from splatstyle.decoder import (ConvLayer, KnnDecoder, conv_backward, conv_forward_fast,
                                conv_forward_naive, decode, load_decoder, save_decoder)
from splatstyle.errors import ConfigError, ContractError
from splatstyle.scene import KnnIndex, build_knn
from util import random_scene


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def scalar_loop_conv(feats, neighbors, weights, bias):
    """Fully unrolled scalar reference for one KNN conv layer."""
    p, k = neighbors.shape
    d_out, d_in = weights.shape[1:]
    out = np.zeros((p, d_out))
    for i in range(p):
        for o in range(d_out):
            acc = float(bias[o])
            for kk in range(k):
                nb = neighbors[i, kk]
                for c in range(d_in):
                    acc += float(weights[kk, o, c]) * float(feats[nb, c])
            out[i, o] = 1.0 / (1.0 + np.exp(-acc))
    return out


def random_knn(rng, p, k):
    """Valid-looking index for conv math tests (self first, distinct others)."""
    rows = np.empty((p, k), dtype=np.int32)
    for i in range(p):
        others = rng.permutation(np.delete(np.arange(p), i))[: k - 1]
        rows[i] = np.concatenate([[i], others])
    return KnnIndex(neighbors=rows, K=k)


class TestForward:
    def test_zero_features_zero_bias(self):
        rng = np.random.default_rng(0)
        knn = random_knn(rng, 6, 3)
        layer = ConvLayer(weights=rng.normal(size=(3, 4, 5)), bias=np.zeros(4))
        out = conv_forward_naive(np.zeros((6, 5)), knn, layer)
        np.testing.assert_allclose(out, np.full((6, 4), 0.5), atol=1e-12)

    def test_self_window_identity(self):
        rng = np.random.default_rng(1)
        p, d = 7, 4
        knn = KnnIndex(neighbors=np.arange(p, dtype=np.int32)[:, None], K=1)
        layer = ConvLayer(weights=np.eye(d)[None], bias=np.zeros(d))
        x = rng.normal(size=(p, d))
        out = conv_forward_naive(x, knn, layer)
        np.testing.assert_allclose(out, sigmoid(x), atol=1e-12)

    def test_naive_matches_scalar_oracle(self):
        rng = np.random.default_rng(2)
        p, k, d_in, d_out = 50, 4, 3, 2
        knn = random_knn(rng, p, k)
        layer = ConvLayer(weights=rng.normal(size=(k, d_out, d_in)),
                          bias=rng.normal(size=d_out))
        feats = rng.normal(size=(p, d_in))
        got = conv_forward_naive(feats, knn, layer)
        expected = scalar_loop_conv(feats, knn.neighbors, layer.weights, layer.bias)
        np.testing.assert_allclose(got, expected, atol=1e-6)

    def test_fast_matches_naive(self):
        rng = np.random.default_rng(3)
        for k in (1, 4, 8, 16):
            p = int(rng.integers(20, 200))
            d_in = int(rng.integers(2, 24))
            d_out = int(rng.integers(2, 24))
            knn = random_knn(rng, p, k)
            layer = ConvLayer(weights=rng.normal(size=(k, d_out, d_in)),
                              bias=rng.normal(size=d_out))
            feats = rng.normal(size=(p, d_in))
            a = conv_forward_naive(feats, knn, layer)
            b = conv_forward_fast(feats, knn, layer)
            np.testing.assert_allclose(a, b, atol=1e-6, err_msg=f"K={k}")

    def test_fast_zero_weights_bias_rows(self):
        rng = np.random.default_rng(4)
        knn = random_knn(rng, 9, 3)
        bias = rng.normal(size=5)
        layer = ConvLayer(weights=np.zeros((3, 5, 2)), bias=bias)
        out = conv_forward_fast(rng.normal(size=(9, 2)), knn, layer)
        np.testing.assert_allclose(out, np.tile(sigmoid(bias), (9, 1)), atol=1e-12)

    def test_shape_mismatch(self):
        rng = np.random.default_rng(5)
        knn = random_knn(rng, 6, 2)
        layer = ConvLayer(weights=rng.normal(size=(2, 3, 4)), bias=np.zeros(3))
        with pytest.raises(ConfigError):
            conv_forward_fast(rng.normal(size=(6, 5)), knn, layer)


class TestBackward:
    def test_zero_grad(self):
        rng = np.random.default_rng(6)
        knn = random_knn(rng, 8, 3)
        layer = ConvLayer(weights=rng.normal(size=(3, 4, 5)), bias=rng.normal(size=4))
        feats = rng.normal(size=(8, 5))
        gf, gw, gb = conv_backward(feats, knn, layer, np.zeros((8, 4)))
        assert np.abs(gf).max() == 0 and np.abs(gw).max() == 0 and np.abs(gb).max() == 0

    def test_self_window_chain_rule(self):
        p, d = 1, 3
        knn = KnnIndex(neighbors=np.zeros((1, 1), dtype=np.int32), K=1)
        layer = ConvLayer(weights=np.eye(d)[None], bias=np.zeros(d))
        x = np.array([[0.3, -0.8, 1.2]])
        out = conv_forward_fast(x, knn, layer)
        grad_out = np.array([[1.0, 2.0, -1.0]])
        gf, _, _ = conv_backward(x, knn, layer, grad_out)
        np.testing.assert_allclose(gf, grad_out * out * (1 - out), atol=1e-12)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        p, k, d_in, d_out = 12, 4, 3, 2
        knn = random_knn(rng, p, k)
        w0 = rng.normal(size=(k, d_out, d_in))
        b0 = rng.normal(size=d_out)
        feats = rng.normal(size=(p, d_in))
        grad_out = rng.normal(size=(p, d_out))

        layer = ConvLayer(weights=w0, bias=b0)
        gf, gw, gb = conv_backward(feats, knn, layer, grad_out)

        def loss(f, w, b):
            out = conv_forward_fast(f, knn, ConvLayer(weights=w, bias=b))
            return np.sum(out * grad_out)

        h = 1e-6
        for i, j in [(0, 0), (5, 2), (11, 1)]:
            fp, fm = feats.copy(), feats.copy()
            fp[i, j] += h
            fm[i, j] -= h
            fd = (loss(fp, w0, b0) - loss(fm, w0, b0)) / (2 * h)
            assert abs(fd - gf[i, j]) / max(abs(fd), 1e-8) < 1e-4
        for kk, o, c in [(0, 0, 0), (3, 1, 2), (2, 0, 1)]:
            wp, wm = w0.copy(), w0.copy()
            wp[kk, o, c] += h
            wm[kk, o, c] -= h
            fd = (loss(feats, wp, b0) - loss(feats, wm, b0)) / (2 * h)
            assert abs(fd - gw[kk, o, c]) / max(abs(fd), 1e-8) < 1e-4
        for o in range(d_out):
            bp, bm = b0.copy(), b0.copy()
            bp[o] += h
            bm[o] -= h
            fd = (loss(feats, w0, bp) - loss(feats, w0, bm)) / (2 * h)
            assert abs(fd - gb[o]) / max(abs(fd), 1e-8) < 1e-4

    def test_deterministic(self):
        rng = np.random.default_rng(8)
        knn = random_knn(rng, 30, 8)
        layer = ConvLayer(weights=rng.normal(size=(8, 6, 5)), bias=rng.normal(size=6))
        feats = rng.normal(size=(30, 5))
        grad_out = rng.normal(size=(30, 6))
        a = conv_backward(feats, knn, layer, grad_out)
        b = conv_backward(feats, knn, layer, grad_out)
        for x, y in zip(a, b):
            assert np.array_equal(x, y)


class TestDecode:
    def test_zero_single_layer_is_mid_gray(self):
        rng = np.random.default_rng(9)
        scene = random_scene(rng, 20, d_high=6)
        scene.transformed_feats = scene.high_feats.copy()
        knn = build_knn(scene, 4)
        dec = KnnDecoder([ConvLayer(weights=np.zeros((4, 3, 6)), bias=np.zeros(3))])
        decode(scene, dec, knn)
        np.testing.assert_allclose(scene.styled_colors, np.full((20, 3), 0.5), atol=1e-7)

    def test_constant_features_constant_colors(self):
        rng = np.random.default_rng(10)
        scene = random_scene(rng, 25, d_high=6)
        scene.transformed_feats = np.tile(rng.normal(size=6).astype(np.float32), (25, 1))
        knn = build_knn(scene, 5)
        dec = KnnDecoder.create(d_in=6, channels=(4, 3), K=5, seed=1)
        decode(scene, dec, knn)
        first = scene.styled_colors[0]
        np.testing.assert_array_equal(scene.styled_colors,
                                      np.tile(first, (25, 1)))

    def test_default_decoder_matches_naive_composition(self):
        rng = np.random.default_rng(11)
        scene = random_scene(rng, 40, d_high=256)
        scene.transformed_feats = rng.normal(size=(40, 256)).astype(np.float32)
        knn = build_knn(scene, 8)
        dec = KnnDecoder.create(seed=2)
        assert dec.channel_schedule == (256, 256, 128, 64, 32, 3)
        decode(scene, dec, knn)
        x = scene.transformed_feats.astype(np.float64)
        for layer in dec.layers:
            x = conv_forward_naive(x, knn, layer)
        np.testing.assert_allclose(scene.styled_colors, x, atol=1e-5)

    def test_output_strictly_inside_unit(self):
        rng = np.random.default_rng(12)
        scene = random_scene(rng, 15, d_high=4)
        scene.transformed_feats = (rng.normal(size=(15, 4)) * 100).astype(np.float32)
        knn = build_knn(scene, 3)
        dec = KnnDecoder([ConvLayer(weights=rng.normal(size=(3, 3, 4)) * 50,
                                    bias=rng.normal(size=3))])
        decode(scene, dec, knn)
        assert (scene.styled_colors > 0).all()
        assert (scene.styled_colors < 1).all()

    def test_deterministic_bitwise(self):
        rng = np.random.default_rng(13)
        scene = random_scene(rng, 30, d_high=8)
        scene.transformed_feats = rng.normal(size=(30, 8)).astype(np.float32)
        knn = build_knn(scene, 4)
        dec = KnnDecoder.create(d_in=8, channels=(6, 3), K=4, seed=3)
        decode(scene, dec, knn)
        first = scene.styled_colors.copy()
        decode(scene, dec, knn)
        assert np.array_equal(first, scene.styled_colors)

    def test_counter_increments(self):
        rng = np.random.default_rng(14)
        scene = random_scene(rng, 10, d_high=4)
        scene.transformed_feats = rng.normal(size=(10, 4)).astype(np.float32)
        knn = build_knn(scene, 2)
        dec = KnnDecoder.create(d_in=4, channels=(3,), K=2, seed=0)
        before = counters.get("decode")
        decode(scene, dec, knn)
        assert counters.get("decode") == before + 1

    def test_missing_transformed(self):
        rng = np.random.default_rng(15)
        scene = random_scene(rng, 10, d_high=4)
        knn = build_knn(scene, 2)
        dec = KnnDecoder.create(d_in=4, channels=(3,), K=2, seed=0)
        with pytest.raises(ContractError):
            decode(scene, dec, knn)

    def test_chain_mismatch(self):
        rng = np.random.default_rng(16)
        scene = random_scene(rng, 10, d_high=4)
        scene.transformed_feats = rng.normal(size=(10, 4)).astype(np.float32)
        knn = build_knn(scene, 2)
        dec = KnnDecoder.create(d_in=5, channels=(3,), K=2, seed=0)
        with pytest.raises(ConfigError):
            decode(scene, dec, knn)

    def test_receptive_field_is_l_hop_neighborhood(self):
        rng = np.random.default_rng(17)
        p, k, layers = 40, 3, 2
        scene = random_scene(rng, p, d_high=4)
        base = rng.normal(size=(p, 4))
        knn = build_knn(scene, k)
        dec = KnnDecoder.create(d_in=4, channels=(4, 3), K=k, seed=4)

        def run(feats):
            x = feats
            for layer in dec.layers:
                x = conv_forward_fast(x, knn, layer)
            return x

        # reverse adjacency: output p depends on inputs knn[p]
        affected = {5}
        for _ in range(layers):
            nxt = set(affected)
            for q in range(p):
                if any(nb in affected for nb in knn.neighbors[q]):
                    nxt.add(q)
            affected = nxt
        bumped = base.copy()
        bumped[5] += 10.0
        changed = set(np.nonzero(np.abs(run(bumped) - run(base)).max(axis=1) > 0)[0])
        assert changed <= affected


class TestDecoderStructure:
    def test_schedule_must_chain(self):
        rng = np.random.default_rng(18)
        l1 = ConvLayer(weights=rng.normal(size=(2, 8, 4)), bias=np.zeros(8))
        l2 = ConvLayer(weights=rng.normal(size=(2, 3, 7)), bias=np.zeros(3))
        with pytest.raises(ConfigError):
            KnnDecoder([l1, l2])

    def test_final_must_be_rgb(self):
        rng = np.random.default_rng(19)
        l1 = ConvLayer(weights=rng.normal(size=(2, 8, 4)), bias=np.zeros(8))
        with pytest.raises(ConfigError):
            KnnDecoder([l1])

    def test_checkpoint_roundtrip_bitwise(self, tmp_path):
        dec = KnnDecoder.create(d_in=16, channels=(8, 3), K=4, seed=5)
        path = tmp_path / "d.gsdc"
        save_decoder(dec, path)
        loaded = load_decoder(path)
        assert loaded.K == 4
        assert loaded.channel_schedule == dec.channel_schedule
        for a, b in zip(dec.layers, loaded.layers):
            np.testing.assert_array_equal(a.weights.astype(np.float32),
                                          b.weights.astype(np.float32))
            np.testing.assert_array_equal(a.bias.astype(np.float32),
                                          b.bias.astype(np.float32))
        # a second save/load cycle is exactly stable
        path2 = tmp_path / "d2.gsdc"
        save_decoder(loaded, path2)
        assert path.read_bytes() == path2.read_bytes()
