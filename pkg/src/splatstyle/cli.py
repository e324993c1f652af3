"""Command-line pipeline driver: embed, train, stylize, render, metrics, serve.

Every mutating command writes a run manifest next to its outputs: the
command line, config snapshot, seed, input content hashes, output paths,
and wall time.  All randomness flows from --seed.  Exit codes: 0 success,
2 usage or contract error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import signal
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .decoder import KnnDecoder, decode, load_decoder, save_decoder
from .embed import EmbedConfig, embed_train, save_affine
from .errors import ConfigError, ContractError, ParseError, ValidationError
from .features import LAYER_IDS, LAYER_TABLE, ToyExtractor, load_feature_map
from .imageio import load_png, save_gsim, save_png
from .metrics import consistency_csv, measure_timing, warp_consistency
from .render import Camera, render
from .scene import build_knn, load_scene, save_scene
from .style import (StyleStats, adain_transfer, compute_style_stats,
                    interpolate_styles, load_style_stats)
from .train import (StyleLossConfig, StylizeTrainConfig, init_decoder_from,
                    train_decoder, write_loss_csv)

USAGE_ERROR = 2
RUNTIME_ERROR = 3


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out_dir_or_file, command, args, inputs, outputs, seed, t0):
    target = Path(out_dir_or_file)
    path = target / "manifest.txt" if target.is_dir() else \
        target.with_name(target.name + ".manifest.txt")
    lines = [
        f"command = {command}",
        f"version = {__version__}",
        f"argv = {' '.join(sys.argv[1:])}",
        f"seed = {seed}",
        f"wall_seconds = {time.time() - t0:.3f}",
    ]
    for key, value in sorted(vars(args).items()):
        lines.append(f"config.{key} = {value}")
    for p in inputs:
        p = Path(p)
        if p.is_file():
            lines.append(f"input.{p.name} = sha256:{_sha256(p)}")
    for p in outputs:
        lines.append(f"output = {p}")
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    tmp.replace(path)
    return path


def load_cameras(path) -> list:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"cameras file {path} does not exist")
    entries = json.loads(path.read_text())
    return [Camera.from_dict(e) for e in entries]


def _load_style_arg(path, extractor, d):
    """A style given as PNG / GSFM / GSST on the command line -> StyleStats."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"style file {path} does not exist")
    suffix = path.suffix.lower()
    if suffix == ".gsst":
        stats = load_style_stats(path)
        if stats.mean.shape[0] != d:
            raise ConfigError(f"{path.name} has {stats.mean.shape[0]} channels, need {d}")
        return stats
    if suffix == ".gsfm":
        fmap = load_feature_map(path)
        if fmap.channels != d:
            raise ConfigError(f"{path.name} has {fmap.channels} channels, need {d}")
        return compute_style_stats(fmap)
    image = load_png(path)
    maps = extractor.extract(image)
    match = [m for m in maps if m.channels == d]
    if not match:
        raise ConfigError(f"no extractor layer has {d} channels")
    return compute_style_stats(match[0])


# ---------------------------------------------------------------------------
# subcommands

def cmd_embed(args) -> int:
    t0 = time.time()
    scene = load_scene(args.scene)
    cameras = load_cameras(args.cameras)
    out_scene = Path(args.out_scene)
    out_scene.parent.mkdir(parents=True, exist_ok=True)
    if args.iterations == 0:
        save_scene(scene, out_scene)
        write_manifest(out_scene, "embed", args, [args.scene, args.cameras],
                       [out_scene], args.seed, t0)
        return 0
    features_dir = Path(args.features)
    if not features_dir.is_dir():
        raise ConfigError(f"features directory {features_dir} does not exist")
    files = sorted(features_dir.glob("*.gsfm"))
    if len(files) != len(cameras):
        raise ConfigError(f"{len(files)} feature maps in {features_dir} "
                          f"but {len(cameras)} cameras")
    gt_maps = [load_feature_map(f) for f in files]
    cfg = EmbedConfig(iterations=args.iterations, lr_features=args.lr_features,
                      lr_affine=args.lr_affine, d_low=args.d_low,
                      d_high=gt_maps[0].channels, embed_layer=gt_maps[0].layer_id)
    result = embed_train(scene, cameras, gt_maps, cfg, seed=args.seed)
    save_scene(scene, out_scene)
    out_affine = Path(args.out_affine)
    save_affine(result.lift, out_affine)
    loss_path = out_scene.parent / "embed_loss.csv"
    loss_path.write_text("iteration,loss\n" + "".join(
        f"{i},{v!r}\n" for i, v in enumerate(result.loss_history)))
    write_manifest(out_scene, "embed", args,
                   [args.scene, args.cameras, *files],
                   [out_scene, out_affine], args.seed, t0)
    print(f"embedded {scene.num_gaussians} gaussians: loss "
          f"{result.loss_history[0]:.5f} -> {result.loss_history[-1]:.5f}")
    return 0


def cmd_train(args) -> int:
    t0 = time.time()
    scene = load_scene(args.scene)
    cameras = load_cameras(args.cameras)
    channels = tuple(int(c) for c in args.channels.split(","))
    out = Path(args.out)
    if args.init_from:
        decoder = init_decoder_from(args.init_from,
                                    expected_channels=(scene.feature_dims[1],) + channels,
                                    expected_k=args.k)
        default_iters = 30000
    else:
        decoder = KnnDecoder.create(d_in=scene.feature_dims[1], channels=channels,
                                    K=args.k, seed=args.seed)
        default_iters = 100000
    iterations = default_iters if args.iterations is None else args.iterations
    if iterations == 0:
        save_decoder(decoder, out)
        write_manifest(out, "train", args, [args.scene, args.cameras], [out],
                       args.seed, t0)
        return 0
    styles_dir = Path(args.styles)
    if not styles_dir.is_dir():
        raise ConfigError(f"styles directory {styles_dir} does not exist")
    style_paths = sorted(styles_dir.glob("*.png"))
    if not style_paths:
        raise ConfigError(f"no .png style images in {styles_dir}")
    style_images = [load_png(p) for p in style_paths]
    extractor = ToyExtractor(seed=args.extractor_seed)
    knn = build_knn(scene, args.k, cache_dir=out.parent)
    loss_cfg = StyleLossConfig(lam=args.style_weight,
                               loss_layers=tuple(args.loss_layers.split(",")))
    train_cfg = StylizeTrainConfig(iterations=iterations, lr=args.lr,
                                   style_set=style_images, seed=args.seed)
    result = train_decoder(scene, cameras, None, extractor, decoder, loss_cfg,
                           train_cfg, knn=knn)
    save_decoder(decoder, out)
    write_loss_csv(result.history, out.parent / "train_loss.csv")
    write_manifest(out, "train", args,
                   [args.scene, args.cameras, *style_paths], [out], args.seed, t0)
    print(f"trained decoder {decoder.channel_schedule}: total loss "
          f"{result.history[0, 2]:.5f} -> {result.history[-1, 2]:.5f}")
    return 0


def cmd_stylize(args) -> int:
    t0 = time.time()
    scene = load_scene(args.scene)
    if scene.high_feats is None:
        raise ContractError("scene has no embedded features; run embed first")
    decoder = load_decoder(args.decoder)
    d = scene.high_feats.shape[1]
    extractor = ToyExtractor(seed=args.extractor_seed)
    stats_list = [_load_style_arg(p, extractor, d) for p in args.style]
    if args.interpolate:
        try:
            weights = [float(w) for w in args.interpolate.split(",")]
        except ValueError:
            raise ConfigError(f"malformed weights {args.interpolate!r}") from None
    else:
        if len(stats_list) != 1:
            raise ConfigError("multiple styles require --interpolate weights")
        weights = [1.0]
    if len(weights) != len(stats_list):
        raise ConfigError(f"{len(weights)} weights for {len(stats_list)} styles")
    knn = build_knn(scene, decoder.K, cache_dir=Path(args.out).parent)
    sets = []
    for stats in stats_list:
        adain_transfer(scene, stats)
        sets.append(scene.transformed_feats.copy())
    blended = sets[0] if len(sets) == 1 else interpolate_styles(sets, weights)
    scene.transformed_feats = np.asarray(blended, dtype=np.float32)
    decode(scene, decoder, knn)
    out = Path(args.out)
    save_scene(scene, out)
    write_manifest(out, "stylize", args,
                   [args.scene, args.decoder, *args.style], [out], args.seed, t0)
    print(f"stylized {scene.num_gaussians} gaussians with {len(sets)} style(s)")
    return 0


def cmd_render(args) -> int:
    t0 = time.time()
    scene = load_scene(args.scene)
    cameras = load_cameras(args.cameras)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    background = np.array([float(v) for v in args.background.split(",")])
    outputs = []
    for i, cam in enumerate(cameras):
        out = render(scene, cam, channel=args.channel, background=background,
                     retain_cache=False)
        if args.format == "png":
            path = out_dir / f"frame_{i:04d}.png"
            save_png(out.image, path)
        else:
            path = out_dir / f"frame_{i:04d}.gsim"
            save_gsim(out.image, path)
        outputs.append(path)
    write_manifest(out_dir, "render", args, [args.scene, args.cameras],
                   outputs, args.seed, t0)
    print(f"rendered {len(outputs)} frame(s) to {out_dir}")
    return 0


def cmd_metrics(args) -> int:
    t0 = time.time()
    scene = load_scene(args.scene)
    cameras = load_cameras(args.cameras)
    if scene.styled_colors is None:
        raise ContractError("scene has no styled colors; run stylize first")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    reports = []
    for pair in args.pairs.split(","):
        a, _, b = pair.partition(":")
        try:
            ia, ib = int(a), int(b)
            cam_a, cam_b = cameras[ia], cameras[ib]
        except (ValueError, IndexError):
            raise ConfigError(f"bad camera pair {pair!r}") from None
        rep = warp_consistency(scene, cam_a, cam_b)
        rep.view_pair = (ia, ib)
        reports.append(rep)
    consistency_csv(reports, out_dir / "consistency.csv")
    outputs = [out_dir / "consistency.csv"]
    if args.decoder and args.style:
        decoder = load_decoder(args.decoder)
        extractor = ToyExtractor(seed=args.extractor_seed)
        stats = _load_style_arg(args.style, extractor, scene.high_feats.shape[1])
        knn = build_knn(scene, decoder.K, cache_dir=out_dir)
        timing = measure_timing(scene, decoder, stats, cameras, knn)
        path = out_dir / "timing.csv"
        path.write_text(
            "transfer_seconds,render_seconds,gaussians,width,height,frames\n"
            f"{timing.transfer_seconds!r},{timing.render_seconds!r},"
            f"{timing.num_gaussians},{timing.image_size[0]},"
            f"{timing.image_size[1]},{timing.frames}\n")
        outputs.append(path)
    write_manifest(out_dir, "metrics", args, [args.scene, args.cameras],
                   outputs, args.seed, t0)
    for rep in reports:
        print(f"pair {rep.view_pair}: rmse {rep.rmse:.5f} "
              f"valid {rep.valid_fraction:.3f}")
    return 0


def cmd_serve(args) -> int:
    from .server import StyleServer, load_scene_dir
    t0 = time.time()
    sessions = load_scene_dir(args.scenes)
    server = StyleServer(sessions, host=args.host, port=args.port,
                         extractor_seed=args.extractor_seed,
                         static_dir=args.static or None)
    manifest_dir = Path(args.scenes)

    def _stop(signum, frame):
        server.httpd.shutdown()

    signal.signal(signal.SIGTERM, _stop)
    signal.signal(signal.SIGINT, _stop)
    print(f"serving {len(sessions)} scene(s) on http://{args.host}:{server.port}/v1")
    sys.stdout.flush()
    try:
        server.serve_forever()
    finally:
        server.httpd.server_close()
        write_manifest(manifest_dir, "serve", args, [], [], args.seed, t0)
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="splatstyle",
                                     description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("embed", help="embed image features into a scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--cameras", required=True)
    p.add_argument("--features", default="", help="directory of per-view GSFM maps")
    p.add_argument("--out-scene", required=True)
    p.add_argument("--out-affine", default="lift.gsaf")
    p.add_argument("--iterations", type=int, default=30000)
    p.add_argument("--lr-features", type=float, default=0.01)
    p.add_argument("--lr-affine", type=float, default=0.001)
    p.add_argument("--d-low", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("train", help="train the stylization decoder")
    p.add_argument("--scene", required=True)
    p.add_argument("--cameras", required=True)
    p.add_argument("--styles", default="", help="directory of .png style images")
    p.add_argument("--out", required=True)
    p.add_argument("--init-from", default="")
    p.add_argument("--iterations", type=int, default=None,
                   help="default 100000, or 30000 with --init-from")
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--style-weight", type=float, default=10.0,
                   help="balance between content preservation and stylization")
    p.add_argument("--loss-layers", default="L1,L2,L3,L4")
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--channels", default="256,128,64,32,3")
    p.add_argument("--extractor-seed", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("stylize", help="apply one or more styles to a scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--decoder", required=True)
    p.add_argument("--style", action="append", required=True,
                   help="style image (.png) or feature file (.gsfm/.gsst); repeatable")
    p.add_argument("--interpolate", default="",
                   help="comma-separated blend weights, one per style")
    p.add_argument("--out", required=True)
    p.add_argument("--extractor-seed", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_stylize)

    p = sub.add_parser("render", help="render frames from a scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--cameras", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--channel", default="styled_color",
                   choices=["color", "styled_color", "low_feat", "depth"])
    p.add_argument("--format", default="png", choices=["png", "gsim"])
    p.add_argument("--background", default="0,0,0")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("metrics", help="multi-view consistency and timing")
    p.add_argument("--scene", required=True)
    p.add_argument("--cameras", required=True)
    p.add_argument("--pairs", required=True, help="camera index pairs, e.g. 0:1,0:5")
    p.add_argument("--out", required=True)
    p.add_argument("--decoder", default="")
    p.add_argument("--style", default="")
    p.add_argument("--extractor-seed", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("serve", help="serve scenes over HTTP for the viewer")
    p.add_argument("--scenes", required=True, help="directory of .gssc scenes")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8787)
    p.add_argument("--static", default="", help="directory of viewer assets")
    p.add_argument("--extractor-seed", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ContractError, ParseError, ValidationError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except KeyboardInterrupt:
        return RUNTIME_ERROR
    except Exception as exc:  # noqa: BLE001 -- process boundary
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
