"""HTTP serving layer for interactive viewing: scene/style registries,
one-shot stylization jobs, style interpolation, and frame rendering.

Style transfer runs once per (scene, style set, weights); frames only
re-render already-decoded colors.  Transformed feature sets are cached per
loaded style so interpolation re-blends without re-running the transfer.
Routes live under /v1; the frame stream is a WebSocket carrying JSON camera
poses inbound and binary PNG frames outbound, latest pose wins.
"""

from __future__ import annotations

import base64
import hashlib
import json
import socket
import struct
import threading
import time
from collections import OrderedDict
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import parse_qs, urlparse

import numpy as np

from . import __version__, counters
from .decoder import KnnDecoder, decode, load_decoder
from .errors import ConfigError, ContractError, ParseError, ValidationError
from .features import LAYER_IDS, FeatureMap, ToyExtractor, load_feature_map
from .imageio import decode_png, encode_png, save_gsim
from .render import Camera, render
from .scene import GaussianScene, KnnIndex, build_knn, load_scene
from .style import (StyleStats, adain_transfer, compute_style_stats,
                    interpolate_styles, load_style_stats)

MAX_BODY = 16 * 1024 * 1024
STYLE_CACHE_SIZE = 8
_WS_GUID = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11"


class StyleEntry:
    """One uploaded style: raw payload plus per-dimension derived stats."""

    def __init__(self, style_id, kind, payload):
        self.style_id = style_id
        self.kind = kind          # "image" | "map" | "stats"
        self.payload = payload
        self._stats = {}          # D -> StyleStats

    def stats_for(self, d, extractor):
        if d in self._stats:
            return self._stats[d]
        if self.kind == "stats":
            if self.payload.mean.shape[0] != d:
                raise ConfigError(f"style stats have {self.payload.mean.shape[0]} "
                                  f"channels, scene needs {d}")
            stats = self.payload
        elif self.kind == "map":
            if self.payload.channels != d:
                raise ConfigError(f"style map has {self.payload.channels} channels, "
                                  f"scene needs {d}")
            stats = compute_style_stats(self.payload)
        else:
            maps = extractor.extract(self.payload)
            match = [m for m in maps if m.channels == d]
            if not match:
                raise ConfigError(f"no extractor layer has {d} channels")
            stats = compute_style_stats(match[0])
        self._stats[d] = stats
        return stats


class SceneSession:
    """Serving state for one scene: decoder, style cache, decode lock."""

    def __init__(self, scene: GaussianScene, decoder=None, knn=None):
        self.scene = scene
        self.decoder = decoder
        self.knn = knn
        self.transformed_cache = OrderedDict()   # style_id -> (P, D) float32
        self.active_styles = []
        self.active_weights = []
        self.decode_lock = threading.Lock()

    def ensure_knn(self):
        if self.knn is None:
            if self.decoder is None:
                raise ContractError("scene has no decoder loaded")
            self.knn = build_knn(self.scene, self.decoder.K)
        return self.knn

    def transformed_for(self, entry: StyleEntry, extractor):
        cached = self.transformed_cache.get(entry.style_id)
        if cached is not None:
            self.transformed_cache.move_to_end(entry.style_id)
            return cached
        d = self.scene.high_feats.shape[1]
        stats = entry.stats_for(d, extractor)
        adain_transfer(self.scene, stats)        # the once-per-style transfer
        transformed = self.scene.transformed_feats.copy()
        self.transformed_cache[entry.style_id] = transformed
        while len(self.transformed_cache) > STYLE_CACHE_SIZE:
            self.transformed_cache.popitem(last=False)
        return transformed


class StyleServer:
    def __init__(self, scenes: dict, host="127.0.0.1", port=8787,
                 extractor_seed=0, static_dir=None):
        self.sessions = {name: session for name, session in scenes.items()}
        self.styles: dict = {}
        self.extractor = ToyExtractor(seed=extractor_seed)
        self.host = host
        self.port = port
        self.static_dir = Path(static_dir) if static_dir else None
        handler = _make_handler(self)
        try:
            self.httpd = ThreadingHTTPServer((host, port), handler)
        except OSError as exc:
            raise ConfigError(f"cannot bind {host}:{port}: {exc}") from None
        self.httpd.daemon_threads = True
        self.port = self.httpd.server_address[1]
        self._thread = None

    # -- lifecycle ---------------------------------------------------------
    def serve_forever(self):
        self.httpd.serve_forever()

    def start_background(self):
        self._thread = threading.Thread(target=self.serve_forever, daemon=True)
        self._thread.start()
        return self

    def shutdown(self):
        self.httpd.shutdown()
        self.httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    # -- registry ----------------------------------------------------------
    def register_style(self, body: bytes) -> str:
        style_id = hashlib.sha256(body).hexdigest()[:16]
        if style_id in self.styles:
            return style_id
        if body[:8] == b"\x89PNG\r\n\x1a\n":
            entry = StyleEntry(style_id, "image", decode_png(body))
        elif body[:4] == b"GSFM":
            tmp = _bytes_to_feature_map(body)
            entry = StyleEntry(style_id, "map", tmp)
        elif body[:4] == b"GSST":
            entry = StyleEntry(style_id, "stats", _bytes_to_style_stats(body))
        else:
            raise ParseError("body is not PNG, GSFM, or GSST", offset=0)
        self.styles[style_id] = entry
        return style_id

    def stylize(self, scene_id: str, style_ids, weights) -> dict:
        session = self.sessions.get(scene_id)
        if session is None:
            raise KeyError(scene_id)
        entries = []
        for sid in style_ids:
            if sid not in self.styles:
                raise KeyError(sid)
            entries.append(self.styles[sid])
        weights = [float(w) for w in weights]
        if len(weights) != len(entries) or not entries:
            raise ConfigError("style_ids and weights must be non-empty and match")
        if any(w < 0 for w in weights) or abs(sum(weights) - 1.0) > 1e-6:
            raise ConfigError(f"weights must be a convex combination, got {weights}")
        if session.scene.high_feats is None:
            raise ContractError("scene is not embedded")
        if session.decoder is None:
            raise ContractError("scene has no decoder")
        if not session.decode_lock.acquire(blocking=False):
            raise BlockingIOError("a decode is already in flight for this scene")
        try:
            t0 = time.perf_counter()
            sets = [session.transformed_for(e, self.extractor) for e in entries]
            blended = sets[0] if len(sets) == 1 and weights[0] == 1.0 else \
                interpolate_styles(sets, weights)
            session.scene.transformed_feats = np.asarray(blended, dtype=np.float32)
            decode(session.scene, session.decoder, session.ensure_knn())
            ms = (time.perf_counter() - t0) * 1000.0
            session.active_styles = list(style_ids)
            session.active_weights = weights
            return {"decode_ms": ms, "style_ids": list(style_ids), "weights": weights}
        finally:
            session.decode_lock.release()

    def frame(self, scene_id: str, camera: Camera, channel="styled_color",
              fmt="png") -> bytes:
        session = self.sessions.get(scene_id)
        if session is None:
            raise KeyError(scene_id)
        out = render(session.scene, camera, channel=channel, retain_cache=False)
        if fmt == "png":
            return encode_png(out.image)
        if fmt == "gsim":
            h, w, c = out.image.shape
            return (struct.pack("<4sIIH", b"GSIM", h, w, c)
                    + out.image.astype("<f4").tobytes())
        raise ConfigError(f"unknown frame format {fmt!r}")

    def scene_listing(self):
        out = []
        for name, s in sorted(self.sessions.items()):
            out.append({
                "id": name,
                "gaussians": s.scene.num_gaussians,
                "feature_dims": list(s.scene.feature_dims),
                "embedded": s.scene.high_feats is not None,
                "has_decoder": s.decoder is not None,
                "styled": s.scene.styled_colors is not None,
                "active_styles": s.active_styles,
            })
        return out


def _bytes_to_feature_map(body: bytes) -> FeatureMap:
    import tempfile
    with tempfile.NamedTemporaryFile(suffix=".gsfm") as f:
        f.write(body)
        f.flush()
        return load_feature_map(f.name)


def _bytes_to_style_stats(body: bytes) -> StyleStats:
    import tempfile
    with tempfile.NamedTemporaryFile(suffix=".gsst") as f:
        f.write(body)
        f.flush()
        return load_style_stats(f.name)


def load_scene_dir(scene_dir, decoder_suffix=".gsdc") -> dict:
    """Sessions for every native scene in a directory; a sibling
    <stem>.gsdc checkpoint becomes that scene's decoder."""
    scene_dir = Path(scene_dir)
    if not scene_dir.is_dir():
        raise ConfigError(f"scene directory {scene_dir} does not exist")
    sessions = {}
    for path in sorted(scene_dir.glob("*.gssc")):
        scene = load_scene(path)
        decoder = None
        dec_path = path.with_suffix(decoder_suffix)
        if dec_path.exists():
            decoder = load_decoder(dec_path)
        sessions[path.stem] = SceneSession(scene, decoder=decoder)
    return sessions


# ---------------------------------------------------------------------------
# HTTP plumbing

def _make_handler(server: StyleServer):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"
        server_version = f"splatstyle/{__version__}"

        def log_message(self, fmt, *args):
            pass

        # -- helpers -------------------------------------------------------
        def _json(self, code, obj):
            body = json.dumps(obj).encode()
            self.send_response(code)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def _bytes(self, code, body, ctype):
            self.send_response(code)
            self.send_header("Content-Type", ctype)
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def _error(self, code, message):
            self._json(code, {"error": message})

        def _read_body(self):
            length = int(self.headers.get("Content-Length", 0))
            if length > MAX_BODY:
                raise MemoryError(f"body of {length} bytes exceeds {MAX_BODY}")
            return self.rfile.read(length)

        # -- routes --------------------------------------------------------
        def do_GET(self):
            try:
                url = urlparse(self.path)
                parts = [p for p in url.path.split("/") if p]
                if url.path == "/v1/healthz":
                    import platform
                    return self._json(200, {
                        "status": "ok",
                        "versions": {"splatstyle": __version__,
                                     "python": platform.python_version(),
                                     "numpy": np.__version__}})
                if url.path == "/v1/scenes":
                    return self._json(200, {"scenes": server.scene_listing()})
                if url.path == "/v1/styles":
                    return self._json(200, {"styles": sorted(server.styles)})
                if (len(parts) == 4 and parts[:2] == ["v1", "scenes"]
                        and parts[3] == "frame"):
                    return self._frame(parts[2], url)
                if (len(parts) == 4 and parts[:2] == ["v1", "scenes"]
                        and parts[3] == "stream"):
                    return self._stream(parts[2])
                if server.static_dir is not None:
                    return self._static(url.path)
                return self._error(404, f"no route {url.path}")
            except BrokenPipeError:
                pass
            except Exception as exc:  # noqa: BLE001 -- boundary
                try:
                    self._error(500, f"{type(exc).__name__}: {exc}")
                except Exception:
                    pass

        def do_POST(self):
            try:
                url = urlparse(self.path)
                parts = [p for p in url.path.split("/") if p]
                if url.path == "/v1/styles":
                    try:
                        body = self._read_body()
                    except MemoryError as exc:
                        return self._error(413, str(exc))
                    if not body:
                        return self._error(400, "empty body")
                    try:
                        style_id = server.register_style(body)
                    except (ParseError, ValidationError) as exc:
                        return self._error(400, str(exc))
                    return self._json(200, {"style_id": style_id})
                if (len(parts) == 4 and parts[:2] == ["v1", "scenes"]
                        and parts[3] == "stylize"):
                    return self._stylize(parts[2])
                return self._error(404, f"no route {url.path}")
            except BrokenPipeError:
                pass
            except Exception as exc:  # noqa: BLE001 -- boundary
                try:
                    self._error(500, f"{type(exc).__name__}: {exc}")
                except Exception:
                    pass

        def _stylize(self, scene_id):
            body = self._read_body()
            try:
                req = json.loads(body.decode() or "{}")
            except json.JSONDecodeError:
                return self._error(400, "body is not JSON")
            style_ids = req.get("style_ids") or ([req["style_id"]] if "style_id" in req else [])
            weights = req.get("weights", [1.0] if len(style_ids) == 1 else [])
            try:
                result = server.stylize(scene_id, style_ids, weights)
            except KeyError as exc:
                return self._error(404, f"unknown id {exc}")
            except BlockingIOError as exc:
                return self._error(409, str(exc))
            except (ConfigError, ContractError) as exc:
                return self._error(422, str(exc))
            return self._json(200, result)

        def _frame(self, scene_id, url):
            q = parse_qs(url.query)
            try:
                cam = Camera.from_dict(json.loads(q["camera"][0]))
            except (KeyError, ValueError, ValidationError, TypeError) as exc:
                return self._error(422, f"invalid camera: {exc}")
            channel = q.get("channel", ["styled_color"])[0]
            fmt = q.get("format", ["png"])[0]
            try:
                body = server.frame(scene_id, cam, channel=channel, fmt=fmt)
            except KeyError as exc:
                return self._error(404, f"unknown scene {exc}")
            except (ConfigError, ContractError) as exc:
                return self._error(422, str(exc))
            ctype = "image/png" if fmt == "png" else "application/octet-stream"
            return self._bytes(200, body, ctype)

        def _static(self, path):
            rel = "index.html" if path in ("/", "") else path.lstrip("/")
            target = (server.static_dir / rel).resolve()
            if not str(target).startswith(str(server.static_dir.resolve())) \
                    or not target.is_file():
                return self._error(404, f"no route {path}")
            ctypes = {".html": "text/html", ".js": "text/javascript",
                      ".css": "text/css", ".map": "application/json"}
            return self._bytes(200, target.read_bytes(),
                               ctypes.get(target.suffix, "application/octet-stream"))

        # -- websocket frame stream ----------------------------------------
        def _stream(self, scene_id):
            session = server.sessions.get(scene_id)
            if session is None:
                return self._error(404, f"unknown scene {scene_id}")
            key = self.headers.get("Sec-WebSocket-Key")
            if self.headers.get("Upgrade", "").lower() != "websocket" or not key:
                return self._error(400, "expected a websocket upgrade")
            accept = base64.b64encode(
                hashlib.sha1((key + _WS_GUID).encode()).digest()).decode()
            self.send_response(101, "Switching Protocols")
            self.send_header("Upgrade", "websocket")
            self.send_header("Connection", "Upgrade")
            self.send_header("Sec-WebSocket-Accept", accept)
            self.end_headers()
            self.close_connection = True
            _FrameStream(self.connection, server, scene_id).run()

    return Handler


class _FrameStream:
    """Latest-wins pose queue: a reader thread keeps only the newest pose,
    the render loop serves poses as fast as it can. Skipped poses are never
    reordered."""

    def __init__(self, sock, server, scene_id):
        self.sock = sock
        self.server = server
        self.scene_id = scene_id
        self.lock = threading.Condition()
        self.send_lock = threading.Lock()
        self.latest = None
        self.seq = 0
        self.closed = False

    def run(self):
        reader = threading.Thread(target=self._read_loop, daemon=True)
        reader.start()
        served = 0
        try:
            while True:
                with self.lock:
                    while self.seq == served and not self.closed:
                        self.lock.wait(timeout=0.5)
                    if self.closed and self.seq == served:
                        break
                    pose = self.latest
                    served = self.seq
                try:
                    cam = Camera.from_dict(pose.get("camera", pose))
                    channel = pose.get("channel", "styled_color")
                    png = self.server.frame(self.scene_id, cam, channel=channel)
                    self._send(0x2, png)
                except (ConfigError, ContractError, ValidationError, KeyError,
                        TypeError, ValueError) as exc:
                    self._send(0x1, json.dumps({"error": str(exc)}).encode())
        except (BrokenPipeError, ConnectionResetError, OSError):
            pass
        finally:
            try:
                self._send(0x8, b"")
            except OSError:
                pass
            try:
                self.sock.close()
            except OSError:
                pass

    def _read_loop(self):
        try:
            while True:
                frame = self._recv_frame()
                if frame is None:
                    break
                opcode, payload = frame
                if opcode == 0x8:          # close
                    break
                if opcode == 0x9:          # ping -> pong
                    self._send(0xA, payload)
                    continue
                if opcode != 0x1:
                    continue
                try:
                    pose = json.loads(payload.decode())
                except (UnicodeDecodeError, json.JSONDecodeError):
                    continue
                with self.lock:
                    self.latest = pose
                    self.seq += 1
                    self.lock.notify()
        except (ConnectionResetError, OSError):
            pass
        finally:
            with self.lock:
                self.closed = True
                self.lock.notify()

    def _recv_exact(self, n):
        buf = b""
        while len(buf) < n:
            chunk = self.sock.recv(n - len(buf))
            if not chunk:
                return None
            buf += chunk
        return buf

    def _recv_frame(self):
        head = self._recv_exact(2)
        if head is None:
            return None
        opcode = head[0] & 0x0F
        masked = bool(head[1] & 0x80)
        length = head[1] & 0x7F
        if length == 126:
            ext = self._recv_exact(2)
            if ext is None:
                return None
            length = struct.unpack(">H", ext)[0]
        elif length == 127:
            ext = self._recv_exact(8)
            if ext is None:
                return None
            length = struct.unpack(">Q", ext)[0]
        if length > MAX_BODY:
            return None
        mask = b"\x00" * 4
        if masked:
            mask = self._recv_exact(4)
            if mask is None:
                return None
        payload = self._recv_exact(length) if length else b""
        if payload is None:
            return None
        if masked:
            payload = bytes(b ^ mask[i % 4] for i, b in enumerate(payload))
        return opcode, payload

    def _send(self, opcode, payload):
        header = bytes([0x80 | opcode])
        n = len(payload)
        if n < 126:
            header += bytes([n])
        elif n < 1 << 16:
            header += bytes([126]) + struct.pack(">H", n)
        else:
            header += bytes([127]) + struct.pack(">Q", n)
        with self.send_lock:
            self.sock.sendall(header + payload)
