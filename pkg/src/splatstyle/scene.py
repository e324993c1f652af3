"""3D Gaussian scene model, scene file I/O, and the one-time KNN index.

A scene is stored struct-of-arrays over P Gaussians: fixed geometry
(means, scales, rotations, opacities) plus mutable appearance channels
(RGB, low-dim features, high-dim features, transformed features,
stylized RGB).  Geometry is never written by any stylization stage.

Arrays are kept in float32 (the on-disk precision); numerical code
upcasts to float64 where it matters.
"""

from __future__ import annotations

import hashlib
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigError, ParseError, ValidationError

# DC term of the real spherical-harmonic basis: rgb = 0.5 + SH_C0 * f_dc
SH_C0 = 0.28209479177387814
OPACITY_MAX = 0.999
SOFT_GAUSSIAN_LIMIT = 300_000

SCENE_MAGIC = b"GSSC"
SCENE_VERSION = 1

# optional appearance channels in bitmask / serialization order
_OPTIONAL_CHANNELS = (
    ("low_feats", 0x01),
    ("high_feats", 0x02),
    ("transformed_feats", 0x04),
    ("styled_colors", 0x08),
)

_PLY_FIELDS = (
    "x", "y", "z",
    "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
    "opacity",
    "f_dc_0", "f_dc_1", "f_dc_2",
)


@dataclass
class Gaussian:
    """A single Gaussian record (a row view of the scene arrays)."""

    mean: np.ndarray        # (3,) world units
    scale: np.ndarray       # (3,) strictly positive, world units
    rotation: np.ndarray    # (4,) unit quaternion, w-x-y-z order
    opacity: float          # in [0, 0.999]
    color: np.ndarray       # (3,) RGB in [0, 1]
    low_feat: Optional[np.ndarray] = None
    high_feat: Optional[np.ndarray] = None
    transformed_feat: Optional[np.ndarray] = None
    styled_color: Optional[np.ndarray] = None


@dataclass
class GaussianScene:
    means: np.ndarray                       # (P, 3)
    scales: np.ndarray                      # (P, 3)
    rotations: np.ndarray                   # (P, 4) unit, w-x-y-z
    opacities: np.ndarray                   # (P,)
    colors: np.ndarray                      # (P, 3)
    low_feats: Optional[np.ndarray] = None         # (P, D')
    high_feats: Optional[np.ndarray] = None        # (P, D)
    transformed_feats: Optional[np.ndarray] = None  # (P, D)
    styled_colors: Optional[np.ndarray] = None     # (P, 3)
    feature_dims: tuple = (32, 256)                # (D', D)
    name: str = "scene"
    source_path: Optional[str] = None

    def __post_init__(self):
        for attr in ("means", "scales", "rotations", "opacities", "colors"):
            setattr(self, attr, np.ascontiguousarray(getattr(self, attr), dtype=np.float32))
        for attr, _ in _OPTIONAL_CHANNELS:
            arr = getattr(self, attr)
            if arr is not None:
                setattr(self, attr, np.ascontiguousarray(arr, dtype=np.float32))
        self.feature_dims = tuple(int(d) for d in self.feature_dims)
        self.validate()

    @property
    def num_gaussians(self) -> int:
        return self.means.shape[0]

    def validate(self):
        p = self.means.shape[0]
        if p < 1:
            raise ValidationError("scene must contain at least one Gaussian")
        if p > SOFT_GAUSSIAN_LIMIT:
            warnings.warn(
                f"scene has {p} Gaussians, above the soft limit of {SOFT_GAUSSIAN_LIMIT}; "
                "memory use grows with P", RuntimeWarning)
        shapes = {
            "means": (p, 3), "scales": (p, 3), "rotations": (p, 4),
            "opacities": (p,), "colors": (p, 3),
        }
        for attr, want in shapes.items():
            got = getattr(self, attr).shape
            if got != want:
                raise ValidationError(f"{attr} shape {got} != {want}")
        for attr in ("means", "scales", "rotations", "opacities", "colors"):
            arr = getattr(self, attr)
            if not np.isfinite(arr).all():
                idx = int(np.argwhere(~np.isfinite(arr.reshape(p, -1)).all(axis=1))[0, 0])
                raise ValidationError(f"non-finite {attr} at Gaussian {idx}")
        if not (self.scales > 0).all():
            idx = int(np.argwhere(~(self.scales > 0).all(axis=1))[0, 0])
            raise ValidationError(f"non-positive scale at Gaussian {idx}")
        norms = np.linalg.norm(self.rotations.astype(np.float64), axis=1)
        if not (np.abs(norms - 1.0) <= 1e-6).all():
            idx = int(np.argmax(np.abs(norms - 1.0)))
            raise ValidationError(f"rotation not unit-norm at Gaussian {idx}")
        if not ((self.opacities >= 0) & (self.opacities <= OPACITY_MAX)).all():
            idx = int(np.argwhere(~((self.opacities >= 0) & (self.opacities <= OPACITY_MAX)))[0, 0])
            raise ValidationError(f"opacity out of [0, {OPACITY_MAX}] at Gaussian {idx}")
        dlow, dhigh = self.feature_dims
        for attr, want_dim in (("low_feats", dlow), ("high_feats", dhigh),
                               ("transformed_feats", dhigh), ("styled_colors", 3)):
            arr = getattr(self, attr)
            if arr is None:
                continue
            if arr.shape != (p, want_dim):
                raise ValidationError(f"{attr} shape {arr.shape} != {(p, want_dim)}")
            if not np.isfinite(arr).all():
                idx = int(np.argwhere(~np.isfinite(arr).all(axis=1))[0, 0])
                raise ValidationError(f"non-finite {attr} at Gaussian {idx}")

    def gaussian(self, i: int) -> Gaussian:
        """Single-record view of Gaussian i (arrays are copies)."""
        def _opt(arr):
            return None if arr is None else arr[i].copy()
        return Gaussian(
            mean=self.means[i].copy(), scale=self.scales[i].copy(),
            rotation=self.rotations[i].copy(), opacity=float(self.opacities[i]),
            color=self.colors[i].copy(),
            low_feat=_opt(self.low_feats), high_feat=_opt(self.high_feats),
            transformed_feat=_opt(self.transformed_feats), styled_color=_opt(self.styled_colors),
        )

    def geometry_bytes(self) -> bytes:
        """Serialized geometry, for immutability checks and cache keys."""
        return (self.means.tobytes() + self.scales.tobytes()
                + self.rotations.tobytes() + self.opacities.tobytes())

    def channel(self, name: str) -> Optional[np.ndarray]:
        mapping = {
            "color": self.colors, "low_feat": self.low_feats,
            "high_feat": self.high_feats, "transformed_feat": self.transformed_feats,
            "styled_color": self.styled_colors,
        }
        if name not in mapping:
            raise ConfigError(f"unknown channel {name!r}")
        return mapping[name]


def quat_to_matrix(q) -> np.ndarray:
    """Rotation matrix from a unit quaternion in w-x-y-z order. Works batched.

    Renormalizes in float64 so float32-stored quaternions still give exactly
    orthogonal matrices.
    """
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    m = np.empty((q.shape[0], 3, 3))
    m[:, 0, 0] = 1 - 2 * (y * y + z * z)
    m[:, 0, 1] = 2 * (x * y - w * z)
    m[:, 0, 2] = 2 * (x * z + w * y)
    m[:, 1, 0] = 2 * (x * y + w * z)
    m[:, 1, 1] = 1 - 2 * (x * x + z * z)
    m[:, 1, 2] = 2 * (y * z - w * x)
    m[:, 2, 0] = 2 * (x * z - w * y)
    m[:, 2, 1] = 2 * (y * z + w * x)
    m[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return m[0] if single else m


def covariance(g: Gaussian) -> np.ndarray:
    """3x3 world-space covariance R diag(scale^2) R^T of one Gaussian."""
    r = quat_to_matrix(g.rotation)
    s2 = np.asarray(g.scale, dtype=np.float64) ** 2
    return (r * s2[None, :]) @ r.T


def scene_covariances(scene: GaussianScene) -> np.ndarray:
    """(P, 3, 3) stack of world-space covariances."""
    r = quat_to_matrix(scene.rotations)
    s2 = scene.scales.astype(np.float64) ** 2
    return np.einsum("pij,pj,pkj->pik", r, s2, r)


# ---------------------------------------------------------------------------
# KNN index

@dataclass
class KnnIndex:
    neighbors: np.ndarray   # (P, K) int32; column 0 is the row's own index
    K: int

    def __post_init__(self):
        self.neighbors = np.ascontiguousarray(self.neighbors, dtype=np.int32)
        self.K = int(self.K)
        # lazy scatter plan for the decoder backward pass
        self._gather_order = None
        self._gather_starts = None

    @property
    def num_points(self) -> int:
        return self.neighbors.shape[0]

    def scatter_plan(self):
        """Stable ordering of (p, k) slots grouped by neighbor index.

        Used to turn the neighbor-gather transpose into one reduceat, with a
        fixed deterministic accumulation order.
        """
        if self._gather_order is None:
            flat = self.neighbors.ravel()
            order = np.argsort(flat, kind="stable")
            sorted_ids = flat[order]
            # every index appears at least once (each row contains itself)
            starts = np.searchsorted(sorted_ids, np.arange(self.num_points))
            self._gather_order = order
            self._gather_starts = starts
        return self._gather_order, self._gather_starts


def _knn_brute(means: np.ndarray, K: int) -> np.ndarray:
    """Exact all-pairs KNN: ties broken by smaller index, self forced first."""
    p = means.shape[0]
    x = means.astype(np.float64)
    d2 = np.sum(x * x, axis=1)[:, None] + np.sum(x * x, axis=1)[None, :] - 2.0 * (x @ x.T)
    np.fill_diagonal(d2, -1.0)  # self strictly first even among duplicates
    order = np.argsort(d2, axis=1, kind="stable")  # stable => index tie-break
    return order[:, :K].astype(np.int32)


def _knn_tree(means: np.ndarray, K: int) -> np.ndarray:
    """cKDTree KNN with deterministic (distance, index) ordering enforced."""
    p = means.shape[0]
    x = means.astype(np.float64)
    tree = cKDTree(x)
    kq = min(p, K + 8)
    dist, idx = tree.query(x, k=kq)
    rows = np.empty((p, K), dtype=np.int32)
    own = np.arange(p)
    for i in range(p):
        d, j = dist[i], idx[i]
        keep = j != i
        d, j = d[keep], j[keep]
        srt = np.lexsort((j, d))
        d, j = d[srt], j[srt]
        need = K - 1
        # candidate list must provably contain all (distance, index) winners:
        # if the last returned distance ties the cut, fall back to a full row
        if len(d) < need or (len(d) > need and d[need - 1] == d[-1]):
            delta = x - x[i]
            dd = np.einsum("nj,nj->n", delta, delta)
            dd[i] = -1.0
            full = np.argsort(dd, kind="stable")
            rows[i] = full[:K]
            continue
        rows[i, 0] = i
        rows[i, 1:] = j[:need]
    return rows


def build_knn(scene: GaussianScene, K: int, cache_dir=None) -> KnnIndex:
    """K nearest neighbors of every Gaussian center, self included at slot 0.

    Deterministic: neighbors are ordered by (distance, index).  Results are
    optionally cached on disk keyed by (geometry hash, K), since the index
    depends only on the fixed geometry.
    """
    p = scene.num_gaussians
    if K < 1 or K > p:
        raise ConfigError(f"K={K} must be in [1, P={p}]")
    cache_path = None
    if cache_dir is not None:
        key = hashlib.sha256(scene.means.tobytes() + struct.pack("<I", K)).hexdigest()[:16]
        cache_path = Path(cache_dir) / f"knn_{key}_k{K}.npy"
        if cache_path.exists():
            return KnnIndex(neighbors=np.load(cache_path), K=K)
    if p <= 4096:
        rows = _knn_brute(scene.means, K)
    else:
        rows = _knn_tree(scene.means, K)
    index = KnnIndex(neighbors=rows, K=K)
    if cache_path is not None:
        cache_path.parent.mkdir(parents=True, exist_ok=True)
        np.save(cache_path, index.neighbors)
    return index


# ---------------------------------------------------------------------------
# Native scene format ("GSSC")

def _write_native(scene: GaussianScene, path: Path):
    mask = 0
    for attr, bit in _OPTIONAL_CHANNELS:
        if getattr(scene, attr) is not None:
            mask |= bit
    dlow, dhigh = scene.feature_dims
    parts = [struct.pack("<4sHIHHB", SCENE_MAGIC, SCENE_VERSION,
                         scene.num_gaussians, dlow, dhigh, mask)]
    for attr in ("means", "scales", "rotations", "opacities", "colors"):
        parts.append(getattr(scene, attr).astype("<f4").tobytes())
    for attr, _ in _OPTIONAL_CHANNELS:
        arr = getattr(scene, attr)
        if arr is not None:
            parts.append(arr.astype("<f4").tobytes())
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def _read_native(data: bytes, path: Path) -> GaussianScene:
    head = struct.calcsize("<4sHIHHB")
    if len(data) < head:
        raise ParseError("truncated scene header", offset=len(data))
    magic, version, p, dlow, dhigh, mask = struct.unpack_from("<4sHIHHB", data, 0)
    if magic != SCENE_MAGIC:
        raise ParseError(f"bad magic {magic!r}", offset=0)
    if version != SCENE_VERSION:
        raise ParseError(f"unsupported scene version {version}", offset=4)
    offset = head
    fields = {}

    def take(name, count):
        nonlocal offset
        nbytes = 4 * count
        if offset + nbytes > len(data):
            raise ParseError(f"truncated {name} array", offset=offset)
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
        offset += nbytes
        return arr

    fields["means"] = take("means", p * 3).reshape(p, 3)
    fields["scales"] = take("scales", p * 3).reshape(p, 3)
    fields["rotations"] = take("rotations", p * 4).reshape(p, 4)
    fields["opacities"] = take("opacities", p)
    fields["colors"] = take("colors", p * 3).reshape(p, 3)
    dims = {"low_feats": dlow, "high_feats": dhigh, "transformed_feats": dhigh,
            "styled_colors": 3}
    for attr, bit in _OPTIONAL_CHANNELS:
        if mask & bit:
            d = dims[attr]
            fields[attr] = take(attr, p * d).reshape(p, d)
    if offset != len(data):
        raise ParseError("trailing bytes after scene payload", offset=offset)
    return GaussianScene(feature_dims=(dlow, dhigh), name=path.stem,
                         source_path=str(path), **fields)


# ---------------------------------------------------------------------------
# 3DGS PLY ingestion / export

def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _decode_scale(raw32):
    return np.exp(raw32.astype(np.float64)).astype(np.float32)


def _decode_opacity(raw32):
    return np.minimum(_sigmoid(raw32.astype(np.float64)), OPACITY_MAX).astype(np.float32)


def _decode_color(raw32):
    return np.clip(0.5 + SH_C0 * raw32.astype(np.float64), 0.0, 1.0).astype(np.float32)


def _snap_preimage(guess64, decode, target32):
    """Pick float32 raw values that decode() back to target32 bit-exactly.

    decode must be monotone non-decreasing elementwise.  Searches a few ulps
    around the analytic guess; falls back to the nearest candidate when the
    target is not in the image of decode (possible for extreme magnitudes).
    """
    raw = guess64.astype(np.float32)
    target = target32.astype(np.float32)
    for _ in range(6):
        got = decode(raw)
        bad = got != target
        if not bad.any():
            break
        toward = np.where(got[bad] > target[bad], np.float32(-np.inf), np.float32(np.inf))
        raw[bad] = np.nextafter(raw[bad], toward)
    return raw


def _write_ply(scene: GaussianScene, path: Path):
    p = scene.num_gaussians
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {p}"]
    header += [f"property float {name}" for name in _PLY_FIELDS]
    header.append("end_header")
    scales64 = scene.scales.astype(np.float64)
    log_scale = _snap_preimage(np.log(scales64), _decode_scale, scene.scales)
    op64 = np.clip(scene.opacities.astype(np.float64), 1e-9, OPACITY_MAX)
    logit = _snap_preimage(np.log(op64) - np.log1p(-op64), _decode_opacity, scene.opacities)
    f_dc = _snap_preimage((scene.colors.astype(np.float64) - 0.5) / SH_C0,
                          _decode_color, scene.colors)
    rec = np.empty((p, len(_PLY_FIELDS)), dtype="<f4")
    rec[:, 0:3] = scene.means
    rec[:, 3:6] = log_scale
    rec[:, 6:10] = scene.rotations
    rec[:, 10] = logit
    rec[:, 11:14] = f_dc
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(("\n".join(header) + "\n").encode("ascii") + rec.tobytes())
    tmp.replace(path)


_PLY_TYPES = {
    "float": ("<f4", 4), "float32": ("<f4", 4),
    "double": ("<f8", 8), "float64": ("<f8", 8),
    "int": ("<i4", 4), "int32": ("<i4", 4),
    "uint": ("<u4", 4), "uint32": ("<u4", 4),
    "short": ("<i2", 2), "ushort": ("<u2", 2),
    "char": ("i1", 1), "uchar": ("u1", 1), "int8": ("i1", 1), "uint8": ("u1", 1),
}


def _read_ply(data: bytes, path: Path) -> GaussianScene:
    end_tok = b"end_header\n"
    end = data.find(end_tok)
    if end < 0:
        raise ParseError("PLY header has no end_header", offset=len(data))
    body_off = end + len(end_tok)
    try:
        header_text = data[:end].decode("ascii")
    except UnicodeDecodeError as exc:
        raise ParseError("PLY header is not ASCII", offset=exc.start) from None

    fmt = None
    count = None
    props = []          # (name, dtype_str, size)
    in_vertex = False
    offset = 0
    for line in header_text.splitlines(keepends=True):
        stripped = line.strip()
        tok = stripped.split()
        if not tok or tok[0] == "comment":
            offset += len(line)
            continue
        if tok[0] == "ply":
            pass
        elif tok[0] == "format":
            if len(tok) < 2 or tok[1] not in ("ascii", "binary_little_endian"):
                raise ParseError(f"unsupported PLY format {stripped!r}", offset=offset)
            fmt = tok[1]
        elif tok[0] == "element":
            if len(tok) != 3:
                raise ParseError(f"malformed element line {stripped!r}", offset=offset)
            if tok[1] == "vertex":
                in_vertex = True
                try:
                    count = int(tok[2])
                except ValueError:
                    raise ParseError(f"bad vertex count {tok[2]!r}", offset=offset) from None
            else:
                if in_vertex is False and count is None:
                    raise ParseError(f"element {tok[1]!r} precedes vertex element", offset=offset)
                in_vertex = False  # trailing elements are ignored
        elif tok[0] == "property":
            if in_vertex:
                if len(tok) != 3:
                    raise ParseError(f"malformed property line {stripped!r}", offset=offset)
                if tok[1] not in _PLY_TYPES:
                    raise ParseError(f"unsupported property type {tok[1]!r}", offset=offset)
                dt, size = _PLY_TYPES[tok[1]]
                props.append((tok[2], dt, size))
        else:
            raise ParseError(f"unrecognized header line {stripped!r}", offset=offset)
        offset += len(line)
    if fmt is None or count is None:
        raise ParseError("PLY header missing format or vertex element", offset=end)
    names = [name for name, _, _ in props]
    missing = [f for f in _PLY_FIELDS if f not in names]
    if missing:
        raise ParseError(f"PLY vertex element missing attributes {missing}", offset=end)

    if fmt == "binary_little_endian":
        dtype = np.dtype([(name, dt) for name, dt, _ in props])
        need = dtype.itemsize * count
        if len(data) - body_off < need:
            raise ParseError("truncated PLY payload", offset=len(data))
        table = np.frombuffer(data, dtype=dtype, count=count, offset=body_off)
        col = {name: table[name] for name in _PLY_FIELDS}
    else:
        text = data[body_off:].decode("ascii", errors="replace")
        rows = text.split()
        width = len(props)
        if len(rows) < width * count:
            raise ParseError("truncated ASCII PLY payload", offset=len(data))
        values = np.array(rows[: width * count], dtype=np.float64).reshape(count, width)
        col = {name: values[:, i] for i, (name, _, _) in enumerate(props) if name in _PLY_FIELDS}

    raw = {name: np.asarray(col[name], dtype=np.float32) for name in _PLY_FIELDS}
    for name in _PLY_FIELDS:
        bad = ~np.isfinite(raw[name])
        if bad.any():
            raise ValidationError(f"non-finite {name!r} at Gaussian {int(np.argmax(bad))}")

    means = np.stack([raw["x"], raw["y"], raw["z"]], axis=1)
    scales = _decode_scale(np.stack([raw["scale_0"], raw["scale_1"], raw["scale_2"]], axis=1))
    rot = np.stack([raw[f"rot_{i}"] for i in range(4)], axis=1).astype(np.float64)
    norms = np.linalg.norm(rot, axis=1)
    zero = norms < 1e-12
    if zero.any():
        raise ValidationError(f"zero-norm rotation at Gaussian {int(np.argmax(zero))}")
    # renormalize only rows that actually need it, so load/save is idempotent
    off_unit = np.abs(norms - 1.0) > 1e-6
    rot[off_unit] /= norms[off_unit, None]
    opacities = _decode_opacity(raw["opacity"])
    colors = _decode_color(np.stack([raw["f_dc_0"], raw["f_dc_1"], raw["f_dc_2"]], axis=1))
    return GaussianScene(means=means, scales=scales, rotations=rot.astype(np.float32),
                         opacities=opacities, colors=colors,
                         name=path.stem, source_path=str(path))


# ---------------------------------------------------------------------------
# Public I/O entry points

def load_scene(path) -> GaussianScene:
    """Load a scene from a 3DGS PLY or from the native GSSC format.

    PLY attributes are decoded per the 3DGS convention: scales are exp of the
    stored log-scales, opacity is the logistic of the stored logit (clamped to
    0.999), RGB is the DC spherical-harmonic term; higher-order SH attributes
    are dropped.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    data = path.read_bytes()
    if data[:4] == SCENE_MAGIC:
        return _read_native(data, path)
    if data[:3] == b"ply":
        return _read_ply(data, path)
    raise ParseError(f"unrecognized scene file {path.name!r}", offset=0)


def save_scene(scene: GaussianScene, path):
    """Write a scene. `.ply` paths get a 3DGS-compatible PLY (geometry + RGB
    only); anything else gets the native format with every populated channel."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    scene.validate()
    if path.suffix.lower() == ".ply":
        _write_ply(scene, path)
    else:
        _write_native(scene, path)
