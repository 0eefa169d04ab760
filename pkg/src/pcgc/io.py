"""PLY subset, voxelization, toy data, and the model / bitstream file formats.

Bitstream layout (little-endian)::

    "PCGC" | u8 version=1 | u8 bitdepth | u8 num_scales | u64 model_hash
    | u32 n_input_points | num_scales x u32 k (coarsest first, finest last)
    | 4 x f64 frame (origin x, y, z, scale)
    | u32 octree_len | octree bytes
    | u16 latent_channels | u32 symbol_count | u32 feature_len | feature bytes
    | u32 CRC-32 of everything before it

Model file layout (little-endian)::

    "PCGM" | u8 version=1 | u8 num_scales | num_scales x u16 channel widths
    | u16 latent_channels | u8 irn_units | u8 n_filters | n_filters x u8 widths
    | u32 n_arrays | per array: u16 name_len, name, u8 ndim, ndim x u32 dims,
      f64 values (C order) | u64 content hash
"""
from __future__ import annotations

import hashlib
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    CorruptPayload,
    EmptyCloud,
    MalformedHeader,
    MissingProperty,
    ModelMismatch,
    UnsupportedFormat,
)
from .network import CodecModel, NetConfig, _conv_shapes
from .tensor import as_coords, unique_coords

# ------------------------------------------------------------------- PLY

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


@dataclass
class PointCloud:
    points: np.ndarray  # (N, 3) float64
    scale: float | None = None

    def __len__(self):
        return len(self.points)


def _parse_header(fh):
    first = fh.readline()
    if first.strip() != b"ply":
        raise MalformedHeader("missing 'ply' magic line")
    fmt = None
    elements = []
    while True:
        line = fh.readline()
        if not line:
            raise MalformedHeader("header not terminated by end_header")
        tok = line.decode("ascii", errors="replace").split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if len(tok) < 2:
                raise MalformedHeader("incomplete format line")
            fmt = tok[1]
        elif tok[0] == "element":
            if len(tok) != 3:
                raise MalformedHeader(f"bad element line: {line!r}")
            elements.append([tok[1], int(tok[2]), []])
        elif tok[0] == "property":
            if not elements:
                raise MalformedHeader("property before any element")
            if tok[1] == "list":
                if len(tok) != 5:
                    raise MalformedHeader(f"bad list property: {line!r}")
                elements[-1][2].append((tok[4], "list", tok[2], tok[3]))
            else:
                if len(tok) != 3 or tok[1] not in _PLY_TYPES:
                    raise MalformedHeader(f"bad property line: {line!r}")
                elements[-1][2].append((tok[2], tok[1]))
        elif tok[0] == "end_header":
            break
        else:
            raise MalformedHeader(f"unexpected header line: {line!r}")
    if fmt is None:
        raise MalformedHeader("missing format line")
    if fmt == "binary_big_endian":
        raise UnsupportedFormat("big-endian PLY is not supported")
    if fmt not in ("ascii", "binary_little_endian"):
        raise MalformedHeader(f"unknown PLY format {fmt!r}")
    return fmt, elements


def read_ply(path) -> PointCloud:
    with open(path, "rb") as fh:
        fmt, elements = _parse_header(fh)
        body = fh.read()
    names = [e[0] for e in elements]
    if "vertex" not in names:
        raise MissingProperty("no vertex element")
    vprops = elements[names.index("vertex")][2]
    pnames = [p[0] for p in vprops]
    for axis in "xyz":
        if axis not in pnames:
            raise MissingProperty(f"vertex element lacks property {axis!r}")
    if fmt == "ascii":
        return PointCloud(_read_ascii(body, elements, "vertex"))
    return PointCloud(_read_binary(body, elements, "vertex"))


def _read_ascii(body: bytes, elements, target):
    lines = body.decode("ascii").splitlines()
    pos = 0
    for name, count, props in elements:
        rows = lines[pos : pos + count]
        if len(rows) < count:
            raise MalformedHeader(f"file ends inside element {name!r}")
        pos += count
        if name != target:
            continue
        if any(len(p) > 2 for p in props):
            # list properties: parse row by row
            out = np.empty((count, 3))
            for r, line in enumerate(rows):
                vals = _split_row(line.split(), props)
                out[r] = [float(vals[a]) for a in "xyz"]
            return out
        table = np.array([line.split()[: len(props)] for line in rows], dtype=object)
        names = [p[0] for p in props]
        if count == 0:
            return np.zeros((0, 3))
        return np.column_stack([table[:, names.index(a)].astype(np.float64) for a in "xyz"])
    raise MissingProperty(f"no {target} element")


def _split_row(tokens, props):
    vals = {}
    i = 0
    for p in props:
        if len(p) > 2:
            n = int(tokens[i])
            i += 1 + n
        else:
            vals[p[0]] = tokens[i]
            i += 1
    return vals


def _read_binary(body: bytes, elements, target):
    offset = 0
    for name, count, props in elements:
        if any(len(p) > 2 for p in props):
            if name == target:
                raise UnsupportedFormat("list properties inside the vertex element are not supported in binary PLY")
            offset = _skip_binary_lists(body, offset, count, props)
            continue
        dtype = np.dtype([(p[0], "<" + _PLY_TYPES[p[1]]) for p in props])
        size = dtype.itemsize * count
        if offset + size > len(body):
            raise MalformedHeader(f"file ends inside element {name!r}")
        if name == target:
            arr = np.frombuffer(body, dtype=dtype, count=count, offset=offset)
            return np.column_stack([arr[a].astype(np.float64) for a in "xyz"]) if count else np.zeros((0, 3))
        offset += size
    raise MissingProperty(f"no {target} element")


def _skip_binary_lists(body, offset, count, props):
    for _ in range(count):
        for p in props:
            if len(p) > 2:
                ct = np.dtype("<" + _PLY_TYPES[p[2]])
                it = np.dtype("<" + _PLY_TYPES[p[3]])
                n = int(np.frombuffer(body, ct, 1, offset)[0])
                offset += ct.itemsize + n * it.itemsize
            else:
                offset += np.dtype(_PLY_TYPES[p[1]]).itemsize
    return offset


def write_ply(cloud, path, fmt: str = "binary") -> None:
    pts = np.asarray(getattr(cloud, "points", cloud), dtype=np.float64).reshape(-1, 3)
    kind = {"binary": "binary_little_endian", "ascii": "ascii"}.get(fmt, fmt)
    if kind not in ("ascii", "binary_little_endian"):
        raise UnsupportedFormat(f"cannot write PLY format {fmt!r}")
    header = (
        f"ply\nformat {kind} 1.0\nelement vertex {len(pts)}\n"
        "property double x\nproperty double y\nproperty double z\nend_header\n"
    ).encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        if kind == "ascii":
            for p in pts:
                fh.write(("%r %r %r\n" % (float(p[0]), float(p[1]), float(p[2]))).encode("ascii"))
        else:
            fh.write(pts.astype("<f8").tobytes())


# ----------------------------------------------------------- voxelization


def round_half_away(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return (np.sign(x) * np.floor(np.abs(x) + 0.5)).astype(np.int64)


@dataclass(frozen=True)
class VoxelFrame:
    """Lattice coordinate ``v`` corresponds to the point ``origin + v / scale``."""

    origin: tuple[float, float, float]
    scale: float

    def to_lattice(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return round_half_away((pts - np.asarray(self.origin)) * self.scale)

    def to_points(self, coords) -> np.ndarray:
        return np.asarray(self.origin) + np.asarray(coords, dtype=np.float64) / self.scale


def voxel_frame(cloud, bitdepth: int) -> VoxelFrame:
    pts = np.asarray(getattr(cloud, "points", cloud), dtype=np.float64)
    if len(pts) == 0:
        raise EmptyCloud("cannot voxelize an empty cloud")
    if not 1 <= bitdepth <= 21:
        raise ValueError("bitdepth must be in [1, 21]")
    lo = pts.min(axis=0)
    extent = float((pts.max(axis=0) - lo).max())
    scale = (2**bitdepth - 1) / extent if extent > 0 else 1.0
    return VoxelFrame(tuple(float(v) for v in lo), scale)


def voxelize(cloud, bitdepth: int, frame: VoxelFrame | None = None) -> np.ndarray:
    """Map points onto the ``[0, 2**bitdepth - 1]`` lattice, merging duplicates.

    The bounding cube (min corner, largest axis extent) is scaled onto the
    lattice unless an explicit ``frame`` is supplied.
    """
    pts = np.asarray(getattr(cloud, "points", cloud), dtype=np.float64)
    if len(pts) == 0:
        raise EmptyCloud("cannot voxelize an empty cloud")
    frame = frame or voxel_frame(pts, bitdepth)
    return unique_coords(frame.to_lattice(pts))


# ---------------------------------------------------------------- toy data


def _random_rotation(rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def _surface_samples(kind: str, rng, n: int):
    """``n`` points on a unit-sized surface patch and its area."""
    if kind == "sphere":
        tmax = rng.uniform(0.35, 0.6) * np.pi
        # uniform on the cap: cos(theta) uniform in [cos tmax, 1]
        ct = rng.uniform(np.cos(tmax), 1.0, n)
        st = np.sqrt(1 - ct**2)
        ph = rng.uniform(0, 2 * np.pi, n)
        pts = np.column_stack([st * np.cos(ph), st * np.sin(ph), ct])
        area = 2 * np.pi * (1 - np.cos(tmax))
    elif kind == "box":
        nfaces = int(rng.integers(2, 4))
        dims = rng.uniform(0.6, 1.0, 3)
        faces = rng.integers(0, nfaces, n)
        uv = rng.uniform(0, 1, (n, 2))
        pts = np.zeros((n, 3))
        area = 0.0
        for f in range(nfaces):
            a, b = [k for k in range(3) if k != f]
            m = faces == f
            pts[m, a] = uv[m, 0] * dims[a]
            pts[m, b] = uv[m, 1] * dims[b]
            area += dims[a] * dims[b] / nfaces
        area *= nfaces
    elif kind == "plane":
        aspect = rng.uniform(0.4, 1.0)
        pts = np.column_stack([rng.uniform(0, 1, n), rng.uniform(0, aspect, n), np.zeros(n)])
        area = aspect
    elif kind == "torus":
        minor = rng.uniform(0.25, 0.45)
        span = rng.uniform(0.5, 1.2) * np.pi
        u = rng.uniform(0, span, n)
        v = rng.uniform(0, 2 * np.pi, n)
        pts = np.column_stack(
            [(1 + minor * np.cos(v)) * np.cos(u), (1 + minor * np.cos(v)) * np.sin(u), minor * np.sin(v)]
        )
        area = span * 2 * np.pi * minor
    else:
        raise ValueError(f"unknown surface kind {kind!r}")
    return pts, area


TOY_KINDS = ("sphere", "box", "plane", "torus")


def toy_cloud(rng, bitdepth: int = 6, min_points=500, max_points=5000, max_fill=0.1, extent=(0.35, 0.55)):
    """One randomly rotated, densely sampled surface patch on the lattice."""
    side = 2**bitdepth
    for _ in range(1000):
        kind = TOY_KINDS[int(rng.integers(len(TOY_KINDS)))]
        size = int(round(rng.uniform(*extent) * side))
        size = max(2, min(size, side))
        rot = _random_rotation(rng)
        # shape parameters are drawn first, so both calls share one surface
        sub_seed = int(rng.integers(1 << 62))
        probe, area = _surface_samples(kind, np.random.default_rng(sub_seed), 4000)
        probe = probe @ rot.T
        scale = (size - 1) / float((probe.max(0) - probe.min(0)).max())
        n = int(min(2_000_000, max(4000, 24 * area * scale**2)))
        pts, _ = _surface_samples(kind, np.random.default_rng(sub_seed), n)
        pts = pts @ rot.T
        pts = (pts - pts.min(0)) * ((size - 1) / float((pts.max(0) - pts.min(0)).max()))
        shift = rng.integers(0, side - size + 1, 3)
        coords = unique_coords(round_half_away(pts) + shift)
        coords = coords[np.all((coords >= 0) & (coords < side), axis=1)]
        count = len(coords)
        cube = int((coords.max(0) - coords.min(0)).max()) + 1
        if min_points <= count <= max_points and count / cube**3 < max_fill:
            return coords
    raise RuntimeError("could not generate a toy cloud satisfying the constraints")


def gen_toy_dataset(seed, count: int, bitdepth: int = 6, **kw) -> list[np.ndarray]:
    """Deterministic list of voxelized surface patches (canonical coordinate arrays)."""
    rng = np.random.default_rng(seed)
    return [toy_cloud(rng, bitdepth, **kw) for _ in range(count)]


# --------------------------------------------------------------- model file

MODEL_MAGIC = b"PCGM"
MODEL_VERSION = 1


def serialize_model(model: CodecModel) -> bytes:
    cfg = model.config
    out = bytearray(MODEL_MAGIC)
    out += struct.pack("<BB", MODEL_VERSION, cfg.num_scales)
    out += struct.pack(f"<{cfg.num_scales}H", *cfg.channels)
    out += struct.pack("<HBB", cfg.latent_channels, cfg.irn_units_per_block, len(cfg.prior_filters))
    out += struct.pack(f"<{len(cfg.prior_filters)}B", *cfg.prior_filters)
    out += struct.pack("<I", len(model.params))
    for name, arr in model.params.items():
        raw = name.encode("ascii")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    out += struct.pack("<Q", content_hash(bytes(out)))
    return bytes(out)


def content_hash(data: bytes) -> int:
    return int.from_bytes(hashlib.sha256(data).digest()[:8], "little")


def model_hash(model: CodecModel) -> int:
    return struct.unpack("<Q", serialize_model(model)[-8:])[0]


class _Reader:
    def __init__(self, data: bytes, error=CorruptPayload):
        self.data = data
        self.pos = 0
        self.error = error

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise self.error("unexpected end of data")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))


def deserialize_model(data: bytes) -> CodecModel:
    if len(data) < 12 or data[:4] != MODEL_MAGIC:
        raise ModelMismatch("not a model file")
    (stored,) = struct.unpack("<Q", data[-8:])
    if content_hash(data[:-8]) != stored:
        raise ModelMismatch("model file hash does not match its contents")
    r = _Reader(data[:-8], ModelMismatch)
    r.take(4)
    version, m = r.unpack("BB")
    if version != MODEL_VERSION:
        raise ModelMismatch(f"unsupported model version {version}")
    channels = r.unpack(f"{m}H")
    latent, irn, nf = r.unpack("HBB")
    filters = r.unpack(f"{nf}B")
    cfg = NetConfig(m, channels, latent, irn, filters)
    (narr,) = r.unpack("I")
    params = {}
    for _ in range(narr):
        (ln,) = r.unpack("H")
        name = r.take(ln).decode("ascii")
        (ndim,) = r.unpack("B")
        shape = r.unpack(f"{ndim}I")
        size = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(r.take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
    if r.pos != len(r.data):
        raise ModelMismatch("trailing bytes in model file")
    expected = CodecModel.init(cfg, 0)
    if list(expected.params) != list(params) or any(
        expected.params[k].shape != params[k].shape for k in params
    ):
        raise ModelMismatch("parameter layout does not match the declared configuration")
    return CodecModel(cfg, params)


def save_model(model: CodecModel, path) -> int:
    data = serialize_model(model)
    Path(path).write_bytes(data)
    return struct.unpack("<Q", data[-8:])[0]


def load_model(path) -> tuple[CodecModel, int]:
    data = Path(path).read_bytes()
    model = deserialize_model(data)
    return model, struct.unpack("<Q", data[-8:])[0]


# ---------------------------------------------------------------- bitstream

BITSTREAM_MAGIC = b"PCGC"
BITSTREAM_VERSION = 1


@dataclass
class Bitstream:
    bitdepth: int
    num_scales: int
    model_hash: int
    n_input_points: int
    k_list: list[int]
    frame: VoxelFrame
    octree: bytes
    latent_channels: int
    symbol_count: int
    features: bytes

    def to_bytes(self) -> bytes:
        out = bytearray(BITSTREAM_MAGIC)
        out += struct.pack("<BBBQI", BITSTREAM_VERSION, self.bitdepth, self.num_scales, self.model_hash, self.n_input_points)
        out += struct.pack(f"<{self.num_scales}I", *self.k_list)
        out += struct.pack("<4d", *self.frame.origin, self.frame.scale)
        out += struct.pack("<I", len(self.octree)) + self.octree
        out += struct.pack("<HII", self.latent_channels, self.symbol_count, len(self.features)) + self.features
        out += struct.pack("<I", zlib.crc32(out))
        return bytes(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        if len(data) < 8 or data[:4] != BITSTREAM_MAGIC:
            raise CorruptPayload("bad bitstream magic")
        # CRC-32 catches every single-byte error, which the range decoder alone does not
        if struct.unpack("<I", data[-4:])[0] != zlib.crc32(data[:-4]):
            raise CorruptPayload("bitstream checksum mismatch")
        data = data[:-4]
        r = _Reader(data)
        r.take(4)
        version, bitdepth, m, mhash, npts = r.unpack("BBBQI")
        if version != BITSTREAM_VERSION:
            raise CorruptPayload(f"unsupported bitstream version {version}")
        if m < 1 or bitdepth <= m:
            raise CorruptPayload("inconsistent bitdepth / scale count")
        k_list = list(r.unpack(f"{m}I"))
        ox, oy, oz, scale = r.unpack("4d")
        if not np.all(np.isfinite([ox, oy, oz, scale])) or scale <= 0:
            raise CorruptPayload("invalid voxel frame")
        (olen,) = r.unpack("I")
        octree = r.take(olen)
        latent, nsym, flen = r.unpack("HII")
        feats = r.take(flen)
        if r.pos != len(data):
            raise CorruptPayload("trailing bytes after bitstream")
        if k_list[-1] != npts:
            raise CorruptPayload("finest k does not equal the input point count")
        return cls(bitdepth, m, mhash, npts, k_list, VoxelFrame((ox, oy, oz), scale), octree, latent, nsym, feats)

    def section_bits(self) -> dict[str, int]:
        header = 4 + 3 + 8 + 4 + 4 * self.num_scales + 32 + 4 + 2 + 4 + 4 + 4
        return {"header": 8 * header, "coords": 8 * len(self.octree), "features": 8 * len(self.features)}
