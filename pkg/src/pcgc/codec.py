"""End-to-end geometry codec: PLY in, bitstream out, and back."""
from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import entropy
from .errors import ChannelMismatch, CorruptPayload, EmptyInput, ModelMismatch
from .io import Bitstream, PointCloud, VoxelFrame, load_model, model_hash, read_ply, voxel_frame, voxelize, write_ply
from .metrics import bpp as bits_per_point
from .network import CodecModel, decode_hierarchical, encode_latent, ground_truth_at_scale
from .octree import OctreePayload, octree_decode, octree_encode
from .tensor import as_coords, occupancy_tensor

DEFAULT_BITDEPTH = 6


@dataclass
class CodecStats:
    n_points: int
    total_bits: int
    header_bits: int
    coord_bits: int
    feature_bits: int
    k_list: list[int]

    @property
    def bpp(self) -> float:
        return bits_per_point(self.total_bits, self.n_points)

    @property
    def coord_bpp(self) -> float:
        return bits_per_point(self.coord_bits, self.n_points)

    @property
    def feature_bpp(self) -> float:
        return bits_per_point(self.feature_bits, self.n_points)

    def summary(self) -> str:
        return (
            f"{self.n_points} points, {self.total_bits} bits, {self.bpp:.4f} bpp "
            f"(coordinates {self.coord_bpp:.4f}, features {self.feature_bpp:.4f}, header {self.header_bits} bits)"
        )


def k_list_for(coords: np.ndarray, num_scales: int, k_multiplier: float = 1.0) -> list[int]:
    """Ground-truth occupied counts per decoder scale, coarse to fine.

    ``k_multiplier`` rescales the intermediate scales only; the finest entry
    always equals the input point count.
    """
    out = []
    for j in reversed(range(num_scales)):
        n = len(ground_truth_at_scale(coords, j))
        if j > 0 and k_multiplier != 1.0:
            n = max(1, int(round(n * k_multiplier)))
        out.append(n)
    return out


def encode_coords(coords, model: CodecModel, bitdepth: int, frame: VoxelFrame, k_multiplier: float = 1.0) -> Bitstream:
    coords = as_coords(coords)
    if len(coords) == 0:
        raise EmptyInput("nothing to encode")
    m = model.config.num_scales
    if bitdepth <= m:
        raise ValueError(f"bitdepth must exceed the number of scales ({m})")
    if coords.min() < 0 or coords.max() >= 1 << bitdepth:
        raise ValueError(f"coordinates must lie in [0, 2^{bitdepth})")
    latent = encode_latent(occupancy_tensor(coords), model)
    f_hat = entropy.quantize_round(latent.feats)
    octree = octree_encode(latent.coords, bitdepth - m)
    tables = entropy.build_pmf_tables(model.prior())
    features = entropy.encode_features(f_hat, tables)
    return Bitstream(
        bitdepth=bitdepth,
        num_scales=m,
        model_hash=model_hash(model),
        n_input_points=len(coords),
        k_list=k_list_for(coords, m, k_multiplier),
        frame=frame,
        octree=octree.data,
        latent_channels=model.config.latent_channels,
        symbol_count=f_hat.size,
        features=features,
    )


def decode_coords(stream: Bitstream, model: CodecModel) -> np.ndarray:
    """Reconstructed lattice coordinates (canonical order)."""
    cfg = model.config
    if stream.model_hash != model_hash(model):
        raise ModelMismatch("bitstream was produced with a different model")
    if stream.num_scales != cfg.num_scales:
        raise ModelMismatch(f"bitstream has {stream.num_scales} scales, model has {cfg.num_scales}")
    if stream.latent_channels != cfg.latent_channels:
        raise ChannelMismatch(f"bitstream has {stream.latent_channels} latent channels, model has {cfg.latent_channels}")
    c_y = octree_decode(OctreePayload(stream.bitdepth - stream.num_scales, stream.octree), stream.n_input_points)
    if stream.symbol_count != len(c_y) * stream.latent_channels:
        raise CorruptPayload("feature symbol count does not match the decoded coordinates")
    tables = entropy.build_pmf_tables(model.prior())
    f_hat = entropy.decode_features(stream.features, len(c_y), tables)
    results = decode_hierarchical(c_y, f_hat.astype(np.float64), stream.k_list, model, mode="infer")
    return results[-1].kept


def reference_reconstruction(coords, model: CodecModel, k_list=None) -> np.ndarray:
    """In-process reconstruction with rounded latents and no entropy coding."""
    coords = as_coords(coords)
    latent = encode_latent(occupancy_tensor(coords), model)
    f_hat = entropy.quantize_round(latent.feats).astype(np.float64)
    k_list = k_list or k_list_for(coords, model.config.num_scales)
    return decode_hierarchical(latent.coords, f_hat, k_list, model, mode="infer")[-1].kept


def stream_stats(stream: Bitstream, data: bytes) -> CodecStats:
    sections = stream.section_bits()
    assert sum(sections.values()) == 8 * len(data)
    return CodecStats(
        stream.n_input_points, 8 * len(data), sections["header"], sections["coords"], sections["features"], stream.k_list
    )


def _atomic_write(path: Path, writer) -> None:
    """Write through a temporary sibling so failures leave no partial file."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    os.close(fd)
    try:
        writer(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_file(input_ply, model_path, out_path, bitdepth: int = DEFAULT_BITDEPTH, k_multiplier: float = 1.0) -> CodecStats:
    model, _ = load_model(model_path)
    cloud = read_ply(input_ply)
    frame = voxel_frame(cloud, bitdepth)
    coords = voxelize(cloud, bitdepth, frame)
    stream = encode_coords(coords, model, bitdepth, frame, k_multiplier)
    data = stream.to_bytes()
    _atomic_write(Path(out_path), lambda p: Path(p).write_bytes(data))
    return stream_stats(stream, data)


def decode_file(bitstream_path, model_path, out_ply, fmt: str = "binary") -> CodecStats:
    model, _ = load_model(model_path)
    data = Path(bitstream_path).read_bytes()
    stream = Bitstream.from_bytes(data)
    rec = decode_coords(stream, model)
    cloud = PointCloud(stream.frame.to_points(rec))
    _atomic_write(Path(out_ply), lambda p: write_ply(cloud, p, fmt))
    return stream_stats(stream, data)
