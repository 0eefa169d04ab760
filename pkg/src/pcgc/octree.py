"""Lossless octree coding of a voxel coordinate set.

Nodes are visited breadth first. Every occupied internal node emits one
occupancy byte where bit ``b`` flags child ``b = 4*x_bit + 2*y_bit + z_bit``.
Breadth-first order with children scanned in bit order is exactly ascending
Morton order of the node prefixes, which lets each level be computed with
array operations. The byte stream is range coded with an adaptive order-0
model.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CoordOutOfRange, CorruptPayload, EmptyInput
from .rangecoder import AdaptiveByteModel, RangeDecoder, RangeEncoder
from .tensor import as_coords, canonical_order, unique_coords

MAX_DEPTH = 21


@dataclass(frozen=True)
class OctreePayload:
    depth: int
    data: bytes


def morton_encode(coords: np.ndarray, depth: int) -> np.ndarray:
    codes = np.zeros(len(coords), dtype=np.int64)
    x, y, z = (coords[:, i].astype(np.int64) for i in range(3))
    for k in range(depth):
        codes |= ((x >> k) & 1) << (3 * k + 2)
        codes |= ((y >> k) & 1) << (3 * k + 1)
        codes |= ((z >> k) & 1) << (3 * k)
    return codes


def morton_decode(codes: np.ndarray, depth: int) -> np.ndarray:
    out = np.zeros((len(codes), 3), dtype=np.int64)
    for k in range(depth):
        out[:, 0] |= ((codes >> (3 * k + 2)) & 1) << k
        out[:, 1] |= ((codes >> (3 * k + 1)) & 1) << k
        out[:, 2] |= ((codes >> (3 * k)) & 1) << k
    return out


def occupancy_bytes(coords, depth: int) -> np.ndarray:
    """Breadth-first occupancy bytes before entropy coding."""
    coords = unique_coords(as_coords(coords))
    if len(coords) == 0:
        raise EmptyInput("octree coding needs at least one coordinate")
    if not 1 <= depth <= MAX_DEPTH:
        raise ValueError(f"depth must be in [1, {MAX_DEPTH}]")
    if coords.min() < 0 or coords.max() >= (1 << depth):
        raise CoordOutOfRange(f"coordinates must lie in [0, 2^{depth})")
    codes = np.unique(morton_encode(coords, depth))
    levels = []
    for level in range(depth):
        child = np.unique(codes >> (3 * (depth - level - 1)))
        parent = child >> 3
        bits = np.left_shift(1, child & 7)
        starts = np.flatnonzero(np.r_[True, parent[1:] != parent[:-1]])
        levels.append(np.bitwise_or.reduceat(bits, starts))
    return np.concatenate(levels).astype(np.uint8)


def octree_encode(coords, depth: int) -> OctreePayload:
    occ = occupancy_bytes(coords, depth)
    enc = RangeEncoder()
    model = AdaptiveByteModel()
    for b in occ.tolist():
        model.encode(enc, b)
    return OctreePayload(depth, enc.finish())


def octree_decode(payload: OctreePayload, max_points: int | None = None) -> np.ndarray:
    """Coordinates (canonical order) recovered from ``payload``.

    ``max_points`` bounds the node count at every level so that a corrupted
    stream fails fast instead of expanding without limit.
    """
    depth = payload.depth
    if not 1 <= depth <= MAX_DEPTH:
        raise CorruptPayload(f"invalid octree depth {depth}")
    dec = RangeDecoder(payload.data)
    model = AdaptiveByteModel()
    nodes = [0]
    for _ in range(depth):
        children = []
        for node in nodes:
            byte = model.decode(dec)
            if byte == 0:
                raise CorruptPayload("occupied node with empty occupancy byte")
            base = node << 3
            for b in range(8):
                if byte >> b & 1:
                    children.append(base | b)
        if max_points is not None and len(children) > max_points:
            raise CorruptPayload("octree expands beyond the declared point budget")
        nodes = children
    dec.finish()
    coords = morton_decode(np.asarray(nodes, dtype=np.int64), depth)
    return coords[canonical_order(coords)]
