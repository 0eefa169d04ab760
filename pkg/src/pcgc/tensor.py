"""Sparse voxel tensors and the three sparse convolution flavors.

A :class:`SparseTensor` stores occupied integer coordinates in canonical
(lexicographic x, y, z) order together with one feature row per coordinate.
Convolutions only ever touch occupied sites: a missing neighbor contributes
zero.

Kernels are stored as ``(K**3, Cin, Cout)`` arrays whose first axis follows
:func:`kernel_offsets`. The ``*_apply`` / ``*_adjoint`` helpers work on raw
arrays plus a precomputed neighbor map, so the autodiff layer can reuse
them for the backward pass without rebuilding coordinate lookups.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    ChannelMismatch,
    DuplicateCoordinate,
    OutOfExtent,
    ShapeMismatch,
    UnknownCoordinate,
)

Coord = tuple[int, int, int]

STRIDE_KINDS = ("same", "down2", "up2")


def as_coords(coords: Iterable[Sequence[int]] | np.ndarray) -> np.ndarray:
    arr = np.asarray(coords, dtype=np.int64)
    if arr.size == 0:
        return np.zeros((0, 3), dtype=np.int64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ShapeMismatch(f"coordinates must be N x 3, got shape {arr.shape}")
    return arr


def canonical_order(coords: np.ndarray) -> np.ndarray:
    """Permutation sorting ``coords`` lexicographically by (x, y, z)."""
    return np.lexsort((coords[:, 2], coords[:, 1], coords[:, 0]))


def unique_coords(coords: np.ndarray) -> np.ndarray:
    """Deduplicated coordinates in canonical order."""
    if len(coords) == 0:
        return np.zeros((0, 3), dtype=np.int64)
    return np.unique(coords, axis=0)


def has_duplicates(sorted_coords: np.ndarray) -> bool:
    if len(sorted_coords) < 2:
        return False
    return bool(np.any(np.all(sorted_coords[1:] == sorted_coords[:-1], axis=1)))


@dataclass(frozen=True, eq=False)
class SparseTensor:
    """Occupied coordinates (canonical order) plus an ``N x C`` feature matrix.

    Build instances through :func:`make_sparse_tensor` unless the coordinates
    are already known to be unique and sorted.
    """

    coords: np.ndarray
    feats: np.ndarray

    @property
    def channels(self) -> int:
        return self.feats.shape[1]

    def __len__(self) -> int:
        return len(self.coords)

    def coord_list(self) -> list[Coord]:
        return [tuple(int(v) for v in c) for c in self.coords]

    def equals(self, other: "SparseTensor") -> bool:
        return (
            self.coords.shape == other.coords.shape
            and self.feats.shape == other.feats.shape
            and np.array_equal(self.coords, other.coords)
            and np.array_equal(self.feats, other.feats)
        )


def make_sparse_tensor(coords, feats, channels: int | None = None) -> SparseTensor:
    coords = as_coords(coords)
    feats = np.asarray(feats, dtype=np.float64)
    if feats.size == 0 and len(coords) == 0:
        c = channels if channels is not None else (feats.shape[1] if feats.ndim == 2 else 1)
        feats = np.zeros((0, c))
    if feats.ndim == 1:
        feats = feats[:, None]
    if feats.ndim != 2 or feats.shape[0] != len(coords):
        raise ShapeMismatch(f"{len(coords)} coordinates but feature shape {feats.shape}")
    if channels is not None and feats.shape[1] != channels:
        raise ShapeMismatch(f"declared {channels} channels, features have {feats.shape[1]}")
    if feats.shape[1] < 1:
        raise ShapeMismatch("channels must be >= 1")
    order = canonical_order(coords)
    coords = coords[order]
    if has_duplicates(coords):
        raise DuplicateCoordinate("input contains a repeated coordinate")
    return SparseTensor(coords, feats[order].copy())


def occupancy_tensor(coords) -> SparseTensor:
    """Input tensor with all-ones single-channel features."""
    coords = as_coords(coords)
    return make_sparse_tensor(coords, np.ones((len(coords), 1)))


# ---------------------------------------------------------------- lookups


DENSE_LOOKUP_LIMIT = 1 << 24


def lookup(base: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Row index of each ``query`` coordinate in canonical ``base``, or -1."""
    if len(base) == 0 or len(query) == 0:
        return np.full(len(query), -1, dtype=np.int64)
    lo = np.minimum(base.min(axis=0), query.min(axis=0))
    span = np.maximum(base.max(axis=0), query.max(axis=0)) - lo + 1
    volume = float(span[0]) * float(span[1]) * float(span[2])
    if volume <= DENSE_LOOKUP_LIMIT:
        grid = np.full(tuple(int(s) for s in span), -1, dtype=np.int64)
        b = base - lo
        grid[b[:, 0], b[:, 1], b[:, 2]] = np.arange(len(base))
        q = query - lo
        return grid[q[:, 0], q[:, 1], q[:, 2]]
    if volume < 2.0**62:
        sy, sz = int(span[1]), int(span[2])

        def key(c):
            c = c - lo
            return (c[:, 0] * sy + c[:, 1]) * sz + c[:, 2]

        bkeys = key(base)  # sorted because base is canonical
        qkeys = key(query)
        pos = np.minimum(np.searchsorted(bkeys, qkeys), len(bkeys) - 1)
        return np.where(bkeys[pos] == qkeys, pos, -1)
    table = {tuple(c): i for i, c in enumerate(base.tolist())}
    return np.array([table.get(tuple(c), -1) for c in query.tolist()], dtype=np.int64)


def kernel_offsets(width: int, stride_kind: str = "same") -> np.ndarray:
    """Offset triples in lexicographic order.

    ``same`` kernels are centered (``-r..r`` per axis); strided kernels use
    ``{0, 1}**3`` so offset index ``4*ox + 2*oy + oz``.
    """
    if stride_kind == "same":
        if width % 2 != 1:
            raise ValueError("same-scale kernels need an odd width")
        r = width // 2
        rng = np.arange(-r, r + 1)
    else:
        if width != 2:
            raise ValueError("strided kernels have width 2")
        rng = np.arange(2)
    g = np.stack(np.meshgrid(rng, rng, rng, indexing="ij"), axis=-1)
    return g.reshape(-1, 3).astype(np.int64)


def neighbor_map(coords: np.ndarray, width: int) -> np.ndarray:
    """``(N, K**3)`` row index of ``coords[u] + offset``; ``N`` marks a missing neighbor."""
    n = len(coords)
    offs = kernel_offsets(width)
    if width == 1:
        return np.arange(n, dtype=np.int64)[:, None]
    if n == 0:
        return np.zeros((0, len(offs)), dtype=np.int64)
    r = width // 2
    lo = coords.min(axis=0) - r
    span = coords.max(axis=0) + r - lo + 1
    if float(span[0]) * float(span[1]) * float(span[2]) > DENSE_LOOKUP_LIMIT:
        query = (coords[:, None, :] + offs[None, :, :]).reshape(-1, 3)
        idx = lookup(coords, query).reshape(n, len(offs))
        idx[idx < 0] = n
        return idx
    # padded dense grid: every neighbor lands inside, so flat offsets just add
    strides = np.array([span[1] * span[2], span[2], 1], dtype=np.int64)
    grid = np.full(int(span.prod()), n, dtype=np.int64)
    flat = (coords - lo) @ strides
    grid[flat] = np.arange(n)
    return np.take(grid, flat[:, None] + (offs @ strides)[None, :])


@dataclass(frozen=True, eq=False)
class DownMap:
    out_coords: np.ndarray
    children: np.ndarray  # (Nout, 8), sentinel = N_in
    parent: np.ndarray  # (N_in,)
    offset: np.ndarray  # (N_in,) child slot 4*ox + 2*oy + oz


def down_map(coords: np.ndarray) -> DownMap:
    parents = np.floor_divide(coords, 2)
    out = unique_coords(parents)
    parent = lookup(out, parents)
    o = coords - 2 * parents
    slot = 4 * o[:, 0] + 2 * o[:, 1] + o[:, 2]
    children = np.full((len(out), 8), len(coords), dtype=np.int64)
    children[parent, slot] = np.arange(len(coords))
    return DownMap(out, children, parent, slot)


@dataclass(frozen=True, eq=False)
class UpMap:
    out_coords: np.ndarray
    perm: np.ndarray  # canonical position -> parent-major row (parent * 8 + slot)


def up_map(coords: np.ndarray) -> UpMap:
    offs = kernel_offsets(2, "up2")
    children = (2 * coords[:, None, :] + offs[None, :, :]).reshape(-1, 3)
    perm = canonical_order(children)
    return UpMap(children[perm], perm)


# ------------------------------------------------- raw linear maps + adjoints


def _pad(x: np.ndarray) -> np.ndarray:
    return np.concatenate([x, np.zeros((1, x.shape[1]), dtype=x.dtype)], axis=0)


def _gather(x: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Rows ``idx`` of ``x`` with a zero row appended at index ``len(x)``, flattened per output row."""
    # np.take is markedly faster than fancy indexing for this access pattern
    return np.take(_pad(x), idx.ravel(), axis=0).reshape(idx.shape[0], -1)


def same_apply(feats, nbr, kernel, bias=None):
    """Returns (output, gathered columns). Columns are reused by the adjoint."""
    n, kk = nbr.shape
    cin = feats.shape[1]
    if kk == 1:
        cols = feats
        out = feats @ kernel[0]
    else:
        cols = _gather(feats, nbr)
        out = cols @ kernel.reshape(kk * cin, -1)
    if bias is not None:
        out = out + bias
    return out, cols


def same_adjoint(grad_out, nbr, kernel, cols, need_feats=True, nbr_rev=None):
    """Gradients (d_feats, d_kernel, d_bias) of :func:`same_apply`.

    ``nbr_rev`` may carry a precomputed ``nbr[:, ::-1]``; ``d_feats`` is None
    when ``need_feats`` is false.
    """
    n, kk = nbr.shape
    cin, cout = kernel.shape[1], kernel.shape[2]
    d_kernel = (grad_out.T @ cols).T.reshape(kk, cin, cout)
    d_bias = grad_out.sum(axis=0)
    d_feats = None
    if need_feats and kk == 1:
        d_feats = grad_out @ kernel[0].T
    elif need_feats:
        # neighbor relation is symmetric: offset k at u <-> offset (K^3-1-k) at u+o_k
        rev = nbr[:, ::-1] if nbr_rev is None else nbr_rev
        gcols = _gather(grad_out, rev)
        d_feats = gcols @ kernel.transpose(0, 2, 1).reshape(kk * cout, cin)
    return d_feats, d_kernel, d_bias


def down_apply(feats, dmap: DownMap, kernel, bias=None):
    nout = len(dmap.out_coords)
    cin = feats.shape[1]
    cols = _gather(feats, dmap.children)
    out = cols @ kernel.reshape(8 * cin, -1)
    if bias is not None:
        out = out + bias
    return out, cols


def down_adjoint(grad_out, dmap: DownMap, kernel, cols):
    cin, cout = kernel.shape[1], kernel.shape[2]
    d_kernel = (grad_out.T @ cols).T.reshape(8, cin, cout)
    d_bias = grad_out.sum(axis=0)
    per_slot = (grad_out @ kernel.transpose(2, 0, 1).reshape(cout, 8 * cin)).reshape(-1, 8, cin)
    d_feats = per_slot[dmap.parent, dmap.offset]
    return d_feats, d_kernel, d_bias


def up_apply(feats, umap: UpMap, kernel, bias=None):
    n, cin = feats.shape
    cout = kernel.shape[2]
    wt = kernel.transpose(1, 0, 2).reshape(cin, 8 * cout)
    out = (feats @ wt).reshape(n * 8, cout)[umap.perm]
    if bias is not None:
        out = out + bias
    return out, None


def up_adjoint(grad_out, umap: UpMap, kernel, feats):
    cin, cout = kernel.shape[1], kernel.shape[2]
    n = feats.shape[0]
    g = np.empty_like(grad_out)
    g[umap.perm] = grad_out
    g = g.reshape(n, 8 * cout)
    wt = kernel.transpose(1, 0, 2).reshape(cin, 8 * cout)
    d_feats = g @ wt.T
    d_kernel = (feats.T @ g).reshape(cin, 8, cout).transpose(1, 0, 2)
    d_bias = grad_out.sum(axis=0)
    return d_feats, d_kernel, d_bias


# ---------------------------------------------------------- public ops


@dataclass
class ConvWeights:
    kernel: np.ndarray
    bias: np.ndarray
    kernel_width: int
    stride_kind: str = "same"

    def __post_init__(self):
        if self.stride_kind not in STRIDE_KINDS:
            raise ValueError(f"unknown stride kind {self.stride_kind!r}")
        if self.stride_kind == "same" and self.kernel_width % 2 != 1:
            raise ValueError("same-scale convolution requires an odd kernel width")
        if self.stride_kind != "same" and self.kernel_width != 2:
            raise ValueError("strided convolution requires kernel width 2")
        k3 = self.kernel_width**3
        if self.kernel.ndim != 3 or self.kernel.shape[0] != k3:
            raise ShapeMismatch(f"kernel must be ({k3}, Cin, Cout), got {self.kernel.shape}")
        if self.bias.shape != (self.kernel.shape[2],):
            raise ShapeMismatch("bias length must equal Cout")

    @property
    def cin(self) -> int:
        return self.kernel.shape[1]

    @property
    def cout(self) -> int:
        return self.kernel.shape[2]

    @classmethod
    def zeros(cls, width, cin, cout, stride_kind="same") -> "ConvWeights":
        return cls(np.zeros((width**3, cin, cout)), np.zeros(cout), width, stride_kind)


def _check(t: SparseTensor, w: ConvWeights, kind: str):
    if w.stride_kind != kind:
        raise ValueError(f"expected {kind} weights, got {w.stride_kind}")
    if w.cin != t.channels:
        raise ChannelMismatch(f"kernel expects {w.cin} channels, tensor has {t.channels}")


def conv_same(t: SparseTensor, w: ConvWeights, nbr: np.ndarray | None = None) -> SparseTensor:
    _check(t, w, "same")
    if len(t) == 0:
        return SparseTensor(t.coords, np.zeros((0, w.cout)))
    if nbr is None:
        nbr = neighbor_map(t.coords, w.kernel_width)
    out, _ = same_apply(t.feats, nbr, w.kernel, w.bias)
    return SparseTensor(t.coords, out)


def conv_down(t: SparseTensor, w: ConvWeights, dmap: DownMap | None = None) -> SparseTensor:
    _check(t, w, "down2")
    if len(t) == 0:
        return SparseTensor(t.coords, np.zeros((0, w.cout)))
    dmap = dmap or down_map(t.coords)
    out, _ = down_apply(t.feats, dmap, w.kernel, w.bias)
    return SparseTensor(dmap.out_coords, out)


def conv_up(t: SparseTensor, w: ConvWeights, umap: UpMap | None = None) -> SparseTensor:
    _check(t, w, "up2")
    if len(t) == 0:
        return SparseTensor(t.coords, np.zeros((0, w.cout)))
    umap = umap or up_map(t.coords)
    out, _ = up_apply(t.feats, umap, w.kernel, w.bias)
    return SparseTensor(umap.out_coords, out)


def prune(t: SparseTensor, keep) -> SparseTensor:
    keep = unique_coords(as_coords(keep))
    idx = lookup(t.coords, keep)
    if np.any(idx < 0):
        raise UnknownCoordinate("keep contains a coordinate absent from the tensor")
    return SparseTensor(t.coords[idx], t.feats[idx])


def downsample_coords(coords: np.ndarray, times: int = 1) -> np.ndarray:
    """Unique ``floor(c / 2**times)`` in canonical order."""
    coords = as_coords(coords)
    if times == 0:
        return unique_coords(coords)
    return unique_coords(np.floor_divide(coords, 2**times))


def to_dense(t: SparseTensor, extent) -> np.ndarray:
    """Dense ``(X, Y, Z, C)`` array; ``extent = (lo, shape)`` in lattice units."""
    lo, shape = (np.asarray(e, dtype=np.int64) for e in extent)
    arr = np.zeros(tuple(int(s) for s in shape) + (t.channels,))
    if len(t) == 0:
        return arr
    rel = t.coords - lo
    if np.any(rel < 0) or np.any(rel >= shape):
        raise OutOfExtent("tensor has coordinates outside the requested extent")
    arr[rel[:, 0], rel[:, 1], rel[:, 2]] = t.feats
    return arr


def from_dense(arr: np.ndarray, lo=(0, 0, 0)) -> SparseTensor:
    """Sites with any nonzero channel become occupied coordinates."""
    occ = np.argwhere(np.any(arr != 0, axis=-1))
    feats = arr[occ[:, 0], occ[:, 1], occ[:, 2]]
    coords = occ.astype(np.int64) + np.asarray(lo, dtype=np.int64)
    return make_sparse_tensor(coords, feats.reshape(len(coords), arr.shape[-1]), arr.shape[-1])
