"""Geometry distortion (D1 point-to-point, D2 point-to-plane), bpp and BD-Rate."""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateNeighborhood, EmptyCloud, InsufficientPoints, NoOverlap, ZeroPoints

PSNR_CAP = 999.0
NORMAL_K = 12


@dataclass(frozen=True)
class RDPoint:
    bpp: float
    d1_psnr: float
    d2_psnr: float
    label: str = ""

    def __post_init__(self):
        if not math.isfinite(self.bpp) or self.bpp < 0:
            raise ValueError(f"bpp must be finite and >= 0, got {self.bpp}")


@dataclass(frozen=True)
class RDCurve:
    points: tuple[RDPoint, ...]

    def __post_init__(self):
        object.__setattr__(self, "points", tuple(sorted(self.points, key=lambda p: p.bpp)))
        rates = [p.bpp for p in self.points]
        if any(b <= a for a, b in zip(rates, rates[1:])):
            raise ValueError("bpp values of a curve must be distinct")

    def __len__(self):
        return len(self.points)

    def rates(self) -> np.ndarray:
        return np.array([p.bpp for p in self.points])

    def psnr(self, which: str) -> np.ndarray:
        if which not in ("d1", "d2"):
            raise ValueError("which must be 'd1' or 'd2'")
        return np.array([getattr(p, f"{which}_psnr") for p in self.points])


def _cloud(x) -> np.ndarray:
    arr = np.asarray(getattr(x, "coords", x), dtype=np.float64).reshape(-1, 3)
    if len(arr) == 0:
        raise EmptyCloud("metric inputs must be non-empty")
    return arr


def psnr_from_mse(mse: float, peak: float) -> float:
    if mse <= 0:
        return PSNR_CAP
    return float(10.0 * math.log10(3.0 * peak * peak / mse))


def _sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = a - b
    return (d * d).sum(axis=-1)


def nearest_neighbors(src, dst, tree: cKDTree | None = None) -> np.ndarray:
    """Index in ``dst`` of each ``src`` point's nearest neighbor.

    Among equidistant neighbors the lowest ``dst`` index wins, i.e. the
    canonically smallest coordinate when ``dst`` is canonical.
    """
    src = _cloud(src)
    dst = _cloud(dst)
    tree = tree or cKDTree(dst)
    k = min(8, len(dst))
    _, idx = tree.query(src, k=k)
    idx = idx.reshape(len(src), k)
    d2 = _sqdist(src[:, None, :], dst[idx])
    best = d2.min(axis=1)
    # smallest index among the candidates achieving the minimum
    cand = np.where(d2 == best[:, None], idx, len(dst))
    out = cand.min(axis=1)
    # if the k-th candidate still ties, more ties may hide beyond k
    open_rows = np.nonzero((d2[:, -1] == best) & (k < len(dst)))[0]
    for r in open_rows:
        ball = tree.query_ball_point(src[r], math.sqrt(best[r]) * (1 + 1e-12) + 1e-12)
        ball = np.asarray(ball, dtype=np.int64)
        bd = _sqdist(src[r], dst[ball])
        out[r] = ball[bd == bd.min()].min()
    return out


def _one_way(src, dst, dst_normals=None, tree=None) -> float:
    nn = nearest_neighbors(src, dst, tree)
    disp = src - dst[nn]
    if dst_normals is None:
        err = (disp * disp).sum(axis=1)
    else:
        err = (disp * dst_normals[nn]).sum(axis=1) ** 2
    return float(err.mean())


def d1_psnr(rec, ref, peak: float) -> tuple[float, float]:
    """Symmetric point-to-point MSE (max of both directions) and its PSNR."""
    rec, ref = _cloud(rec), _cloud(ref)
    mse = max(_one_way(rec, ref), _one_way(ref, rec))
    return mse, psnr_from_mse(mse, peak)


def d1_directions(rec, ref) -> tuple[float, float]:
    rec, ref = _cloud(rec), _cloud(ref)
    return _one_way(rec, ref), _one_way(ref, rec)


def knn_indices(cloud, k: int, tree: cKDTree | None = None) -> np.ndarray:
    """``(N, k)`` neighbor indices (self included), ordered by (distance, index)."""
    pts = _cloud(cloud)
    n = len(pts)
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}]")
    tree = tree or cKDTree(pts)
    rows = np.arange(n)
    out = np.empty((n, k), dtype=np.int64)
    todo = rows
    extra = 8
    while len(todo):
        kq = min(n, k + extra)
        _, idx = tree.query(pts[todo], k=kq)
        idx = idx.reshape(len(todo), kq)
        d2 = _sqdist(pts[todo][:, None, :], pts[idx])
        # (distance, index) ordering: sort by index, then stable-sort by distance
        key_order = np.argsort(idx, axis=1, kind="stable")
        idx = np.take_along_axis(idx, key_order, 1)
        d2 = np.take_along_axis(d2, key_order, 1)
        order = np.argsort(d2, axis=1, kind="stable")
        idx = np.take_along_axis(idx, order, 1)
        d2 = np.take_along_axis(d2, order, 1)
        # the k-th distance must be strictly below the farthest returned one
        settled = (kq == n) | (d2[:, k - 1] < d2[:, -1])
        out[todo[settled]] = idx[settled, :k]
        todo = todo[~settled]
        extra *= 4
    return out


def estimate_normals(cloud, k: int = NORMAL_K) -> np.ndarray:
    """Unit normals from the smallest-eigenvalue eigenvector of each k-NN covariance.

    Each normal is sign-fixed so its largest-magnitude component is positive.
    Neighborhoods of rank < 2 get ``(0, 0, 1)`` and a
    :class:`DegenerateNeighborhood` warning.
    """
    pts = _cloud(cloud)
    if k < 3 or k > len(pts):
        raise ValueError(f"need 3 <= k <= {len(pts)} points, got k={k}")
    nb = pts[knn_indices(pts, k)]
    centered = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    vals, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0].copy()
    scale = np.maximum(vals[:, 2], 1e-300)
    degenerate = (vals[:, 2] <= 1e-12) | (vals[:, 1] <= 1e-9 * scale)
    if degenerate.any():
        warnings.warn(
            f"{int(degenerate.sum())} neighborhoods have rank < 2; using the +z normal",
            DegenerateNeighborhood,
            stacklevel=2,
        )
        normals[degenerate] = (0.0, 0.0, 1.0)
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    lead = np.argmax(np.abs(normals), axis=1)
    sign = np.sign(normals[np.arange(len(normals)), lead])
    return normals * sign[:, None]


def d2_psnr(rec, ref, ref_normals=None, peak: float = 1.0, rec_normals=None, k: int = NORMAL_K):
    """Symmetric point-to-plane MSE and PSNR.

    The rec->ref direction projects onto ``ref_normals``; the reverse
    direction onto normals estimated on ``rec`` unless given.
    """
    rec, ref = _cloud(rec), _cloud(ref)
    if ref_normals is None:
        ref_normals = estimate_normals(ref, min(k, len(ref)))
    if rec_normals is None:
        rec_normals = estimate_normals(rec, min(k, len(rec))) if len(rec) >= 3 else _fallback_normals(len(rec))
    ref_normals = np.asarray(ref_normals, dtype=np.float64)
    rec_normals = np.asarray(rec_normals, dtype=np.float64)
    if ref_normals.shape != ref.shape or rec_normals.shape != rec.shape:
        raise ValueError("need one normal per point")
    mse = max(_one_way(rec, ref, ref_normals), _one_way(ref, rec, rec_normals))
    return mse, psnr_from_mse(mse, peak)


def _fallback_normals(n):
    warnings.warn("fewer than 3 points; using the +z normal", DegenerateNeighborhood, stacklevel=3)
    return np.tile([0.0, 0.0, 1.0], (n, 1))


def d2_directions(rec, ref, ref_normals, rec_normals) -> tuple[float, float]:
    rec, ref = _cloud(rec), _cloud(ref)
    return _one_way(rec, ref, np.asarray(ref_normals)), _one_way(ref, rec, np.asarray(rec_normals))


def bpp(total_bits: int, n_input_points: int) -> float:
    if n_input_points <= 0:
        raise ZeroPoints("bpp needs a positive input point count")
    return total_bits / n_input_points


def _fit(curve: RDCurve, which: str):
    return np.polyfit(curve.psnr(which), np.log10(curve.rates()), 3)


def bd_rate(curve_a: RDCurve, curve_b: RDCurve, which: str = "d1") -> float:
    """Average rate difference of ``curve_b`` relative to ``curve_a`` in percent.

    Negative values mean ``curve_b`` needs fewer bits at equal quality.
    """
    for c in (curve_a, curve_b):
        if len(c) < 4:
            raise InsufficientPoints("BD-Rate needs at least 4 points per curve")
    qa, qb = curve_a.psnr(which), curve_b.psnr(which)
    lo = max(qa.min(), qb.min())
    hi = min(qa.max(), qb.max())
    if not hi > lo:
        raise NoOverlap("the curves' quality ranges do not overlap")
    ia = np.polyint(_fit(curve_a, which))
    ib = np.polyint(_fit(curve_b, which))
    area_a = np.polyval(ia, hi) - np.polyval(ia, lo)
    area_b = np.polyval(ib, hi) - np.polyval(ib, lo)
    delta = (area_b - area_a) / (hi - lo)
    return float((10.0**delta - 1.0) * 100.0)


# ---------------------------------------------------------------- CSV

CSV_COLUMNS = ("label", "bpp", "d1_psnr", "d2_psnr")


def write_rd_csv(points, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for p in points:
            w.writerow([p.label, repr(p.bpp), repr(p.d1_psnr), repr(p.d2_psnr)])


def append_rd_csv(point: RDPoint, path) -> None:
    path = Path(path)
    fresh = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if fresh:
            w.writerow(CSV_COLUMNS)
        w.writerow([point.label, repr(point.bpp), repr(point.d1_psnr), repr(point.d2_psnr)])


def read_rd_csv(path) -> list[RDPoint]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and not set(CSV_COLUMNS[1:]) <= set(rows[0]):
        raise ValueError(f"CSV must have columns {', '.join(CSV_COLUMNS)}")
    return [RDPoint(float(r["bpp"]), float(r["d1_psnr"]), float(r["d2_psnr"]), r.get("label", "")) for r in rows]
