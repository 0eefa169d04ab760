"""Fast oracle checks runnable from the command line (``pcgc selftest``)."""
from __future__ import annotations

import math
import time

import numpy as np

from . import entropy, tensor
from .autodiff import Tape
from .metrics import RDCurve, RDPoint, bd_rate, d1_psnr
from .octree import octree_decode, octree_encode
from .rangecoder import AdaptiveByteModel, RangeDecoder, RangeEncoder


def dense_conv_same(t: tensor.SparseTensor, w: tensor.ConvWeights, lo, shape) -> np.ndarray:
    """Dense zero-padded correlation evaluated at the occupied sites of ``t``."""
    grid = tensor.to_dense(t, (lo, shape))
    r = w.kernel_width // 2
    pad = np.pad(grid, ((r, r), (r, r), (r, r), (0, 0)))
    offs = tensor.kernel_offsets(w.kernel_width)
    out = np.zeros(tuple(shape) + (w.cout,))
    for k, (a, b, c) in enumerate(offs):
        win = pad[r + a : r + a + shape[0], r + b : r + b + shape[1], r + c : r + c + shape[2]]
        out += win @ w.kernel[k]
    loc = t.coords - np.asarray(lo)
    return out[loc[:, 0], loc[:, 1], loc[:, 2]] + w.bias


def check_conv(rng) -> bool:
    for _ in range(5):
        coords = np.unique(rng.integers(0, 8, (int(rng.integers(1, 60)), 3)), axis=0)
        t = tensor.make_sparse_tensor(coords, rng.normal(size=(len(coords), 3)))
        w = tensor.ConvWeights(rng.normal(size=(27, 3, 2)), rng.normal(size=2), 3)
        ref = dense_conv_same(t, w, (0, 0, 0), (8, 8, 8))
        if not np.allclose(tensor.conv_same(t, w).feats, ref, atol=1e-9, rtol=0):
            return False
    return True


def check_octree(rng) -> bool:
    for depth in (3, 5, 7):
        coords = np.unique(rng.integers(0, 1 << depth, (int(rng.integers(1, 300)), 3)), axis=0)
        if not np.array_equal(octree_decode(octree_encode(coords, depth)), coords):
            return False
    return True


def check_range_coder(rng) -> bool:
    syms = rng.choice(256, size=2000, p=np.r_[np.full(8, 0.1), np.full(248, 0.2 / 248)])
    enc = RangeEncoder()
    model = AdaptiveByteModel()
    for s in syms.tolist():
        model.encode(enc, s)
    data = enc.finish()
    dec = RangeDecoder(data)
    model = AdaptiveByteModel()
    out = [model.decode(dec) for _ in range(len(syms))]
    dec.finish()
    return out == syms.tolist()


def check_prior(rng) -> bool:
    prior = entropy.FactorizedPrior.init(4, rng)
    for ch in range(4):
        table = entropy.build_pmf_table(prior, ch)
        mass = entropy.prior_pmf(prior, ch, np.arange(table.n_min, table.n_max + 1)).sum()
        if mass < 0.999 or int(table.freq.sum()) != entropy.PROB_TOTAL:
            return False
    f = np.round(rng.normal(0, 3, (20, 4)))
    tables = entropy.build_pmf_tables(prior)
    return np.array_equal(entropy.decode_features(entropy.encode_features(f, tables), 20, tables), f)


def check_gradient(rng) -> bool:
    coords = np.unique(rng.integers(0, 5, (25, 3)), axis=0)
    x = rng.normal(size=(len(coords), 2))
    w = rng.normal(size=(27, 2, 2))
    b = rng.normal(size=2)
    nbr = tensor.neighbor_map(coords, 3)

    def f(wv):
        tape = Tape()
        y = tape.conv_same(tape.const(x), tape.param(wv), tape.const(b), nbr)
        return tape, tape.sum(tape.sigmoid(y))

    tape, out = f(w)
    tape.backward(out)
    wnode = tape.nodes[0]
    h = 1e-5
    for idx in [(0, 0, 0), (13, 1, 0), (26, 1, 1)]:
        wp, wm = w.copy(), w.copy()
        wp[idx] += h
        wm[idx] -= h
        num = (float(f(wp)[1].value) - float(f(wm)[1].value)) / (2 * h)
        if abs(num - wnode.grad[idx]) > 1e-6 * max(1.0, abs(num)):
            return False
    return True


def check_metrics(rng) -> bool:
    _, psnr = d1_psnr([(0, 0, 0)], [(1, 0, 0)], 63)
    curve = RDCurve(tuple(RDPoint(r, q, q) for r, q in [(0.1, 30), (0.2, 33), (0.4, 35), (0.8, 37)]))
    doubled = RDCurve(tuple(RDPoint(2 * p.bpp, p.d1_psnr, p.d2_psnr) for p in curve.points))
    return (
        math.isclose(psnr, 10 * math.log10(3 * 63**2))
        and bd_rate(curve, curve) == 0.0
        and abs(bd_rate(curve, doubled) - 100.0) < 1e-6
    )


CHECKS = {
    "sparse conv vs dense oracle": check_conv,
    "octree round trip": check_octree,
    "adaptive range coder round trip": check_range_coder,
    "factorized prior tables": check_prior,
    "conv gradient vs finite differences": check_gradient,
    "metrics identities": check_metrics,
}


def run(seed: int = 0, out=print) -> bool:
    rng = np.random.default_rng(seed)
    ok_all = True
    for name, fn in CHECKS.items():
        t0 = time.perf_counter()
        try:
            ok = bool(fn(rng))
            note = ""
        except Exception as exc:  # a crash is a failed check, reported on one line
            ok, note = False, f" ({type(exc).__name__}: {exc})"
        ok_all &= ok
        out(f"{'PASS' if ok else 'FAIL'}  {name}  [{time.perf_counter() - t0:.2f}s]{note}")
    return ok_all
