import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import bd_rate_trapezoid, brute_d1, brute_d2_direction, brute_nn
from pcgc.errors import DegenerateNeighborhood, EmptyCloud, InsufficientPoints, NoOverlap, ZeroPoints
from pcgc.metrics import (
    PSNR_CAP,
    RDCurve,
    RDPoint,
    append_rd_csv,
    bd_rate,
    bpp,
    d1_directions,
    d1_psnr,
    d2_directions,
    d2_psnr,
    estimate_normals,
    nearest_neighbors,
    psnr_from_mse,
    read_rd_csv,
    write_rd_csv,
)

PEAK = 63.0


def lattice_cloud(rng, n, side=16):
    return np.unique(rng.integers(0, side, (n, 3)), axis=0)


def unit_normals(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def curve(rates, psnrs):
    return RDCurve(tuple(RDPoint(r, q, q) for r, q in zip(rates, psnrs)))


# ---------------------------------------------------------------- D1


def test_d1_identity_is_capped():
    c = np.array([[0, 0, 0], [1, 2, 3]])
    mse, psnr = d1_psnr(c, c, PEAK)
    assert mse == 0 and psnr == PSNR_CAP


def test_d1_single_points_distance_one():
    mse, psnr = d1_psnr([[0, 0, 0]], [[0, 0, 1]], PEAK)
    assert mse == 1.0
    assert psnr == pytest.approx(10 * math.log10(3 * PEAK**2), abs=1e-12)


def test_d1_empty_raises():
    with pytest.raises(EmptyCloud):
        d1_psnr(np.zeros((0, 3)), [[0, 0, 0]], PEAK)


@pytest.mark.parametrize("seed", range(6))
def test_d1_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    rec = lattice_cloud(rng, rng.integers(1, 500))
    ref = lattice_cloud(rng, rng.integers(1, 500))
    mse, psnr = d1_psnr(rec, ref, PEAK)
    oracle, a, b = brute_d1(rec, ref)
    assert mse == oracle
    assert d1_directions(rec, ref) == (a, b)
    assert psnr == psnr_from_mse(oracle, PEAK)


@given(st.integers(0, 2**32 - 1))
def test_nn_tie_break_matches_brute(seed):
    # small lattice, so exact ties are common
    rng = np.random.default_rng(seed)
    dst = lattice_cloud(rng, 30, side=5)
    src = rng.integers(-1, 6, (40, 3))
    assert np.array_equal(nearest_neighbors(src, dst), brute_nn(src, dst))


def test_nn_ties_beyond_first_candidates():
    # 12 lattice points at radius 5 exceed the kd-tree's first candidate batch
    ring = [(x, y, 0) for x in range(-5, 6) for y in range(-5, 6) if x * x + y * y == 25]
    ring = np.array(ring[::-1])
    assert nearest_neighbors([[0, 0, 0]], ring).tolist() == [0]
    shell = np.array([p for p in np.ndindex(3, 3, 3) if p != (1, 1, 1)])
    assert nearest_neighbors([[1, 1, 1]], shell).tolist() == brute_nn([[1, 1, 1]], shell).tolist()


def test_d1_symmetric(rng):
    a, b = lattice_cloud(rng, 100), lattice_cloud(rng, 60)
    assert d1_psnr(a, b, PEAK) == d1_psnr(b, a, PEAK)


# ---------------------------------------------------------------- normals


def test_plane_normals():
    grid = np.array([(x, y, 0) for x in range(6) for y in range(6)], dtype=float)
    n = estimate_normals(grid, 8)
    assert np.array_equal(n, np.tile([0.0, 0.0, 1.0], (36, 1)))


def test_line_is_degenerate():
    line = np.array([(i, 0, 0) for i in range(10)], dtype=float)
    with pytest.warns(DegenerateNeighborhood):
        n = estimate_normals(line, 4)
    assert np.array_equal(n, np.tile([0.0, 0.0, 1.0], (10, 1)))


def test_noisy_plane_normals(rng):
    pts = np.column_stack([rng.uniform(0, 30, 800), rng.uniform(0, 30, 800), rng.normal(0, 0.05, 800)])
    n = estimate_normals(pts, 12)
    assert np.mean(np.abs(n - [0, 0, 1])) < 0.1


def test_normals_unit_and_sign_fixed(rng):
    pts = rng.normal(size=(200, 3))
    n = estimate_normals(pts, 12)
    assert np.max(np.abs(np.linalg.norm(n, axis=1) - 1)) < 1e-9
    lead = n[np.arange(len(n)), np.argmax(np.abs(n), axis=1)]
    assert np.all(lead > 0)


def test_normals_k_bounds():
    with pytest.raises(ValueError):
        estimate_normals(np.zeros((5, 3)), 2)
    with pytest.raises(ValueError):
        estimate_normals(np.eye(3), 4)


# ---------------------------------------------------------------- D2


def test_d2_identity():
    c = np.array([(x, y, x * y % 3) for x in range(5) for y in range(5)], dtype=float)
    assert d2_psnr(c, c, peak=PEAK)[0] == 0


def test_d2_tangential_shift_is_free():
    ref = np.array([(x, y, 0) for x in range(10) for y in range(10)], dtype=float)
    rec = ref + [0.3, 0.2, 0.0]
    normals = np.tile([0.0, 0.0, 1.0], (100, 1))
    d2, _ = d2_psnr(rec, ref, normals, PEAK, rec_normals=normals)
    d1, _ = d1_psnr(rec, ref, PEAK)
    assert d2 == pytest.approx(0.0, abs=1e-24) and d1 > 0


@pytest.mark.parametrize("seed", range(6))
def test_d2_matches_brute_and_is_bounded_by_d1(seed):
    rng = np.random.default_rng(100 + seed)
    rec = lattice_cloud(rng, rng.integers(1, 400))
    ref = lattice_cloud(rng, rng.integers(1, 400))
    nr, nf = unit_normals(rng, len(rec)), unit_normals(rng, len(ref))
    fwd, bwd = d2_directions(rec, ref, nf, nr)
    assert fwd == pytest.approx(brute_d2_direction(rec, ref, nf), rel=1e-15, abs=0)
    assert bwd == pytest.approx(brute_d2_direction(ref, rec, nr), rel=1e-15, abs=0)
    mse, _ = d2_psnr(rec, ref, nf, PEAK, rec_normals=nr)
    assert mse == max(fwd, bwd)
    a, b = d1_directions(rec, ref)
    assert fwd <= a + 1e-12 and bwd <= b + 1e-12


def test_d2_estimates_normals_when_missing(rng):
    ref = lattice_cloud(rng, 300)
    rec = lattice_cloud(rng, 300)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateNeighborhood)
        auto = d2_psnr(rec, ref, peak=PEAK)
        given_ = d2_psnr(rec, ref, estimate_normals(ref), PEAK, rec_normals=estimate_normals(rec))
    assert auto == given_


def test_d2_symmetric(rng):
    a, b = lattice_cloud(rng, 80), lattice_cloud(rng, 90)
    na, nb = unit_normals(rng, len(a)), unit_normals(rng, len(b))
    assert d2_psnr(a, b, nb, PEAK, rec_normals=na) == d2_psnr(b, a, na, PEAK, rec_normals=nb)


# ---------------------------------------------------------------- bpp


def test_bpp():
    assert bpp(1000, 1000) == 1.0
    with pytest.raises(ZeroPoints):
        bpp(10, 0)


# ---------------------------------------------------------------- BD-Rate

RATES = [0.1, 0.2, 0.4, 0.8]
PSNRS = [60.0, 63.5, 66.0, 68.0]


def test_bd_identical_is_exactly_zero():
    a = curve(RATES, PSNRS)
    assert bd_rate(a, a) == 0.0


def test_bd_doubled_rates():
    a = curve(RATES, PSNRS)
    b = curve([2 * r for r in RATES], PSNRS)
    assert abs(bd_rate(a, b) - 100.0) < 0.1
    assert abs(bd_rate(b, a) + 50.0) < 0.1


def test_bd_matches_trapezoid_oracle():
    ra, qa = [0.12, 0.25, 0.5, 0.95], [58.0, 62.0, 65.5, 67.0]
    rb, qb = [0.1, 0.22, 0.41, 0.7], [58.5, 62.5, 65.0, 68.0]
    got = bd_rate(curve(ra, qa), curve(rb, qb))
    assert abs(got - bd_rate_trapezoid(ra, qa, rb, qb)) < 0.1


@given(st.lists(st.floats(0.01, 2.0), min_size=4, max_size=6, unique=True), st.floats(-3, 3))
def test_bd_antisymmetry(rates, shift):
    rates = sorted(rates)
    qa = [55 + 10 * math.log10(r / rates[0] + 1) for r in rates]
    qb = [q + shift for q in qa]
    a, b = curve(rates, qa), curve([r * 1.3 for r in rates], qb)
    try:
        ab, ba = bd_rate(a, b), bd_rate(b, a)
    except NoOverlap:
        return
    assert abs((1 + ab / 100) * (1 + ba / 100) - 1) < 1e-6


def test_bd_errors():
    with pytest.raises(InsufficientPoints):
        bd_rate(curve(RATES[:3], PSNRS[:3]), curve(RATES, PSNRS))
    with pytest.raises(NoOverlap):
        bd_rate(curve(RATES, PSNRS), curve(RATES, [p + 20 for p in PSNRS]))


def test_curve_validation():
    with pytest.raises(ValueError):
        curve([0.1, 0.1, 0.2, 0.3], PSNRS)
    with pytest.raises(ValueError):
        RDPoint(float("nan"), 1.0, 1.0)
    c = curve(RATES[::-1], PSNRS[::-1])
    assert c.rates().tolist() == RATES


# ---------------------------------------------------------------- CSV


def test_csv_round_trip(tmp_path):
    pts = [RDPoint(0.1 * i + 0.01, 60 + i, 65 + i, f"lam{i}") for i in range(4)]
    path = tmp_path / "rd.csv"
    write_rd_csv(pts, path)
    assert read_rd_csv(path) == pts
    assert path.read_text().splitlines()[0] == "label,bpp,d1_psnr,d2_psnr"
    other = tmp_path / "append.csv"
    for p in pts:
        append_rd_csv(p, other)
    assert read_rd_csv(other) == pts


def test_csv_rejects_wrong_columns(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        read_rd_csv(path)
