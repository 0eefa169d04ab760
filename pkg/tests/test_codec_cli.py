import os
from pathlib import Path

import numpy as np
import pytest

from pcgc import cli
from pcgc.codec import decode_file, encode_file, k_list_for, reference_reconstruction
from pcgc.errors import CorruptPayload, ModelMismatch
from pcgc.io import Bitstream, gen_toy_dataset, read_ply, save_model, voxel_frame, voxelize, write_ply
from pcgc.metrics import bpp, read_rd_csv
from pcgc.network import CodecModel, NetConfig, ground_truth_at_scale

NET = NetConfig(channels=(4, 8, 8), latent_channels=4, irn_units_per_block=1)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("codec")
    model = CodecModel.init(NET, 3)
    save_model(model, d / "model.pcgm")
    cloud = gen_toy_dataset(11, 1)[0].astype(float) * 0.37 + [5.0, -2.0, 1.0]
    write_ply(cloud, d / "in.ply")
    stats = encode_file(d / "in.ply", d / "model.pcgm", d / "in.bin")
    return d, model, stats


def voxelized_input(d):
    return voxelize(read_ply(d / "in.ply"), 6)


def test_round_trip_matches_in_process(workdir):
    d, model, stats = workdir
    decode_file(d / "in.bin", d / "model.pcgm", d / "out.ply")
    x = voxelized_input(d)
    frame = voxel_frame(read_ply(d / "in.ply"), 6)
    rec = voxelize(read_ply(d / "out.ply"), 6, frame)
    assert np.array_equal(rec, reference_reconstruction(x, model))
    assert len(read_ply(d / "out.ply")) == stats.n_points == len(x)


def test_accounting(workdir):
    d, _, stats = workdir
    size = (d / "in.bin").stat().st_size
    assert stats.total_bits == 8 * size
    assert stats.header_bits + stats.coord_bits + stats.feature_bits == stats.total_bits
    assert stats.bpp == bpp(8 * size, stats.n_points)


def test_k_list_is_ground_truth_counts(workdir):
    d, _, stats = workdir
    x = voxelized_input(d)
    assert stats.k_list == [len(ground_truth_at_scale(x, j)) for j in (2, 1, 0)]
    assert Bitstream.from_bytes((d / "in.bin").read_bytes()).k_list == stats.k_list


def test_k_multiplier_scales_intermediate_only():
    x = gen_toy_dataset(2, 1)[0]
    base = k_list_for(x, 3)
    more = k_list_for(x, 3, 2.0)
    assert more[-1] == base[-1] == len(x)
    assert more[:2] == [2 * k for k in base[:2]]


def test_decode_is_deterministic(workdir):
    d, _, _ = workdir
    decode_file(d / "in.bin", d / "model.pcgm", d / "a.ply")
    decode_file(d / "in.bin", d / "model.pcgm", d / "b.ply")
    assert (d / "a.ply").read_bytes() == (d / "b.ply").read_bytes()


def test_encode_is_deterministic(workdir, tmp_path):
    d, _, _ = workdir
    encode_file(d / "in.ply", d / "model.pcgm", tmp_path / "again.bin")
    assert (tmp_path / "again.bin").read_bytes() == (d / "in.bin").read_bytes()


def test_corrupt_feature_byte_leaves_no_output(workdir, tmp_path):
    d, _, _ = workdir
    data = bytearray((d / "in.bin").read_bytes())
    stream = Bitstream.from_bytes(bytes(data))
    feature_start = len(data) - 4 - len(stream.features)
    for offset in (0, len(stream.features) // 2, len(stream.features) - 1):
        bad = bytearray(data)
        bad[feature_start + offset] ^= 0x5A
        (tmp_path / "bad.bin").write_bytes(bytes(bad))
        out = tmp_path / "bad.ply"
        with pytest.raises(CorruptPayload):
            decode_file(tmp_path / "bad.bin", d / "model.pcgm", out)
        assert not out.exists()
        assert not [p for p in tmp_path.iterdir() if p.name.endswith(".tmp")]


def test_wrong_model_rejected(workdir, tmp_path):
    d, _, _ = workdir
    save_model(CodecModel.init(NET, 4), tmp_path / "other.pcgm")
    with pytest.raises(ModelMismatch):
        decode_file(d / "in.bin", tmp_path / "other.pcgm", tmp_path / "x.ply")


# ---------------------------------------------------------------- CLI


def run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_cli_selftest(capsys):
    code, out, _ = run(["selftest"], capsys)
    assert code == 0 and "FAIL" not in out


def test_cli_encode_without_model_is_usage_error(workdir, capsys):
    d, _, _ = workdir
    code, _, err = run(["encode", d / "in.ply", "--out", d / "x.bin"], capsys)
    assert code == 2 and "usage:" in err and "--model" in err


def test_cli_unknown_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["encode", "--no-such-flag"])
    assert exc.value.code == 2


def test_cli_runtime_failure_exits_1(workdir, tmp_path, capsys):
    d, _, _ = workdir
    code, _, err = run(["encode", d / "in.ply", "--model", tmp_path / "missing", "--out", tmp_path / "o.bin"], capsys)
    assert code == 1 and len(err.strip().splitlines()) == 1


def test_cli_encode_decode_eval(workdir, tmp_path, capsys):
    d, _, _ = workdir
    code, out, _ = run(["encode", d / "in.ply", "--model", d / "model.pcgm", "--out", tmp_path / "s.bin"], capsys)
    assert code == 0 and "bpp" in out
    code, _, _ = run(["decode", tmp_path / "s.bin", "--model", d / "model.pcgm", "--out", tmp_path / "r.ply"], capsys)
    assert code == 0
    csv = tmp_path / "rd.csv"
    argv = ["eval", "--rec", tmp_path / "r.ply", "--ref", d / "in.ply", "--bitstream", tmp_path / "s.bin"]
    code, out, _ = run(argv + ["--label", "x", "--csv", csv], capsys)
    assert code == 0
    (row,) = read_rd_csv(csv)
    assert row.label == "x" and row.bpp == 8 * (tmp_path / "s.bin").stat().st_size / len(voxelized_input(d))
    assert out.strip() == f"x,{row.bpp!r},{row.d1_psnr!r},{row.d2_psnr!r}"


def test_cli_bdrate(tmp_path, capsys):
    a = tmp_path / "a.csv"
    b = tmp_path / "b.csv"
    rows = [(0.1, 60.0), (0.2, 63.5), (0.4, 66.0), (0.8, 68.0)]
    a.write_text("label,bpp,d1_psnr,d2_psnr\n" + "".join(f"p,{r},{q},{q}\n" for r, q in rows))
    b.write_text("label,bpp,d1_psnr,d2_psnr\n" + "".join(f"p,{2 * r},{q},{q}\n" for r, q in rows))
    code, out, _ = run(["bdrate", a, b], capsys)
    assert code == 0 and out.startswith("BD-Rate (D1): +100.0")


def test_config_precedence(tmp_path, monkeypatch):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("# comment\nsteps = 5\nlr-start = 0.01\nseed = 3\n")
    monkeypatch.setenv("PCGC_SEED", "9")
    flags = {"command": "train", "config": str(cfg), "out": "m", "steps": 7, "lr_start": None}
    o = cli.resolve("train", flags)
    assert o["steps"] == 7  # flag beats file
    assert o["lr_start"] == 0.01  # file beats default
    assert o["seed"] == 3  # file beats environment
    assert o["batch_size"] == 8  # default
    o = cli.resolve("train", {"command": "train", "out": "m"})
    assert o["seed"] == 9  # environment beats default
    monkeypatch.delenv("PCGC_SEED")
    assert cli.resolve("train", {"command": "train", "out": "m"})["seed"] == 0


def test_config_errors(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("steps 5\n")
    with pytest.raises(cli.UsageError):
        cli.resolve("train", {"command": "train", "config": str(cfg), "out": "m"})
    cfg.write_text("steps = many\n")
    with pytest.raises(cli.UsageError):
        cli.resolve("train", {"command": "train", "config": str(cfg), "out": "m"})


def test_cli_train_tiny(tmp_path, capsys):
    out = tmp_path / "t.pcgm"
    argv = ["train", "--toy", "--toy-count", 2, "--steps", 2, "--batch-size", 1, "--channels", "4,4,4",
            "--latent-channels", 2, "--seed", 1, "--out", out, "--log-every", 0]
    code, text, _ = run(argv, capsys)
    assert code == 0 and out.exists() and "trained" in text
    code, _, _ = run(argv[:-4] + ["--out", tmp_path / "t2.pcgm", "--log-every", 0], capsys)
    assert code == 0 and (tmp_path / "t2.pcgm").read_bytes() == out.read_bytes()
    code, _, err = run(["train", "--steps", 1, "--out", out], capsys)
    assert code == 2 and "--toy" in err
