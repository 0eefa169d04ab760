import struct
import zlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pcgc.errors import CorruptPayload, EmptyCloud, MalformedHeader, MissingProperty, ModelMismatch, UnsupportedFormat
from pcgc.io import (
    Bitstream,
    PointCloud,
    VoxelFrame,
    deserialize_model,
    gen_toy_dataset,
    load_model,
    model_hash,
    read_ply,
    round_half_away,
    save_model,
    serialize_model,
    toy_cloud,
    voxel_frame,
    voxelize,
    write_ply,
)
from pcgc.network import CodecModel, NetConfig

SMALL = NetConfig(channels=(4, 4, 8), latent_channels=2, irn_units_per_block=1)


# ---------------------------------------------------------------- PLY


def test_minimal_ascii(tmp_path):
    p = tmp_path / "a.ply"
    p.write_text(
        "ply\nformat ascii 1.0\ncomment hi\nelement vertex 2\n"
        "property float x\nproperty float y\nproperty float z\nend_header\n"
        "1.5 2 -3\n0.1 0.2 0.30000000000000004\n"
    )
    cloud = read_ply(p)
    assert cloud.points.tolist() == [[1.5, 2.0, -3.0], [0.1, 0.2, 0.30000000000000004]]


def test_ascii_with_extra_properties_and_faces(tmp_path):
    p = tmp_path / "b.ply"
    p.write_text(
        "ply\nformat ascii 1.0\nelement vertex 3\nproperty uchar red\nproperty int x\nproperty int y\n"
        "property int z\nproperty list uchar int tags\nelement face 1\nproperty list uchar int vertex_indices\n"
        "end_header\n9 1 2 3 2 7 7\n9 4 5 6 0\n9 7 8 9 1 5\n3 0 1 2\n"
    )
    assert read_ply(p).points.tolist() == [[1, 2, 3], [4, 5, 6], [7, 8, 9]]


def test_binary_round_trip_bit_exact(tmp_path, rng):
    pts = rng.normal(0, 1e3, (500, 3))
    pts[0] = [np.nextafter(0, 1), -0.0, 1e308]
    write_ply(PointCloud(pts), tmp_path / "c.ply")
    back = read_ply(tmp_path / "c.ply").points
    assert back.tobytes() == pts.tobytes()


def test_ascii_round_trip_full_precision(tmp_path, rng):
    pts = rng.normal(size=(50, 3))
    write_ply(pts, tmp_path / "d.ply", fmt="ascii")
    assert np.array_equal(read_ply(tmp_path / "d.ply").points, pts)


def test_binary_mixed_types(tmp_path):
    header = (
        "ply\nformat binary_little_endian 1.0\nelement vertex 2\nproperty short x\n"
        "property float y\nproperty uchar flag\nproperty double z\nend_header\n"
    ).encode()
    body = struct.pack("<hfBd", -4, 0.5, 1, 2.25) + struct.pack("<hfBd", 7, -1.5, 0, 1e-3)
    (tmp_path / "e.ply").write_bytes(header + body)
    assert read_ply(tmp_path / "e.ply").points.tolist() == [[-4, 0.5, 2.25], [7, -1.5, 1e-3]]


@pytest.mark.parametrize(
    "text, err",
    [
        ("plx\nformat ascii 1.0\nend_header\n", MalformedHeader),
        ("ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\n", MalformedHeader),
        ("ply\nformat binary_big_endian 1.0\nelement vertex 0\nend_header\n", UnsupportedFormat),
        ("ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nend_header\n1 2\n", MissingProperty),
        ("ply\nformat ascii 1.0\nelement face 0\nend_header\n", MissingProperty),
        ("ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n1 2 3\n", MalformedHeader),
    ],
)
def test_ply_errors(tmp_path, text, err):
    p = tmp_path / "bad.ply"
    p.write_text(text)
    with pytest.raises(err):
        read_ply(p)


def test_write_rejects_unknown_format(tmp_path):
    with pytest.raises(UnsupportedFormat):
        write_ply(np.zeros((1, 3)), tmp_path / "x.ply", fmt="binary_big_endian")


# ---------------------------------------------------------------- voxelization


def test_round_half_away():
    assert round_half_away([0.5, -0.5, 1.5, -2.5, 0.49]).tolist() == [1, -1, 2, -3, 0]


def test_lattice_input_is_identity(rng):
    c = np.unique(rng.integers(0, 64, (300, 3)), axis=0)
    c = np.vstack([c, [[0, 0, 0], [63, 63, 63]]])
    out = voxelize(c.astype(float), 6)
    assert np.array_equal(out, np.unique(c, axis=0))


def test_close_points_merge():
    pts = np.array([[0.4, 0, 0], [0.6, 0, 0], [10.0, 0, 0]])
    assert voxelize(pts, 2).tolist() == [[0, 0, 0], [3, 0, 0]]
    frame = VoxelFrame((0.0, 0.0, 0.0), 1.0)
    assert voxelize(pts[:2], 4, frame).tolist() == [[0, 0, 0], [1, 0, 0]]
    assert voxelize(pts[:2], 4, VoxelFrame((0.0, 0.0, 0.0), 0.5)).tolist() == [[0, 0, 0]]


@given(st.lists(st.tuples(*[st.floats(-1e3, 1e3)] * 3), min_size=1, max_size=60), st.integers(1, 12))
def test_voxelize_bounds(points, bitdepth):
    pts = np.array(points)
    out = voxelize(pts, bitdepth)
    assert len(out) <= len(pts)
    assert out.min() >= 0 and out.max() <= 2**bitdepth - 1
    assert np.array_equal(out, np.unique(out, axis=0))


def test_frame_places_voxels_at_cell_centres(rng):
    pts = rng.uniform(-5, 5, (200, 3))
    frame = voxel_frame(pts, 7)
    back = frame.to_points(frame.to_lattice(pts))
    assert np.max(np.abs(back - pts)) <= 0.5 / frame.scale + 1e-12
    assert np.array_equal(frame.to_lattice(frame.to_points([[3, 4, 5]])), [[3, 4, 5]])


def test_voxelize_errors():
    with pytest.raises(EmptyCloud):
        voxelize(np.zeros((0, 3)), 6)
    with pytest.raises(ValueError):
        voxelize(np.zeros((2, 3)), 0)


# ---------------------------------------------------------------- toy data


def test_toy_dataset_deterministic():
    a, b = gen_toy_dataset(3, 6), gen_toy_dataset(3, 6)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not np.array_equal(a[0], gen_toy_dataset(4, 1)[0])


@pytest.mark.parametrize("seed", [0, 1])
def test_toy_clouds_in_bounds_and_surface_like(seed):
    for c in gen_toy_dataset(seed, 20):
        assert 500 <= len(c) <= 5000
        assert c.min() >= 0 and c.max() < 64
        assert np.array_equal(c, np.unique(c, axis=0))
        cube = int((c.max(0) - c.min(0)).max()) + 1
        assert len(c) / cube**3 < 0.1


def test_toy_cloud_other_bitdepth():
    c = toy_cloud(np.random.default_rng(0), bitdepth=7)
    assert c.max() < 128 and 500 <= len(c) <= 5000


# ---------------------------------------------------------------- model file


def test_model_round_trip_bit_identical(tmp_path):
    model = CodecModel.init(SMALL, 5)
    h = save_model(model, tmp_path / "m.pcgm")
    again, h2 = load_model(tmp_path / "m.pcgm")
    assert h == h2 == model_hash(model)
    assert again.config == model.config
    assert list(again.params) == list(model.params)
    assert all(again.params[k].tobytes() == model.params[k].tobytes() for k in model.params)
    assert serialize_model(again) == serialize_model(model)


def test_model_hash_changes_with_weights():
    a = CodecModel.init(SMALL, 5)
    b = a.copy()
    b.params["enc0.conv.b"][0] += 1e-300
    assert model_hash(a) != model_hash(b)


def test_model_file_corruption(rng):
    data = bytearray(serialize_model(CodecModel.init(SMALL, 0)))
    assert data[:4] == b"PCGM"
    with pytest.raises(ModelMismatch):
        deserialize_model(b"XXXX" + bytes(data[4:]))
    for pos in rng.integers(4, len(data), 20):
        bad = bytearray(data)
        bad[pos] ^= 0xFF
        with pytest.raises(ModelMismatch):
            deserialize_model(bytes(bad))
    with pytest.raises(ModelMismatch):
        deserialize_model(bytes(data[:-9]))


# ---------------------------------------------------------------- bitstream


def sample_stream():
    return Bitstream(
        bitdepth=6, num_scales=3, model_hash=0x0123456789ABCDEF, n_input_points=900,
        k_list=[30, 200, 900], frame=VoxelFrame((1.0, -2.0, 0.5), 12.5),
        octree=b"\x01\x02\x03", latent_channels=8, symbol_count=240, features=b"\xaa" * 17,
    )


def test_bitstream_layout_and_round_trip():
    s = sample_stream()
    data = s.to_bytes()
    assert data[:4] == b"PCGC" and data[4:7] == bytes([1, 6, 3])
    assert struct.unpack_from("<QI", data, 7) == (0x0123456789ABCDEF, 900)
    assert struct.unpack_from("<3I", data, 19) == (30, 200, 900)
    assert struct.unpack("<I", data[-4:])[0] == zlib.crc32(data[:-4])
    assert Bitstream.from_bytes(data) == s
    assert sum(s.section_bits().values()) == 8 * len(data)


def test_bitstream_rejects_damage():
    data = sample_stream().to_bytes()
    for bad in (data[:-1], data + b"\x00", b"PCGX" + data[4:], data[:4] + b"\x02" + data[5:]):
        with pytest.raises(CorruptPayload):
            Bitstream.from_bytes(bad)
    s = sample_stream()
    s.k_list = [30, 200, 899]  # checksum is valid, content is not
    with pytest.raises(CorruptPayload):
        Bitstream.from_bytes(s.to_bytes())


@given(st.integers(0, 10_000), st.integers(1, 255))
def test_bitstream_single_byte_fuzz(pos, flip):
    data = bytearray(sample_stream().to_bytes())
    data[pos % len(data)] ^= flip
    with pytest.raises(CorruptPayload):
        Bitstream.from_bytes(bytes(data))
