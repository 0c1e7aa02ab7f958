import struct
from pathlib import Path

import numpy as np
import pytest

from conftest import random_rigid
from flowreg.curation import CurationSample, synthetic_sequence
from flowreg.errors import InvalidTransform, MalformedHeader, NonFiniteValue, UnsupportedFormat
from flowreg.io import (
    list_manifests,
    load_sampled_views,
    read_manifest,
    read_point_cloud,
    read_poses,
    read_sequence,
    save_sampled_views,
    write_manifest,
    write_point_cloud,
    write_poses,
    write_sequence,
)
from flowreg.sampling import SamplingConfig, sample_view

DATA = Path(__file__).parent / "data"


def test_ascii_golden_fixture():
    P = read_point_cloud(DATA / "tetra_ascii.ply")
    assert P.dtype == np.float64
    assert np.array_equal(P, [[0, 0, 0], [1, 0, 0], [0, 1.5, 0], [0, 0, -2.25]])


def test_binary_roundtrip_bitwise(tmp_path, rng):
    P = rng.normal(size=(500, 3)) * 1e3
    write_point_cloud(P, tmp_path / "a.ply")
    assert np.array_equal(read_point_cloud(tmp_path / "a.ply"), P)


def test_ascii_roundtrip(tmp_path, rng):
    P = rng.normal(size=(200, 3)) * 50
    write_point_cloud(P, tmp_path / "a.ply", binary=False)
    assert np.max(np.abs(read_point_cloud(tmp_path / "a.ply") - P)) <= 1e-6


def test_xyz_roundtrip(tmp_path, rng):
    P = rng.normal(size=(50, 3))
    write_point_cloud(P, tmp_path / "a.xyz")
    assert np.max(np.abs(read_point_cloud(tmp_path / "a.xyz") - P)) <= 1e-6
    (tmp_path / "b.xyz").write_text("1 2\n")
    with pytest.raises(MalformedHeader):
        read_point_cloud(tmp_path / "b.xyz")


def _binary_header(n, prop="float", fmt="binary_little_endian"):
    return (f"ply\nformat {fmt} 1.0\nelement vertex {n}\n"
            f"property {prop} x\nproperty {prop} y\nproperty {prop} z\nend_header\n").encode()


def test_float32_binary_with_extra_properties(tmp_path):
    header = (b"ply\nformat binary_little_endian 1.0\nelement vertex 2\n"
              b"property float x\nproperty uchar tag\nproperty float y\nproperty float z\nend_header\n")
    body = struct.pack("<fBff", 1.5, 9, 2.5, 3.5) + struct.pack("<fBff", -1.0, 0, 0.25, 8.0)
    (tmp_path / "m.ply").write_bytes(header + body)
    assert np.array_equal(read_point_cloud(tmp_path / "m.ply"), [[1.5, 2.5, 3.5], [-1.0, 0.25, 8.0]])


def test_truncated_binary_reports_offset(tmp_path):
    header = _binary_header(10)
    data = header + np.zeros((4, 3), "<f4").tobytes()
    (tmp_path / "t.ply").write_bytes(data)
    with pytest.raises(MalformedHeader) as info:
        read_point_cloud(tmp_path / "t.ply")
    assert info.value.offset == len(data)
    assert "byte offset" in str(info.value)


def test_truncated_ascii_and_bad_headers(tmp_path):
    (tmp_path / "a.ply").write_bytes(b"ply\nformat ascii 1.0\nelement vertex 3\n"
                                     b"property float x\nproperty float y\nproperty float z\nend_header\n1 2 3\n")
    with pytest.raises(MalformedHeader):
        read_point_cloud(tmp_path / "a.ply")
    (tmp_path / "b.ply").write_bytes(b"plx\n")
    with pytest.raises(MalformedHeader) as info:
        read_point_cloud(tmp_path / "b.ply")
    assert info.value.offset == 0
    (tmp_path / "c.ply").write_bytes(b"ply\nformat ascii 1.0\nelement vertex 1\n")
    with pytest.raises(MalformedHeader):
        read_point_cloud(tmp_path / "c.ply")


def test_non_finite(tmp_path):
    (tmp_path / "n.ply").write_bytes(_binary_header(1, "double") + np.array([1.0, np.nan, 0.0]).tobytes())
    with pytest.raises(NonFiniteValue):
        read_point_cloud(tmp_path / "n.ply")
    (tmp_path / "n.xyz").write_text("1 inf 2\n")
    with pytest.raises(NonFiniteValue):
        read_point_cloud(tmp_path / "n.xyz")


def test_unsupported(tmp_path):
    (tmp_path / "i.ply").write_bytes(_binary_header(1, "int") + np.zeros(3, "<i4").tobytes())
    with pytest.raises(UnsupportedFormat):
        read_point_cloud(tmp_path / "i.ply")
    (tmp_path / "be.ply").write_bytes(_binary_header(1, fmt="binary_big_endian") + np.zeros(3, ">f4").tobytes())
    with pytest.raises(UnsupportedFormat):
        read_point_cloud(tmp_path / "be.ply")
    (tmp_path / "x.pcd").write_text("")
    with pytest.raises(UnsupportedFormat):
        read_point_cloud(tmp_path / "x.pcd")
    with pytest.raises(UnsupportedFormat):
        write_point_cloud(np.zeros((1, 3)), tmp_path / "x.las")


def test_poses_roundtrip(tmp_path, rng):
    poses = [random_rigid(rng) for _ in range(3)]
    write_poses(tmp_path / "p.txt", ["a", "b", "c"], poses)
    names, back = read_poses(tmp_path / "p.txt")
    assert names == ["a", "b", "c"]
    for T, U in zip(poses, back):
        assert np.array_equal(T.as_matrix(), U.as_matrix())
    (tmp_path / "bad.txt").write_text("a " + " ".join(["1"] * 16) + "\n")
    with pytest.raises(InvalidTransform):
        read_poses(tmp_path / "bad.txt")
    (tmp_path / "short.txt").write_text("a 1 2 3\n")
    with pytest.raises(MalformedHeader):
        read_poses(tmp_path / "short.txt")


def test_manifest_roundtrip(tmp_path, rng):
    views = [rng.normal(size=(20 + i, 3)) for i in range(3)]
    sample = CurationSample(views, [random_rigid(rng) for _ in range(3)], [(0, 1, 0.5), (1, 2, 0.25)],
                            {"source": "unit"})
    d = write_manifest(tmp_path / "s0", sample, {"note": 1})
    back = read_manifest(d)
    assert all(np.array_equal(a, b) for a, b in zip(views, back.views))
    assert back.overlap_edges == [(0, 1, 0.5), (1, 2, 0.25)]
    assert back.provenance == {"source": "unit"}
    assert list_manifests(tmp_path) == [d]
    (d / "views" / "view_002.ply").unlink()
    with pytest.raises(MalformedHeader):
        read_manifest(d)


def test_sequence_roundtrip(tmp_path):
    seq = synthetic_sequence(np.random.default_rng(0), n_frames=6)
    back = read_sequence(write_sequence(tmp_path / "seq", seq))
    assert len(back.frames) == 6
    for a, b in zip(seq.frames, back.frames):
        assert np.array_equal(a.points, b.points)
        assert a.timestamp == b.timestamp
        assert np.array_equal(a.pose.as_matrix(), b.pose.as_matrix())


def test_sampled_views_cache(tmp_path, rng):
    sv = sample_view(rng.uniform(0, 10, size=(3000, 3)), SamplingConfig(v_d=0.2, v_c=0.5, alpha_s=0.05, r_s=1.0))
    save_sampled_views(tmp_path / "c.npz", [sv, sv])
    back = load_sampled_views(tmp_path / "c.npz")
    assert len(back) == 2
    for field in ("keypoints", "descriptors", "source_reduced", "keypoint_indices"):
        assert np.array_equal(getattr(back[1], field), getattr(sv, field))
