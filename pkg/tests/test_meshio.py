import struct

import numpy as np
import pytest

from multimatch.mesh import MeshValidationError
from multimatch.meshio import MeshFormatError, load_mesh, read_arrays, save_mesh, write_ply
from multimatch.synthetic import icosphere

OFF = "OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n"
PLY = ("ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\n"
       "element face 1\nproperty list uchar int vertex_indices\nend_header\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n")


def test_minimal_off(tmp_path):
    (tmp_path / "tri.off").write_text(OFF)
    m = load_mesh(tmp_path / "tri.off")
    assert m.n_vertices == 3 and m.n_triangles == 1 and m.id == "tri"


def test_ascii_ply_equals_off(tmp_path):
    (tmp_path / "a.off").write_text(OFF)
    (tmp_path / "a.ply").write_text(PLY)
    a, b = load_mesh(tmp_path / "a.off"), load_mesh(tmp_path / "a.ply")
    assert a.vertices.tobytes() == b.vertices.tobytes()
    assert a.triangles.tobytes() == b.triangles.tobytes()


def test_off_index_out_of_range(tmp_path):
    (tmp_path / "bad.off").write_text(OFF.replace("3 0 1 2", "3 0 1 3"))
    with pytest.raises(MeshValidationError, match="out of range"):
        load_mesh(tmp_path / "bad.off")


def test_off_parse_error_has_line(tmp_path):
    (tmp_path / "bad.off").write_text(OFF.replace("1 0 0", "1 zero 0"))
    with pytest.raises(MeshFormatError, match=":4"):
        load_mesh(tmp_path / "bad.off")


def test_truncated_off(tmp_path):
    (tmp_path / "bad.off").write_text("OFF\n3 1 0\n0 0 0\n1 0 0\n")
    with pytest.raises(MeshFormatError):
        load_mesh(tmp_path / "bad.off")


def test_unknown_format(tmp_path):
    (tmp_path / "x.obj").write_text("v 0 0 0\n")
    with pytest.raises(MeshFormatError, match="unsupported"):
        load_mesh(tmp_path / "x.obj")


@pytest.mark.parametrize("binary", [True, False])
def test_ply_roundtrip_exact(tmp_path, binary):
    s = icosphere(2)
    rng = np.random.default_rng(0)
    colors = rng.integers(0, 256, (s.n_vertices, 3))
    write_ply(tmp_path / "s.ply", s.vertices, s.triangles, colors, binary=binary)
    m = load_mesh(tmp_path / "s.ply")
    assert np.array_equal(m.vertices, s.vertices)
    assert np.array_equal(m.triangles, s.triangles)


def test_off_roundtrip_exact(tmp_path):
    s = icosphere(1)
    save_mesh(tmp_path / "s.off", s)
    assert np.array_equal(load_mesh(tmp_path / "s.off").vertices, s.vertices)


def test_binary_ply_float32_and_offsets(tmp_path):
    head = ("ply\nformat binary_little_endian 1.0\nelement vertex 3\nproperty float x\nproperty float y\n"
            "property float z\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n").encode()
    body = struct.pack("<9f", 0, 0, 0, 1, 0, 0, 0, 1, 0) + struct.pack("<B3i", 3, 0, 1, 2)
    (tmp_path / "b.ply").write_bytes(head + body)
    v, t = read_arrays(tmp_path / "b.ply")
    assert np.array_equal(t, [[0, 1, 2]]) and v[1, 0] == 1.0
    (tmp_path / "q.ply").write_bytes(head + body[:-4])
    with pytest.raises(MeshFormatError, match="byte"):
        read_arrays(tmp_path / "q.ply")


def test_quad_face_rejected(tmp_path):
    text = OFF.replace("3 1 0", "4 1 0").replace("3 0 1 2", "0 1 1 0\n4 0 1 2 3")
    (tmp_path / "q.off").write_text(text)
    with pytest.raises(MeshFormatError):
        load_mesh(tmp_path / "q.off")
