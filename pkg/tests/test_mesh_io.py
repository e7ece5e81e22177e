import struct
import warnings

import numpy as np
import pytest
from PIL import Image

from texfield.mesh_io import (AtlasImage, BBox, ColoredMesh, MeshFormatError, TexturedMesh, color_to_uchar,
                              human_bbox, load_image, load_obj, load_ply, normalize_object, read_ppm,
                              save_colored_ply, save_obj, unit_bbox, write_ppm)
from texfield.shapes import box_mesh, two_color_atlas, uv_sphere


def write_ppm_bytes(path, w, h, pixels):
    path.write_bytes(f"P6\n# fixture\n{w} {h}\n255\n".encode() + bytes(pixels))


def test_single_triangle_obj(tmp_path):
    p = tmp_path / "tri.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nvt 0 0\nvt 1 0\nvt 0 1\nf 1/1 2/2 3/3\n")
    m = load_obj(p)
    assert m.n_faces == 1
    assert m.uvs.shape == (3, 2) and m.face_uvs.tolist() == [[0, 1, 2]]


def test_quad_is_fan_triangulated(tmp_path):
    p = tmp_path / "quad.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
    m = load_obj(p)
    assert m.faces.tolist() == [[0, 1, 2], [0, 2, 3]]


def test_negative_indices(tmp_path):
    p = tmp_path / "neg.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf -3 -2 -1\n")
    assert load_obj(p).faces.tolist() == [[0, 1, 2]]


def test_mtl_atlas_dimensions_match_header(tmp_path):
    write_ppm_bytes(tmp_path / "tex.ppm", 3, 2, [10] * 18)
    (tmp_path / "m.mtl").write_text("newmtl a\nKd 1 1 1\nmap_Kd tex.ppm\n")
    p = tmp_path / "m.obj"
    p.write_text("mtllib m.mtl\nusemtl a\nv 0 0 0\nv 1 0 0\nv 0 1 0\nvt 0 0\nvt 1 0\nvt 0 1\nf 1/1 2/2 3/3\n")
    m = load_obj(p)
    assert (m.atlas.width, m.atlas.height) == (3, 2)


def test_missing_atlas_warns(tmp_path):
    (tmp_path / "m.mtl").write_text("newmtl a\nmap_Kd nothere.ppm\n")
    p = tmp_path / "m.obj"
    p.write_text("mtllib m.mtl\nv 0 0 0\nv 1 0 0\nv 0 1 0\nvt 0 0\nvt 1 0\nvt 0 1\nf 1/1 2/2 3/3\n")
    with pytest.warns(UserWarning):
        m = load_obj(p)
    assert m.atlas is None


def test_malformed_record_reports_line(tmp_path):
    p = tmp_path / "bad.obj"
    p.write_text("v 0 0 0\nv 1 0\n")
    with pytest.raises(MeshFormatError, match=":2:"):
        load_obj(p)


def test_out_of_range_index(tmp_path):
    p = tmp_path / "bad.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 9\n")
    with pytest.raises(MeshFormatError, match=":4:"):
        load_obj(p)


def test_obj_round_trip(tmp_path):
    mesh = uv_sphere(atlas=two_color_atlas())
    save_obj(mesh, tmp_path / "s.obj")
    back = load_obj(tmp_path / "s.obj")
    np.testing.assert_allclose(back.vertices, mesh.vertices, rtol=0, atol=1e-6 * 0.35)
    assert np.array_equal(back.faces, mesh.faces)
    assert np.array_equal(back.atlas.pixels, mesh.atlas.pixels)
    np.testing.assert_allclose(back.uvs[back.face_uvs], mesh.uvs[mesh.face_uvs], atol=1e-6)


def test_ppm_round_trip(tmp_path):
    img = AtlasImage(4, 3, np.random.default_rng(0).integers(0, 256, (3, 4, 3), dtype=np.uint8))
    write_ppm(img, tmp_path / "a.ppm")
    back = read_ppm(tmp_path / "a.ppm")
    assert np.array_equal(back.pixels, img.pixels)


def test_png_rgba_alpha_dropped(tmp_path):
    arr = np.zeros((2, 5, 4), dtype=np.uint8)
    arr[..., 0] = 200
    arr[..., 3] = 7
    Image.fromarray(arr, "RGBA").save(tmp_path / "a.png")
    img = load_image(tmp_path / "a.png")
    assert img.pixels.shape == (2, 5, 3) and np.all(img.pixels[..., 0] == 200)


def test_ply_red_vertex_bytes(tmp_path):
    m = ColoredMesh(np.zeros((1, 3)), np.zeros((0, 3), dtype=np.int64), np.array([[1.0, 0.0, 0.0]]))
    save_colored_ply(m, tmp_path / "r.ply")
    data = (tmp_path / "r.ply").read_bytes()
    body = data[data.index(b"end_header\n") + len(b"end_header\n"):]
    assert body[12:15] == bytes([255, 0, 0])


def test_uchar_rounding():
    assert color_to_uchar(np.array([0.5]))[0] == 128
    assert color_to_uchar(np.array([0.0, 1.0])).tolist() == [0, 255]


def test_ply_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    sphere = uv_sphere()
    m = ColoredMesh(sphere.vertices, sphere.faces, rng.random((len(sphere.vertices), 3)))
    save_colored_ply(m, tmp_path / "s.ply")
    back = load_ply(tmp_path / "s.ply")
    np.testing.assert_allclose(back.vertices, m.vertices.astype(np.float32))
    assert np.array_equal(back.faces, m.faces)
    assert np.array_equal(color_to_uchar(back.colors), color_to_uchar(m.colors))


def test_ply_face_layout(tmp_path):
    m = ColoredMesh(np.eye(3), np.array([[0, 1, 2]]), None)
    save_colored_ply(m, tmp_path / "t.ply")
    data = (tmp_path / "t.ply").read_bytes()
    assert b"property uchar red" not in data
    body = data[data.index(b"end_header\n") + 11:]
    assert len(body) == 3 * 12 + 1 + 12
    assert struct.unpack("<B3i", body[36:]) == (3, 0, 1, 2)


def test_ply_write_failure_names_path(tmp_path):
    m = ColoredMesh(np.zeros((1, 3)), np.zeros((0, 3), dtype=np.int64))
    with pytest.raises(OSError, match="nope"):
        save_colored_ply(m, tmp_path / "nope" / "x.ply")


def test_normalize_unit_cube():
    cube = box_mesh((0, 0, 0), (1, 1, 1))
    out, tf = normalize_object(cube)
    assert tf.scale == 1.0 and tf.center == (0.5, 0.5, 0.5)
    np.testing.assert_allclose(out.vertices.min(0), -0.5)
    np.testing.assert_allclose(out.vertices.max(0), 0.5)


def test_normalize_already_normalized_is_identity():
    cube = box_mesh((-0.5, -0.5, -0.5), (0.5, 0.5, 0.5))
    out, tf = normalize_object(cube)
    assert tf.scale == 1.0 and tf.center == (0.0, 0.0, 0.0)
    np.testing.assert_array_equal(out.vertices, cube.vertices)


def test_normalize_elongated_box():
    out, tf = normalize_object(box_mesh((0, 0, 0), (2, 1, 1)))
    assert tf.scale == 0.5
    assert out.vertices[:, 0].min() == -0.5 and out.vertices[:, 0].max() == 0.5
    np.testing.assert_allclose(out.vertices[:, 1].max() - out.vertices[:, 1].min(), 0.5)


def test_normalize_inverse_round_trip():
    rng = np.random.default_rng(2)
    m = TexturedMesh(rng.standard_normal((20, 3)) * 3 + 7, np.array([[0, 1, 2]]))
    out, tf = normalize_object(m)
    np.testing.assert_allclose(tf.invert(out.vertices), m.vertices, atol=1e-9, rtol=0)


def test_normalize_rejects_zero_extent():
    with pytest.raises(ValueError):
        normalize_object(TexturedMesh(np.ones((3, 3)), np.array([[0, 1, 2]])))


def test_human_bbox_values():
    b = human_bbox()
    assert (b.lo[0], b.hi[0]) == (-0.8, 0.8)
    assert (b.lo[1], b.hi[1]) == (-0.15, 2.1)
    assert (b.lo[2], b.hi[2]) == (-0.8, 0.8)
    assert b.contains(np.zeros((1, 3)))[0]


def test_bbox_validation_and_list():
    with pytest.raises(ValueError):
        BBox((0, 0, 0), (0, 1, 1))
    assert BBox.from_list(unit_bbox().as_list()) == unit_bbox()


def test_mesh_validation():
    with pytest.raises(MeshFormatError):
        TexturedMesh(np.zeros((3, 3)), np.array([[0, 1, 3]]))
    with pytest.raises(ValueError):
        ColoredMesh(np.zeros((1, 3)), np.zeros((0, 3)), np.array([[2.0, 0, 0]]))


def test_no_warning_on_plain_obj(tmp_path):
    p = tmp_path / "plain.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n")
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        load_obj(p)
