import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from texfield.ifnet import IFNet
from texfield.mesh_io import load_ply, save_colored_ply, unit_bbox
from texfield.reconstruct import (ReconstructConfig, ReconstructionError, ScalarField, colorize, edge_incidence,
                                  evaluate_field, geometry_input, is_watertight, load_field, marching_cubes,
                                  mesh_iou, mesh_volume, reconstruct_full, save_field)
from texfield.selftest import mc_sphere_stats
from texfield.shapes import box_mesh, sphere_field, uv_sphere
from texfield.voxel import VoxelGridStack

from conftest import hemisphere_color

BOX = unit_bbox()


class ConstantModel:
    """Stub with the predict interface: one logit everywhere."""

    def __init__(self, logit, resolution=8):
        self.logit = logit
        self.cfg = type("Cfg", (), {"resolution": resolution})()

    def predict(self, x, points, chunk=65536):
        return np.full(len(np.asarray(points).reshape(-1, 3)), self.logit)


def test_constant_model_constant_field():
    x = VoxelGridStack(np.zeros((1, 8, 8, 8)), BOX)
    fld = evaluate_field(ConstantModel(1.3), x, 16)
    assert fld.values.shape == (16, 16, 16)
    assert np.all(fld.values == fld.values[0, 0, 0])
    assert 0 <= fld.values.min() and fld.values.max() <= 1


def test_field_resolution_mismatch():
    with pytest.raises(ValueError):
        evaluate_field(ConstantModel(0.0, resolution=16), VoxelGridStack(np.zeros((1, 8, 8, 8)), BOX), 8)


def test_chunked_field_bit_identical(overfit):
    net, _, _ = IFNet.load(overfit.geo_ckpt)
    x = geometry_input(overfit.partial, BOX, 32, 30_000, np.random.default_rng(0))
    a = evaluate_field(net, x, 24, chunk=24 ** 3)
    b = evaluate_field(net, x, 24, chunk=1000)
    assert a.values.tobytes() == b.values.tobytes()
    assert 0 <= a.values.min() and a.values.max() <= 1


def test_all_zero_field_empty_mesh():
    m = marching_cubes(ScalarField(np.zeros((8, 8, 8)), BOX))
    assert m.n_faces == 0 and len(m.vertices) == 0


def test_single_cell_closed_polyhedron():
    v = np.zeros((6, 6, 6))
    v[2, 3, 2] = 1.0
    m = marching_cubes(ScalarField(v, BOX))
    assert m.n_faces == 8
    assert is_watertight(m) and mesh_volume(m) > 0


def test_sphere_area_volume_and_watertight():
    s = mc_sphere_stats(0.35, 64)
    assert s["watertight"]
    assert abs(s["area_ratio"] - 1) < 0.05 and abs(s["volume_ratio"] - 1) < 0.05


def test_sphere_vertices_within_cell_diagonal():
    m = marching_cubes(ScalarField(sphere_field(32, 0.35), BOX))
    r = np.linalg.norm(m.vertices, axis=1)
    assert np.max(np.abs(r - 0.35)) < np.sqrt(3) / 32


def test_outward_orientation():
    m = marching_cubes(ScalarField(sphere_field(24, 0.3), BOX))
    t = m.triangles()
    n = np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])
    assert np.mean(np.einsum("ij,ij->i", n, t.mean(1)) > 0) > 0.99
    assert mesh_volume(m) > 0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31), st.sampled_from([4, 6, 9]))
def test_interior_fields_are_watertight(seed, r):
    rng = np.random.default_rng(seed)
    v = np.zeros((r + 2, r + 2, r + 2))
    v[1:-1, 1:-1, 1:-1] = rng.random((r, r, r))
    m = marching_cubes(ScalarField(v, BOX), 0.5)
    if m.n_faces:
        assert np.all(edge_incidence(m.faces) == 2)


def test_marching_cubes_rejects_nonfinite():
    v = np.zeros((4, 4, 4))
    v[1, 1, 1] = np.nan
    with pytest.raises(ValueError):
        marching_cubes(ScalarField(v, BOX))


def test_iou_self_and_symmetry():
    a, b = uv_sphere(0.3), box_mesh((-0.3, -0.2, -0.25), (0.3, 0.2, 0.25))
    assert mesh_iou(a, a, BOX, n=20_000) == 1.0
    assert mesh_iou(a, b, BOX, n=20_000, seed=3) == mesh_iou(b, a, BOX, n=20_000, seed=3)
    # nested spheres: IoU = (r1 / r2)^3
    assert abs(mesh_iou(uv_sphere(0.2), uv_sphere(0.4), BOX, n=50_000) - 0.125) < 0.02


def test_feld_round_trip(tmp_path):
    fld = ScalarField(sphere_field(8), BOX)
    save_field(fld, tmp_path / "f.feld")
    assert (tmp_path / "f.feld").read_bytes()[:4] == b"FELD"
    back = load_field(tmp_path / "f.feld")
    assert back.bbox == BOX
    np.testing.assert_allclose(back.values, fld.values, rtol=1e-7)


def test_colorize_oracle(overfit):
    tex, _, _ = IFNet.load(overfit.tex_ckpt)
    mesh = marching_cubes(ScalarField(sphere_field(48, 0.35), BOX))
    cm = colorize(mesh, tex, overfit.partial, BOX)
    assert len(cm.vertices) == len(mesh.vertices)
    assert cm.colors.min() >= 0 and cm.colors.max() <= 1
    err = np.abs(cm.colors - hemisphere_color(mesh.vertices)).max(1)
    assert np.mean(err <= 0.1) >= 0.9


def test_reconstruct_full_complete_input(overfit):
    cfg = ReconstructConfig(bbox=BOX, eval_resolution=64)
    out = reconstruct_full(overfit.full, overfit.geo_ckpt, overfit.tex_ckpt, cfg)
    assert len(out.faces) > 0 and out.colors.shape == (len(out.vertices), 3)
    mesh = type(overfit.full)(out.vertices, out.faces)
    assert mesh_iou(mesh, overfit.full, BOX) >= 0.95


def test_reconstruct_full_deterministic_ply(overfit, tmp_path):
    cfg = ReconstructConfig(bbox=BOX, eval_resolution=32)
    for name in ("a", "b"):
        save_colored_ply(reconstruct_full(overfit.partial, overfit.geo_ckpt, overfit.tex_ckpt, cfg),
                         tmp_path / f"{name}.ply")
    assert (tmp_path / "a.ply").read_bytes() == (tmp_path / "b.ply").read_bytes()
    assert len(load_ply(tmp_path / "a.ply").faces) > 0


def test_reconstruct_without_texture(overfit):
    out = reconstruct_full(overfit.partial, overfit.geo_ckpt, None, ReconstructConfig(bbox=BOX, eval_resolution=32))
    assert out.colors is None and len(out.faces) > 0


def test_stage_tagged_errors(overfit, tmp_path):
    cfg = ReconstructConfig(bbox=BOX, eval_resolution=16)
    with pytest.raises(ReconstructionError) as info:
        reconstruct_full(overfit.partial, overfit.tex_ckpt, None, cfg)
    assert info.value.stage == "load-geometry-model"
    with pytest.raises(ReconstructionError) as info:
        reconstruct_full(overfit.partial, tmp_path / "missing.ifck", None, cfg)
    assert info.value.stage == "load-geometry-model" and "missing.ifck" in str(info.value)
    with pytest.raises(ReconstructionError) as info:
        reconstruct_full(uv_sphere(), overfit.geo_ckpt, overfit.tex_ckpt, ReconstructConfig(bbox=BOX, eval_resolution=32))
    assert info.value.stage == "colorize"
