import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from texfield import tensor as T
from texfield.gradcheck import max_rel_error
from texfield.ifnet import IFNet, IFNetConfig
from texfield.mesh_io import unit_bbox
from texfield.sampling import OccupancySamplingConfig, PointSampleSet, carve_holes
from texfield.selftest import l1_oracle_error
from texfield.training import (TrainBatch, TrainConfig, batch_for_step, geometry_loss, make_geometry_example,
                               make_texture_example, read_trace, texture_loss, train, train_step_geometry,
                               train_step_texture)
from texfield.voxel import cell_indices

from conftest import two_color_sphere

BOX = unit_bbox()
SMALL = dict(n_scales=2, channels_per_scale=(4, 6), hidden=32)


def small_geo_dataset(n=2, seed=0):
    full = two_color_sphere()
    cfg = OccupancySamplingConfig(total_points=4000, sub_sample=2000)
    out = []
    for i in range(n):
        part = carve_holes(full, [[0.35, 0, 0] if i % 2 else [0, 0.35, 0]], [0.12])
        out.append(make_geometry_example(full, part, BOX, 16, cfg, np.random.default_rng(seed + i), 5000))
    return out


def small_tex_example(seed=0):
    full = two_color_sphere()
    return make_texture_example(full, full, BOX, 16, 2000, np.random.default_rng(seed), 20_000)


def test_texture_example_cross_check():
    full = two_color_sphere()
    ex = make_texture_example(full, full, BOX, 32, 3000, np.random.default_rng(0), 50_000)
    lab = ex.samples.labels
    assert lab.min() >= 0 and lab.max() <= 1
    assert ex.input.channels == 4 and ex.input.data[3].any()
    ijk, inside = cell_indices(ex.samples.points, BOX, 32)
    grid = ex.input.data[:3, ijk[:, 0], ijk[:, 1], ijk[:, 2]].T
    marked = grid[:, 0] != -1
    # cells away from the colour seam hold one colour, which must be the label's
    pure = marked & np.all((grid == 0) | (grid == 1), axis=1)
    assert pure.mean() > 0.8
    assert np.array_equal(grid[pure], lab[inside][pure])
    # seam cells hold a mix of the two colours
    mixed = marked & ~pure
    assert np.allclose(grid[mixed][:, 1], 0) and np.allclose(grid[mixed].sum(1), 1)


def test_geometry_example_labels():
    full = two_color_sphere()
    ex = make_geometry_example(full, full, BOX, 16, OccupancySamplingConfig(total_points=20_000,
                               sub_sample=10_000), np.random.default_rng(1), 5000)
    far = np.linalg.norm(ex.samples.points, axis=1) > 0.45
    assert far.any() and np.all(ex.samples.labels[far] == 0)
    assert 0.2 < ex.samples.labels.mean() < 0.8
    assert ex.input.channels == 1


def test_geometry_example_deterministic():
    a, b = small_geo_dataset(1, seed=3)[0], small_geo_dataset(1, seed=3)[0]
    assert a.input.data.tobytes() == b.input.data.tobytes()
    assert a.samples.points.tobytes() == b.samples.points.tobytes()


def test_perfect_predictor_zero_loss_and_unchanged_params():
    ex = small_tex_example()
    grey = PointSampleSet(ex.samples.points[:100], np.full((100, 3), 0.5), "color")
    net = IFNet.create(IFNetConfig.default("rgb", 16, **SMALL), seed=0)   # zero head predicts grey
    before = {k: p.data.copy() for k, p in net.params.items()}
    loss = train_step_texture(TrainBatch([ex.input], [grey]), net, T.Adam(net.params))
    assert loss == 0.0
    for k, p in net.params.items():
        assert np.array_equal(p.data, before[k])


def test_untrained_geometry_loss_is_ln2():
    ex = small_geo_dataset(1)[0]
    net = IFNet.create(IFNetConfig.default("occupancy", 16, **SMALL), seed=0)
    batch = TrainBatch([ex.input], [ex.samples.take(np.arange(256))])
    assert abs(train_step_geometry(batch, net, T.Adam(net.params)) - np.log(2)) < 1e-15


def test_texture_loss_matches_explicit_loop():
    assert l1_oracle_error(seed=4) < 1e-10
    ex = small_tex_example()
    rng = np.random.default_rng(5)
    net = IFNet.create(IFNetConfig.default("rgb", 16, **SMALL), seed=1)
    for p in net.params.values():
        p.data = p.data + rng.standard_normal(p.shape) * 0.05
    sets = [ex.samples.take(rng.choice(len(ex.samples), 64, replace=False)) for _ in range(2)]
    batch = TrainBatch([ex.input, ex.input], sets)
    loss = texture_loss(net, batch).item()
    pred = net.forward(*batch.stacked()[:2], bbox=BOX).data
    ref = 0.0
    for b, p, c in itertools.product(range(2), range(64), range(3)):
        ref += abs(pred[b, p, c] - sets[b].labels[p, c])
    assert abs(loss - ref) < 1e-10


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_loss_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    ex = small_tex_example()
    net = IFNet.create(IFNetConfig.default("rgb", 16, **SMALL), seed=2)
    net.params["dec.out.weight"].data = rng.standard_normal(net.params["dec.out.weight"].shape)
    s0, s1 = (ex.samples.take(rng.choice(len(ex.samples), 32, replace=False)) for _ in range(2))
    base = texture_loss(net, TrainBatch([ex.input, ex.input], [s0, s1])).item()
    perm = rng.permutation(32)
    swapped = texture_loss(net, TrainBatch([ex.input, ex.input], [s1.take(perm), s0])).item()
    assert abs(base - swapped) <= 1e-12 * max(1.0, abs(base))


def test_train_step_loss_gradient_slice():
    ex = small_geo_dataset(1)[0]
    rng = np.random.default_rng(6)
    net = IFNet.create(IFNetConfig.default("occupancy", 16, **SMALL), seed=3)
    for name, p in net.params.items():
        if name.endswith("bias") or name.startswith("dec.out"):
            p.data = rng.standard_normal(p.shape) * 0.3
    batch = TrainBatch([ex.input], [ex.samples.take(np.arange(20))])
    sl = {k: net.params[k] for k in ("enc.1.conv0.weight", "dec.fc1.weight", "dec.out.bias")}
    errs = max_rel_error(lambda: geometry_loss(net, batch), sl, rng, n_probe=4)
    assert max(errs.values()) < 1e-4


def test_nonfinite_loss_aborts():
    ex = small_geo_dataset(1)[0]
    net = IFNet.create(IFNetConfig.default("occupancy", 16, **SMALL), seed=0)
    net.params["dec.out.bias"].data[:] = np.nan
    with pytest.raises(FloatingPointError, match="param norms"):
        train_step_geometry(TrainBatch([ex.input], [ex.samples.take(np.arange(8))]), net, T.Adam(net.params))


def test_texture_overfit_loss_drops_tenfold(tmp_path):
    ex = small_tex_example()
    cfg = TrainConfig(points_per_item=512, steps=200, lr=1e-3, seed=0, checkpoint_every=200)
    res = train([ex], cfg, "texture", tmp_path, model_cfg=IFNetConfig.default("rgb", 16, **SMALL))
    first = np.mean([r[2] for r in res.trace[:5]])
    last = np.mean([r[2] for r in res.trace[-5:]])
    assert all(r[1] >= 0 for r in res.trace)
    assert first / last >= 10, (first, last)


def _geo_run(tmp_path, steps, resume=None, name="run"):
    cfg = TrainConfig(points_per_item=128, steps=steps, lr=1e-3, seed=7, checkpoint_every=3)
    return train(small_geo_dataset(3), cfg, "geometry", tmp_path / name,
                 model_cfg=IFNetConfig.default("occupancy", 16, **SMALL),
                 sampling=OccupancySamplingConfig(total_points=4000, sub_sample=2000), resume=resume)


def test_same_seed_bit_identical_trace(tmp_path):
    a = _geo_run(tmp_path, 6, name="a")
    b = _geo_run(tmp_path, 6, name="b")
    assert len(a.trace) == 6
    assert (tmp_path / "a" / "trace.csv").read_bytes() == (tmp_path / "b" / "trace.csv").read_bytes()
    assert a.checkpoint.read_bytes() == b.checkpoint.read_bytes()


def test_resume_replays_identical_trace(tmp_path):
    full = _geo_run(tmp_path, 8, name="full")
    _geo_run(tmp_path, 3, name="part")
    resumed = _geo_run(tmp_path, 8, resume=tmp_path / "part" / "ckpt_000003.ifck", name="part")
    assert [r[1] for r in resumed.trace] == [r[1] for r in full.trace]
    assert read_trace(tmp_path / "part" / "trace.csv") == read_trace(tmp_path / "full" / "trace.csv")
    for k, p in full.net.params.items():
        assert np.array_equal(p.data, resumed.net.params[k].data)


def test_trace_csv_format(tmp_path):
    res = _geo_run(tmp_path, 2)
    lines = (tmp_path / "run" / "trace.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == "step,loss,mean_loss" and len(lines) == 3
    assert read_trace(tmp_path / "run" / "trace.csv") == res.trace


def test_batch_for_step_covers_epoch():
    data = small_geo_dataset(3)
    cfg = TrainConfig(batch_size=1, points_per_item=16, seed=1)
    ids = [id(batch_for_step(data, cfg, s, 2000).inputs[0]) for s in range(1, 4)]
    assert sorted(ids) == sorted(id(d.input) for d in data)


def test_train_rejects_empty_and_bad_mode(tmp_path):
    with pytest.raises(ValueError):
        train([], TrainConfig(), "geometry", tmp_path)
    with pytest.raises(ValueError):
        train(small_geo_dataset(1), TrainConfig(), "colour", tmp_path)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(steps=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=-1)
    assert TrainConfig().lr == 1e-4


def test_batch_validation():
    ex = small_geo_dataset(1)[0]
    with pytest.raises(ValueError):
        TrainBatch([ex.input], [])
    with pytest.raises(ValueError):
        TrainBatch([ex.input, ex.input], [ex.samples.take(np.arange(3)), ex.samples.take(np.arange(4))])


def test_overfit_geometry_point_accuracy(overfit):
    """Sampled-point classification accuracy of the overfit geometry model."""
    net, _, _ = IFNet.load(overfit.geo_ckpt)
    ex = make_geometry_example(overfit.full, overfit.partial, overfit.bbox, 32, OccupancySamplingConfig(),
                               np.random.default_rng(0))
    logits = net.predict(ex.input, ex.samples.points)
    acc = np.mean((logits > 0) == (ex.samples.labels == 1))
    assert acc >= 0.95, acc
