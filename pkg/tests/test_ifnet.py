import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from texfield import tensor as T
from texfield.gradcheck import max_rel_error, network_checks
from texfield.ifnet import (IFNet, IFNetConfig, decode_occupancy, decode_rgb, encode, init_params, query,
                            trilinear_sample)
from texfield.mesh_io import BBox, unit_bbox
from texfield.selftest import trilinear_error
from texfield.voxel import VoxelGridStack, cell_centers

BOX = unit_bbox()


def small_cfg(kind="rgb", r=8, **kw):
    kw.setdefault("n_scales", 2)
    kw.setdefault("channels_per_scale", (3, 4))
    kw.setdefault("hidden", 16)
    return IFNetConfig.default(kind, r, **kw)


def manual_trilinear(grid, bbox, p):
    """Per-point trilinear on cell-centre nodes with border clamp, written out directly."""
    c, r = grid.shape[0], grid.shape[-1]
    u = [(p[a] - bbox.lo[a]) / (bbox.hi[a] - bbox.lo[a]) * r - 0.5 for a in range(3)]
    u = [min(max(x, 0.0), r - 1.0) for x in u]
    i0 = [min(int(np.floor(x)), r - 2) for x in u]
    t = [u[a] - i0[a] for a in range(3)]
    out = np.zeros(c)
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                w = ((t[0] if dx else 1 - t[0]) * (t[1] if dy else 1 - t[1]) * (t[2] if dz else 1 - t[2]))
                out += w * grid[:, i0[0] + dx, i0[1] + dy, i0[2] + dz]
    return out


def test_node_center_returns_node_value():
    g = np.random.default_rng(0).standard_normal((2, 8, 8, 8))
    c = cell_centers(BOX, 8)
    for idx in [(0, 0, 0), (3, 5, 1), (7, 7, 7)]:
        np.testing.assert_allclose(trilinear_sample(g, BOX, c[idx]).data, g[(slice(None),) + idx], atol=1e-14)


def test_constant_cell_corners():
    g = np.full((1, 4, 4, 4), 2.5)
    pts = np.random.default_rng(1).uniform(-0.5, 0.5, (50, 3))
    np.testing.assert_allclose(trilinear_sample(g, BOX, pts).data, 2.5, rtol=0, atol=1e-14)


def test_affine_field_reproduced():
    assert trilinear_error(n_points=100, resolution=8, seed=2) < 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31), st.sampled_from([4, 8, 16]))
def test_trilinear_polynomial_exact(seed, r):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal(8)
    box = BBox((-1.0, 0.0, -0.3), (1.0, 2.0, 0.5))

    def f(p):
        x, y, z = p[..., 0], p[..., 1], p[..., 2]
        return (a[0] + a[1] * x + a[2] * y + a[3] * z + a[4] * x * y + a[5] * y * z + a[6] * x * z
                + a[7] * x * y * z)

    grid = f(cell_centers(box, r))[None]
    h = (box.hi_arr - box.lo_arr) * 0.5 / r
    pts = rng.uniform(box.lo_arr + h, box.hi_arr - h, (40, 3))
    np.testing.assert_allclose(trilinear_sample(grid, box, pts).data[:, 0], f(pts), atol=1e-9, rtol=0)


def test_outside_points_clamp_to_border():
    g = np.random.default_rng(3).standard_normal((1, 4, 4, 4))
    far = trilinear_sample(g, BOX, np.array([[5.0, -5.0, 0.0]])).data
    edge = trilinear_sample(g, BOX, np.array([[0.5 - 0.125, -0.5 + 0.125, 0.0]])).data
    np.testing.assert_allclose(far, edge, atol=1e-14)


def test_encode_scale_shapes():
    cfg = IFNetConfig.default("occupancy", 32, n_scales=3, channels_per_scale=(2, 3, 4))
    params = init_params(cfg, np.random.default_rng(0))
    g = encode(VoxelGridStack(np.zeros((1, 32, 32, 32)), BOX), cfg.encoder, params)
    assert g.resolutions == [32, 16, 8]
    assert [t.shape[0] for t in g.grids] == [2, 3, 4]


def test_zero_input_zero_bias_gives_zero_features():
    cfg = small_cfg("occupancy")
    params = init_params(cfg, np.random.default_rng(1))
    g = encode(VoxelGridStack(np.zeros((1, 8, 8, 8)), BOX), cfg.encoder, params)
    assert all(not t.data.any() for t in g.grids)


def test_encode_rejects_channel_mismatch():
    cfg = small_cfg("rgb")
    params = init_params(cfg, np.random.default_rng(1))
    with pytest.raises(T.ShapeError):
        encode(VoxelGridStack(np.zeros((1, 8, 8, 8)), BOX), cfg.encoder, params)


def test_encoder_gradient_of_grid_functional():
    cfg = small_cfg("occupancy")
    rng = np.random.default_rng(2)
    params = init_params(cfg, rng)
    x = VoxelGridStack(rng.random((1, 8, 8, 8)), BOX)
    w = [T.Tensor(rng.standard_normal(gr.shape)) for gr in encode(x, cfg.encoder, params).grids]

    def loss():
        g = encode(x, cfg.encoder, params)
        return T.add(T.sum_all(T.mul(g.grids[0], w[0])), T.sum_all(T.mul(g.grids[1], w[1])))

    enc = {k: v for k, v in params.items() if k.startswith("enc.")}
    assert max(max_rel_error(loss, enc, rng, n_probe=4).values()) < 1e-4


def test_query_length_and_per_grid_oracle():
    cfg = small_cfg("rgb")
    rng = np.random.default_rng(3)
    params = init_params(cfg, rng)
    x = VoxelGridStack(rng.random((4, 8, 8, 8)), BOX)
    g = encode(x, cfg.encoder, params)
    pts = rng.uniform(-0.5, 0.5, (6, 3))
    f = query(g, x, pts).data
    assert f.shape == (6, cfg.encoder.feature_dim) == (6, 4 + 3 + 4)
    for i, p in enumerate(pts):
        ref = np.concatenate([manual_trilinear(x.data, BOX, p)] + [manual_trilinear(t.data, BOX, p) for t in g.grids])
        np.testing.assert_allclose(f[i], ref, atol=1e-12)
    assert np.array_equal(query(g, x, pts).data, f)


def test_grids_are_euclidean_aligned():
    cfg = small_cfg("occupancy")
    rng = np.random.default_rng(4)
    params = init_params(cfg, rng)
    x = VoxelGridStack(rng.random((1, 8, 8, 8)), BOX)
    g = encode(x, cfg.encoder, params)
    coarse = g.grids[1].data
    centers = cell_centers(BOX, 4)
    got = trilinear_sample(coarse, BOX, centers.reshape(-1, 3)).data
    np.testing.assert_allclose(got, coarse.reshape(coarse.shape[0], -1).T, atol=1e-13)


def test_decoders_with_zero_params():
    cfg = small_cfg("rgb")
    params = {k: T.parameter(np.zeros(v.shape)) for k, v in init_params(cfg, np.random.default_rng(0)).items()}
    feat = T.Tensor(np.random.default_rng(5).standard_normal((7, cfg.encoder.feature_dim)))
    assert np.all(decode_rgb(feat, params).data == 0.5)
    cfg = small_cfg("occupancy")
    params = {k: T.parameter(np.zeros(v.shape)) for k, v in init_params(cfg, np.random.default_rng(0)).items()}
    feat = T.Tensor(np.ones((3, cfg.encoder.feature_dim)))
    logit = decode_occupancy(feat, params).data
    assert np.all(logit == 0.0) and np.all(T.stable_sigmoid(logit) == 0.5)


def _random_head(params, rng):
    for k in ("dec.out.weight", "dec.out.bias"):
        params[k].data = rng.standard_normal(params[k].shape)
    return params


@pytest.mark.parametrize("kind", ["rgb", "occupancy"])
def test_batch_equals_loop_and_range(kind):
    cfg = small_cfg(kind)
    rng = np.random.default_rng(6)
    params = _random_head(init_params(cfg, rng), rng)
    feat = rng.standard_normal((20, cfg.encoder.feature_dim))
    dec = decode_rgb if kind == "rgb" else decode_occupancy
    batch = dec(T.Tensor(feat), params).data
    for i in range(20):
        assert np.array_equal(dec(T.Tensor(feat[i:i + 1]), params).data[0], batch[i])
    if kind == "rgb":
        assert np.all((batch > 0) & (batch < 1))


def test_decode_rejects_wrong_feature_length():
    cfg = small_cfg("rgb")
    params = init_params(cfg, np.random.default_rng(0))
    with pytest.raises(T.ShapeError):
        decode_rgb(T.Tensor(np.zeros((2, cfg.encoder.feature_dim + 1))), params)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_pointwise_independence(seed):
    rng = np.random.default_rng(seed)
    cfg = small_cfg("rgb")
    net = IFNet(cfg, _random_head(init_params(cfg, np.random.default_rng(0)), np.random.default_rng(1)))
    x = VoxelGridStack(rng.random((4, 8, 8, 8)), BOX)
    pts = rng.uniform(-0.5, 0.5, (9, 3))
    base = net.predict(x, pts)
    others = np.concatenate([rng.uniform(-0.5, 0.5, (5, 3)), pts[::-1]])
    got = net.predict(x, others)[5:][::-1]
    assert np.array_equal(base, got)


def test_predict_chunking_is_bit_identical():
    cfg = small_cfg("occupancy")
    net = IFNet(cfg, _random_head(init_params(cfg, np.random.default_rng(0)), np.random.default_rng(1)))
    x = VoxelGridStack(np.random.default_rng(2).random((1, 8, 8, 8)), BOX)
    pts = np.random.default_rng(3).uniform(-0.5, 0.5, (1000, 3))
    assert np.array_equal(net.predict(x, pts, chunk=1000), net.predict(x, pts, chunk=37))


def test_full_network_gradients():
    errs = network_checks(seed=1)
    assert errs["texture_network"] < 1e-4 and errs["geometry_network"] < 1e-4


def test_config_validation_and_dict_round_trip():
    with pytest.raises(ValueError):
        IFNetConfig.default("rgb", 12, n_scales=4, channels_per_scale=(1, 2, 3, 4))
    with pytest.raises(ValueError):
        IFNetConfig.default("mystery", 32)
    cfg = IFNetConfig.default("rgb", 32)
    assert IFNetConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.encoder.channels_per_scale == (8, 16, 24, 32) and cfg.hidden == 128


def test_save_load_round_trip(tmp_path):
    cfg = small_cfg("rgb")
    net = IFNet.create(cfg, seed=4)
    net.save(tmp_path / "m.ifck", extra={"train": {"step": 3}})
    back, adam, header = IFNet.load(tmp_path / "m.ifck")
    assert back.cfg == cfg and adam is None and header["train"]["step"] == 3
    for k in net.params:
        assert np.array_equal(back.params[k].data, net.params[k].data)


def test_forward_rejects_resolution_mismatch():
    net = IFNet.create(small_cfg("occupancy", 16))
    with pytest.raises(ValueError, match="R=16"):
        net.predict(VoxelGridStack(np.zeros((1, 8, 8, 8)), BOX), np.zeros((1, 3)))
