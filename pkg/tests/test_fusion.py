import numpy as np
import pytest
from hypothesis import given, strategies as st

from mmfuse.errors import ConfigError, DimensionError
from mmfuse.fusion import (
    FusionConfig,
    ModalityBundle,
    SketchParams,
    cbp_backward,
    cbp_fuse,
    concat_fuse,
    fuse_all,
    fuse_image,
    make_sketch_pair,
    sketch_apply,
    sketch_new,
)
from mmfuse.numerics import RngStream
from oracles import outer_product_sketch


def test_sketch_new_deterministic():
    a = sketch_new(RngStream(9), 4, 2)
    assert a == sketch_new(RngStream(9), 4, 2)
    b = sketch_new(RngStream(9), 64, 16)
    assert b != sketch_new(RngStream(10), 64, 16)


def test_sketch_bucket_balance():
    n, d = 10 ** 4, 16
    p = sketch_new(RngStream(0), n, d)
    counts = np.bincount(p.h, minlength=d)
    mean = n / d
    assert np.all(np.abs(counts - mean) <= 3 * np.sqrt(mean * (1 - 1 / d)))
    assert set(np.unique(p.s)) == {-1.0, 1.0}


def test_sketch_rejects_non_power_of_two():
    with pytest.raises(ConfigError):
        sketch_new(RngStream(0), 4, 3)
    with pytest.raises(ConfigError):
        FusionConfig(cbp_dim=100)


def test_sketch_apply_hand_example():
    p = SketchParams(4, 2, np.array([1.0, -1, 1, 1]), np.array([0, 1, 0, 1]))
    np.testing.assert_array_equal(sketch_apply(p, [2, 3, 5, 7]), [7, 4])
    np.testing.assert_array_equal(sketch_apply(p, np.zeros(4)), np.zeros(2))
    v = np.array([0.3, -1.7, 2.2, 9.1])
    np.testing.assert_array_equal(sketch_apply(p, 2 * v), 2 * sketch_apply(p, v))
    with pytest.raises(DimensionError):
        sketch_apply(p, [1, 2, 3])


def test_sketch_params_validation():
    with pytest.raises(DimensionError):
        SketchParams(2, 2, np.array([1.0, 0.5]), np.array([0, 1]))
    with pytest.raises(DimensionError):
        SketchParams(2, 2, np.array([1.0, 1.0]), np.array([0, 2]))
    p = sketch_new(RngStream(3), 5, 8)
    assert SketchParams.from_dict(p.to_dict()) == p
    np.testing.assert_array_equal(np.arange(5.0) @ p.matrix(), sketch_apply(p, np.arange(5.0)))


def test_cbp_examples():
    g = np.random.default_rng(0)
    px, py = sketch_new(RngStream(1), 4, 8), sketch_new(RngStream(2), 4, 8)
    x, y = g.normal(size=4), g.normal(size=4)
    np.testing.assert_allclose(cbp_fuse(x, y, px, py), outer_product_sketch(x, y, px, py), atol=1e-9, rtol=0)
    np.testing.assert_allclose(cbp_fuse(np.zeros(4), y, px, py), 0, atol=1e-15)
    np.testing.assert_allclose(cbp_fuse(2 * x, y, px, py), 2 * cbp_fuse(x, y, px, py), atol=1e-14, rtol=0)
    with pytest.raises(ConfigError):
        cbp_fuse(x, y, px, sketch_new(RngStream(2), 4, 16))


@given(st.integers(1, 8), st.integers(1, 8), st.sampled_from([2, 4, 8, 16]), st.integers(0, 2 ** 32))
def test_cbp_is_outer_product_sketch(nx, ny, d, seed):
    g = np.random.default_rng(seed)
    px, py = sketch_new(RngStream(seed, 1), nx, d), sketch_new(RngStream(seed, 2), ny, d)
    x, y = g.normal(size=nx), g.normal(size=ny)
    np.testing.assert_allclose(cbp_fuse(x, y, px, py), outer_product_sketch(x, y, px, py), atol=1e-9, rtol=0)


@given(st.integers(1, 6), st.integers(1, 6), st.sampled_from([2, 4, 8]), st.integers(0, 2 ** 32))
def test_cbp_backward_matches_finite_differences(nx, ny, d, seed):
    g = np.random.default_rng(seed)
    px, py = sketch_new(RngStream(seed, 1), nx, d), sketch_new(RngStream(seed, 2), ny, d)
    x, y, w = g.normal(size=nx), g.normal(size=ny), g.normal(size=d)
    gx, gy = cbp_backward(w, x, y, px, py)
    # bilinear, so the directional derivative along e_i is exact
    for i in range(nx):
        e = np.zeros(nx)
        e[i] = 1.0
        assert abs(w @ cbp_fuse(e, y, px, py) - gx[i]) < 1e-10
    for j in range(ny):
        e = np.zeros(ny)
        e[j] = 1.0
        assert abs(w @ cbp_fuse(x, e, px, py) - gy[j]) < 1e-10


@given(st.lists(st.integers(1, 5), min_size=1, max_size=4), st.integers(0, 1000))
def test_concat_roundtrip(lens, seed):
    g = np.random.default_rng(seed)
    parts = [g.normal(size=k) for k in lens]
    out = concat_fuse(parts)
    assert out.shape == (sum(lens),)
    for part, piece in zip(parts, np.split(out, np.cumsum(lens)[:-1])):
        np.testing.assert_array_equal(part, piece)


def test_concat_examples():
    np.testing.assert_array_equal(concat_fuse([[1, 2], [3]]), [1, 2, 3])
    np.testing.assert_array_equal(concat_fuse([[4, 5]]), [4, 5])
    with pytest.raises(DimensionError):
        concat_fuse([])


def test_fuse_image_modes():
    cfg = FusionConfig()
    b = ModalityBundle(slide=np.array([1.0]), patches=[np.array([2.0]), np.array([3.0]), np.array([4.0])])
    np.testing.assert_array_equal(fuse_image(b, cfg), [1, 2, 3, 4])
    np.testing.assert_array_equal(fuse_image(ModalityBundle(slide=np.array([1.0, 2.0])), cfg), [1, 2])
    with pytest.raises(DimensionError):
        fuse_image(ModalityBundle(slide=np.ones(1), patches=[np.ones(1)] * 2), cfg)


def test_fuse_image_cbp_matches_oracle():
    cfg = FusionConfig(image_scale_strategy="cbp", cbp_dim=16, sketch_seed=5)
    g = np.random.default_rng(2)
    slide, patches = g.normal(size=4), [g.normal(size=4) for _ in range(3)]
    got = fuse_image(ModalityBundle(slide=slide, patches=patches), cfg)
    px, py = make_sketch_pair(cfg, "image", 4, 12)
    np.testing.assert_allclose(got, outer_product_sketch(slide, np.concatenate(patches), px, py),
                               atol=1e-9, rtol=0)


def test_fuse_all_examples():
    cfg = FusionConfig()
    np.testing.assert_array_equal(fuse_all(ModalityBundle(slide=np.array([1.0, 5.0])), cfg), [1, 5])
    b = ModalityBundle(slide=np.array([1.0]), text=np.array([2.0]), structured=np.array([3.0]))
    np.testing.assert_array_equal(fuse_all(b, cfg), [1, 2, 3])
    with pytest.raises(ConfigError):
        fuse_all(ModalityBundle(), cfg)


def test_fuse_all_cbp_matches_oracle_and_degrades():
    cfg = FusionConfig(strategy="cbp", cbp_dim=16)
    g = np.random.default_rng(4)
    img, txt, st_ = g.normal(size=5), g.normal(size=3), g.normal(size=2)
    got = fuse_all(ModalityBundle(slide=img, text=txt, structured=st_), cfg)
    px, py = make_sketch_pair(cfg, "shared", 5, 5)
    np.testing.assert_allclose(got, outer_product_sketch(img, np.concatenate([txt, st_]), px, py),
                               atol=1e-9, rtol=0)
    np.testing.assert_array_equal(fuse_all(ModalityBundle(text=txt, structured=st_), cfg),
                                  np.concatenate([txt, st_]))
    np.testing.assert_array_equal(fuse_all(ModalityBundle(slide=img), cfg), img)


def test_shared_sketch_flag_reuses_one_sketch():
    cfg = FusionConfig(strategy="cbp", cbp_dim=8, shared_sketch=True)
    px, py = make_sketch_pair(cfg, "shared", 6, 4)
    np.testing.assert_array_equal(px.h[:4], py.h)
    np.testing.assert_array_equal(px.s[:4], py.s)
    qx, qy = make_sketch_pair(FusionConfig(strategy="cbp", cbp_dim=8), "shared", 6, 4)
    assert not (np.array_equal(qx.h[:4], qy.h) and np.array_equal(qx.s[:4], qy.s))


@given(st.sampled_from(["text", "structured"]), st.integers(0, 1000))
def test_ablation_removes_only_its_segment(drop, seed):
    g = np.random.default_rng(seed)
    parts = {"slide": g.normal(size=3), "text": g.normal(size=2), "structured": g.normal(size=4)}
    full = fuse_all(ModalityBundle(**parts), FusionConfig())
    kept = dict(parts, **{drop: None})
    reduced = fuse_all(ModalityBundle(**kept), FusionConfig())
    cut = slice(3, 5) if drop == "text" else slice(5, 9)
    np.testing.assert_array_equal(np.delete(full, np.arange(9)[cut]), reduced)


def test_sketch_inner_product_unbiased_small():
    # a lighter version of the acceptance run, as a regression guard
    g = np.random.default_rng(0)
    x = g.normal(size=32)
    x /= np.linalg.norm(x)
    z = g.normal(size=32)
    z -= (z @ x) * x
    z /= np.linalg.norm(z)
    y = 0.7 * x + np.sqrt(1 - 0.49) * z
    est = [sketch_apply(p, x) @ sketch_apply(p, y)
           for p in (sketch_new(RngStream(s), 32, 64) for s in range(400))]
    assert abs(np.mean(est) - 0.7) < 0.05
