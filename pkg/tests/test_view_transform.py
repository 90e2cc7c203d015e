import itertools

import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from conftest import randomize, small_camera, small_grid
from sscdesk import view_transform as VT
from sscdesk.errors import IndexOutOfRange, ShapeMismatch
from sscdesk.geometry import OccupancyMask, back_project, build_occupancy_mask
from sscdesk.gradcheck import check_gradients
from sscdesk.tensor import Tensor, trilinear_sample


def trilinear_oracle(vol, c):
    """Brute-force weighted sum over the 8 enclosing lattice points."""
    base = np.floor(c).astype(int)
    out = np.zeros(vol.shape[-1])
    for corner in itertools.product((0, 1), repeat=3):
        idx = base + corner
        w = 1.0
        for ax in range(3):
            w *= (c[ax] - base[ax]) if corner[ax] else (1 - (c[ax] - base[ax]))
        if all(0 <= idx[a] < vol.shape[a] for a in range(3)):
            out = out + w * vol[tuple(idx)]
    return out


def pool_oracle(frustum, cam, grid):
    H, W, D, C = frustum.shape
    out = np.zeros(grid.dims + (C,))
    for v in range(H):
        for u in range(W):
            for d in range(D):
                idx = grid.world_to_index(back_project(u, v, cam.bin_depth(d), cam))
                if grid.in_bounds(idx):
                    out[tuple(idx)] += frustum[v, u, d]
    return out


# -- lift ------------------------------------------------------------------
def test_lift_example():
    F = VT.lift_outer_product(np.array([[[2.0]]]), np.array([[[0.25, 0.75]]])).data
    np.testing.assert_array_equal(F[0, 0], [[0.5], [1.5]])


def test_lift_normalisation_identity():
    rng = np.random.default_rng(0)
    ctx = rng.normal(size=(3, 4, 5))
    p = rng.random((3, 4, 6))
    p /= p.sum(-1, keepdims=True)
    F = VT.lift_outer_product(ctx, p).data
    np.testing.assert_allclose(F.sum(axis=2), ctx, atol=1e-12)
    with pytest.raises(ShapeMismatch):
        VT.lift_outer_product(ctx, p[:2])


def test_lift_gradient():
    rng = np.random.default_rng(1)
    target = rng.normal(size=(2, 3, 4, 5))
    f = lambda c, p: (VT.lift_outer_product(c, p) * target).sum()
    assert check_gradients(f, [rng.normal(size=(2, 3, 5)), rng.random((2, 3, 4))]) < 1e-6


# -- voxel pooling -----------------------------------------------------------
def test_splat_sums_cells_in_one_voxel():
    out = VT.splat(Tensor([[1.0, 2.0], [3.0, 4.0]]), [1, 1], 3).data
    np.testing.assert_array_equal(out, [[0, 0], [4, 6], [0, 0]])


@pytest.mark.parametrize("seed", range(5))
def test_voxel_pool_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    cam = small_camera(5, 6, bins=7)
    grid = small_grid((8, 8, 4))
    F = rng.normal(size=(5, 6, 7, 3))
    got = VT.voxel_pool(Tensor(F), cam, grid).data
    assert np.array_equal(got, pool_oracle(F, cam, grid))


def test_voxel_pool_empty_voxels_zero():
    cam = small_camera(2, 2, bins=2)
    grid = small_grid((8, 8, 4))
    got = VT.voxel_pool(Tensor(np.ones((2, 2, 2, 1))), cam, grid).data
    assert got.sum() <= 8 and np.count_nonzero(got) <= 8
    assert np.all(got[got == 0] == 0)


def test_splat_order_invariance():
    rng = np.random.default_rng(2)
    vals = rng.normal(size=(50, 3))
    targets = rng.integers(0, 6, size=50)
    keys = np.arange(50)
    ref = VT.splat(Tensor(vals), targets, 6, keys).data
    perm = rng.permutation(50)
    got = VT.splat(Tensor(vals[perm]), targets[perm], 6, keys[perm]).data
    assert ref.tobytes() == got.tobytes()


def test_voxel_pool_gradient():
    rng = np.random.default_rng(3)
    cam = small_camera()
    grid = small_grid()
    target = rng.normal(size=grid.dims + (2,))
    f = lambda F: (VT.voxel_pool(F, cam, grid) * target).sum()
    assert check_gradients(f, [rng.normal(size=(4, 4, 6, 2))]) < 1e-6


# -- proposals ---------------------------------------------------------------
def test_select_proposals_cardinality_and_reference():
    cam, grid = small_camera(), small_grid()
    vq = Tensor(np.random.default_rng(4).normal(size=grid.dims + (3,)))
    empty = VT.select_proposals(vq, OccupancyMask(np.zeros(grid.dims, bool)), cam, grid)
    assert len(empty) == 0 and empty.features.shape == (0, 3)
    bits = np.zeros(grid.dims, bool)
    for i in [(0, 0, 0), (1, 2, 1), (3, 3, 0), (2, 0, 1), (3, 1, 1)]:
        bits[i] = True
    qs = VT.select_proposals(vq, OccupancyMask(bits), cam, grid)
    assert len(qs) == 5
    assert [tuple(i) for i in qs.indices] == sorted(tuple(i) for i in qs.indices)
    np.testing.assert_array_equal(qs.features.data, vq.data[bits])
    for idx, (u, v, b) in zip(qs.indices, qs.reference_points):
        np.testing.assert_allclose(back_project(u, v, cam.bin_depth(b), cam), grid.index_to_center(idx), atol=1e-9)


# -- trilinear sampling --------------------------------------------------------
def test_trilinear_examples():
    vol = np.arange(8.0).reshape(2, 2, 2, 1)
    assert trilinear_sample(Tensor(vol), np.array([[0.5, 0.5, 0.5]])).data[0, 0] == pytest.approx(3.5)
    assert trilinear_oracle(vol, np.array([0.5, 0.5, 0.5]))[0] == pytest.approx(3.5)
    np.testing.assert_array_equal(trilinear_sample(Tensor(vol), np.array([[1.0, 0.0, 1.0]])).data, [[5.0]])
    for c in ([-1.0, 0.5, 0.5], [0.2, 2.0, 0.1], [0.5, 0.5, -1.5]):
        np.testing.assert_array_equal(trilinear_sample(Tensor(vol), np.array([c])).data, [[0.0]])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_trilinear_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    shape = tuple(rng.integers(1, 6, size=3)) + (2,)
    vol = rng.normal(size=shape)
    coords = rng.uniform(-1.5, np.array(shape[:3]) + 0.5, size=(5, 3))
    got = trilinear_sample(Tensor(vol), coords).data
    for c, g in zip(coords, got):
        np.testing.assert_allclose(g, trilinear_oracle(vol, c), atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_trilinear_bounded_and_piecewise_linear(seed):
    rng = np.random.default_rng(seed)
    vol = rng.normal(size=(4, 4, 4, 3))
    base = rng.integers(0, 3, size=3)
    t = rng.random(3)
    val = trilinear_sample(Tensor(vol), (base + t)[None]).data[0]
    cube = vol[base[0]:base[0] + 2, base[1]:base[1] + 2, base[2]:base[2] + 2].reshape(-1, 3)
    assert np.all(val >= cube.min(0) - 1e-12) and np.all(val <= cube.max(0) + 1e-12)
    ax = rng.integers(0, 3)
    pts = np.repeat((base + t)[None], 3, axis=0)
    pts[:, ax] = base[ax] + np.array([0.1, 0.4, 0.9])
    a, b, c = trilinear_sample(Tensor(vol), pts).data
    np.testing.assert_allclose((b - a) / 0.3, (c - b) / 0.5, atol=1e-9)


def test_trilinear_gradient():
    rng = np.random.default_rng(5)
    target = rng.normal(size=(7, 3))
    f = lambda vol, c: (trilinear_sample(vol, c) * target).sum()
    coords = rng.uniform(-0.9, 3.9, size=(7, 3))
    assert check_gradients(f, [rng.normal(size=(3, 4, 3, 3)), coords]) < 1e-6


# -- deformable cross-attention ------------------------------------------------
def degenerate_attention_params(C, N=1):
    p = {
        "a.offset.w": Tensor(np.zeros((C, 3 * N))), "a.offset.b": Tensor(np.zeros(3 * N)),
        "a.weight.w": Tensor(np.zeros((C, N))), "a.weight.b": Tensor(np.zeros(N)),
        "a.value.w": Tensor(np.eye(C)),
        "a.out.w": Tensor(np.eye(C)), "a.out.b": Tensor(np.zeros(C)),
        "a.norm.g": Tensor(np.ones(C)), "a.norm.b": Tensor(np.zeros(C)),
    }
    return p


def test_dca_degenerate_is_plain_sample():
    rng = np.random.default_rng(6)
    F = rng.normal(size=(4, 5, 6, 3))
    q = Tensor(rng.normal(size=(4, 3)))
    ref = rng.uniform(0, 3.5, size=(4, 3))
    out = VT.deformable_cross_attention_3d(q, Tensor(F), ref, degenerate_attention_params(3), "a", 1, block=False).data
    expect = np.stack([trilinear_oracle(F, r[[1, 0, 2]]) for r in ref])
    np.testing.assert_allclose(out, expect, atol=1e-12)


def random_attention_params(rng, C, N, offset_scale=0.3):
    p = degenerate_attention_params(C, N)
    for k in p:
        if not k.startswith("a.norm"):
            p[k] = Tensor(rng.normal(scale=offset_scale if "offset" in k else 0.5, size=p[k].shape))
    return p


def test_dca_weights_normalised():
    rng = np.random.default_rng(7)
    p = random_attention_params(rng, 4, 8)
    q = Tensor(rng.normal(scale=300, size=(50, 4)))
    _, A = VT.deformable_cross_attention_3d(q, Tensor(rng.normal(size=(3, 3, 3, 4))), rng.random((50, 3)), p, "a", 8,
                                            return_weights=True)
    np.testing.assert_allclose(A.data.sum(-1), 1.0, atol=1e-6)


def test_dca_gradient():
    rng = np.random.default_rng(8)
    p = random_attention_params(rng, 3, 4)
    ref = rng.uniform(0.2, 2.8, size=(5, 3))
    target = rng.normal(size=(5, 3))

    def f(q, F, ow, ob):
        pp = dict(p)
        pp["a.offset.w"], pp["a.offset.b"] = ow, ob
        return (VT.deformable_cross_attention_3d(q, F, ref, pp, "a", 4) * target).sum()

    inputs = [rng.normal(size=(5, 3)), rng.normal(size=(4, 4, 4, 3)), p["a.offset.w"].data, p["a.offset.b"].data]
    assert check_gradients(f, inputs) < 1e-4


# -- merge -----------------------------------------------------------------------
def test_merge_identities():
    rng = np.random.default_rng(9)
    vq = Tensor(rng.normal(size=(3, 2, 2, 2)))
    empty = OccupancyMask(np.zeros((3, 2, 2), bool))
    assert np.array_equal(VT.merge_queries(Tensor(np.zeros((0, 2))), vq, empty).data, vq.data)
    full = OccupancyMask(np.ones((3, 2, 2), bool))
    upd = rng.normal(size=(12, 2))
    np.testing.assert_array_equal(VT.merge_queries(Tensor(upd), vq, full).data.reshape(12, 2), upd)
    with pytest.raises(IndexOutOfRange):
        VT.merge_queries(Tensor(upd[:1]), vq, full, indices=np.array([[3, 0, 0]]))


@pytest.mark.parametrize("seed", range(5))
def test_merge_mixed_matches_loop(seed):
    rng = np.random.default_rng(seed)
    vq = rng.normal(size=(4, 3, 2, 2))
    bits = rng.random((4, 3, 2)) < 0.4
    mask = OccupancyMask(bits)
    upd = rng.normal(size=(mask.count, 2))
    got = VT.merge_queries(Tensor(upd), Tensor(vq), mask).data
    k = 0
    for i, j, l in np.ndindex(4, 3, 2):
        if bits[i, j, l]:
            assert np.array_equal(got[i, j, l], upd[k])
            k += 1
        else:
            assert np.array_equal(got[i, j, l], vq[i, j, l])


def test_merge_after_select_is_identity():
    cam, grid = small_camera(), small_grid()
    rng = np.random.default_rng(10)
    vq = Tensor(rng.normal(size=grid.dims + (3,)))
    mask = OccupancyMask(rng.random(grid.dims) < 0.5)
    qs = VT.select_proposals(vq, mask, cam, grid)
    assert np.array_equal(VT.merge_queries(qs.features, vq, mask).data, vq.data)


# -- deformable self-attention ------------------------------------------------------
def test_dsa_degenerate_identity():
    vol = np.random.default_rng(11).normal(size=(4, 3, 2, 3))
    out = VT.deformable_self_attention(Tensor(vol), degenerate_attention_params(3), "a", 1, block=False).data
    np.testing.assert_array_equal(out, vol)


def test_dsa_constant_volume_stays_constant():
    rng = np.random.default_rng(12)
    p = random_attention_params(rng, 3, 4, offset_scale=0.0)
    p["a.offset.b"] = Tensor(rng.uniform(-0.9, 0.9, size=12) * np.tile([1, 1, 0], 4))
    vol = np.broadcast_to(np.array([0.5, -1.0, 2.0]), (6, 6, 2, 3)).copy()
    out = VT.deformable_self_attention(Tensor(vol), p, "a", 4, block=False).data
    interior = out[1:-1, 1:-1]
    np.testing.assert_allclose(interior, np.broadcast_to(interior[0, 0, 0], interior.shape), atol=1e-12)


def test_dsa_gradient():
    rng = np.random.default_rng(13)
    p = random_attention_params(rng, 4, 3)
    for k in ("a.norm.g", "a.norm.b"):
        p[k] = Tensor(rng.normal(size=4))
    target = rng.normal(size=(4, 4, 2, 4))

    def f(vol, ow):
        pp = dict(p)
        pp["a.offset.w"] = ow
        return (VT.deformable_self_attention(vol, pp, "a", 3) * target).sum()

    assert check_gradients(f, [rng.normal(size=(4, 4, 2, 4)), p["a.offset.w"].data]) < 1e-4


# -- composite -------------------------------------------------------------------------
@pytest.fixture
def vt_setup(pb64):
    VT.init_view_params(pb64, 3, 4, n_points=2, n_cross=2, n_self=1)
    cam, grid = small_camera(), small_grid()
    rng = np.random.default_rng(14)
    ctx = Tensor(rng.normal(size=(4, 4, 4)))
    prob = rng.random((4, 4, 6))
    prob = Tensor(prob / prob.sum(-1, keepdims=True))
    depth = rng.uniform(1.0, 5.0, size=(4, 4))
    return pb64.params, cam, grid, ctx, prob, depth


def test_run_cgvt_shape_and_determinism(vt_setup):
    params, cam, grid, ctx, prob, depth = vt_setup
    kw = dict(n_points=2, n_cross=2, n_self=1)
    a = VT.run_cgvt(ctx, prob, depth, cam, grid, params, **kw)
    b = VT.run_cgvt(ctx, prob, depth, cam, grid, params, **kw)
    assert a.shape == grid.dims + (4,)
    assert a.data.tobytes() == b.data.tobytes()
    assert build_occupancy_mask(depth, cam, grid).count > 0


def test_run_cgvt_empty_mask_skips_cross(vt_setup):
    params, cam, grid, ctx, prob, depth = vt_setup
    trace = {}
    out = VT.run_cgvt(ctx, prob, np.zeros((4, 4)), cam, grid, params, n_points=2, n_cross=2, n_self=1, trace=trace)
    expect = VT.deformable_self_attention(trace["vq"], params, "vt.self.0", 2)
    assert np.array_equal(out.data, expect.data)


# -- positional code -----------------------------------------------------------------
def test_positional_encoding_values():
    pe = VT.positional_encoding((4, 3, 2), 7)
    assert pe.shape == (4, 3, 2, 7)
    # channel 0: sin over x at the base frequency; channel 3: cos over x
    np.testing.assert_allclose(pe[:, 0, 0, 0], np.sin(np.arange(4) * np.pi / 4), atol=0)
    np.testing.assert_allclose(pe[:, 0, 0, 3], np.cos(np.arange(4) * np.pi / 4), atol=0)
    np.testing.assert_allclose(pe[0, :, 0, 1], np.sin(np.arange(3) * np.pi / 3), atol=0)
    # every voxel gets a distinct code
    flat = pe.reshape(-1, 7)
    assert len(np.unique(flat.round(12), axis=0)) == len(flat)


def test_pos_scale_zero_leaves_queries_untouched():
    cam, grid = small_camera(), small_grid()
    rng = np.random.default_rng(3)
    ctx, prob = Tensor(rng.normal(size=(4, 4, 2))), Tensor(rng.dirichlet(np.ones(6), size=(4, 4)))
    depth = rng.uniform(1.0, 6.0, size=(4, 4))
    base, shifted = {}, {}
    VT.run_cgvt(ctx, prob, depth, cam, grid, {}, n_cross=0, n_self=0, trace=base)
    VT.run_cgvt(ctx, prob, depth, cam, grid, {}, n_cross=0, n_self=0, pos_scale=0.5, trace=shifted)
    pooled = VT.voxel_pool(VT.lift_outer_product(ctx, prob), cam, grid).data
    assert np.array_equal(base["volume"].data, pooled)
    np.testing.assert_allclose(shifted["volume"].data - pooled, 0.5 * VT.positional_encoding(grid.dims, 2),
                               atol=1e-15)
