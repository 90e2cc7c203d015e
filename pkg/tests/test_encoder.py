import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from conftest import randomize
from sscdesk import encoder as E
from sscdesk.errors import IndivisibleGroups
from sscdesk.gradcheck import check_gradients
from sscdesk.nn import ParamBuilder
from sscdesk.rng import make_rng
from sscdesk.tensor import Tensor

C = 3


@pytest.fixture
def params(pb64):
    E.init_encoder_params(pb64, C, num_classes=4, groups=2)
    return pb64.params


def slab_max_oracle(vol, axis, K):
    """Loop over output cells and slabs, taking the max by hand."""
    X, Y, Z, Cc = vol.shape
    ext = vol.shape[axis]
    L = ext // K
    keep = [a for a in range(3) if a != axis]
    A, B = vol.shape[keep[0]], vol.shape[keep[1]]
    out = np.empty((A, B, K * Cc))
    for a in range(A):
        for b in range(B):
            for k in range(K):
                for c in range(Cc):
                    best = -np.inf
                    for l in range(k * L, (k + 1) * L):
                        idx = [0, 0, 0]
                        idx[keep[0]], idx[keep[1]], idx[axis] = a, b, l
                        best = max(best, vol[idx[0], idx[1], idx[2], c])
                    out[a, b, k * Cc + c] = best
    return out


def identity_s2c(K, c):
    w = np.zeros((1, 1, K * c, c))
    for k in range(K):
        w[0, 0, k * c:(k + 1) * c] = np.eye(c) / K
    return w


def test_voxel_branch_zero_weights_is_identity(params):
    for k, t in params.items():
        if ".voxel." in k:
            t.data[...] = 0
    vol = np.random.default_rng(0).normal(size=(4, 4, 2, C))
    out = E.voxel_branch(Tensor(vol), params)
    assert out.shape == vol.shape and np.array_equal(out.data, vol)


def test_voxel_branch_gradient(params):
    rng = np.random.default_rng(1)
    target = rng.normal(size=(3, 3, 2, C))
    f = lambda v, w: (E.voxel_branch(v, {**params, "lge.voxel.0.c1.w": w}) * target).sum()
    assert check_gradients(f, [rng.normal(size=(3, 3, 2, C)), params["lge.voxel.0.c1.w"].data]) < 1e-4


@pytest.mark.parametrize("axis", [0, 1, 2])
def test_single_group_is_plain_max(axis):
    vol = np.random.default_rng(2).normal(size=(4, 3, 2, C))
    got = E.group_pool_stage(Tensor(vol), axis, 1).data
    keep_order = [a for a in range(3) if a != axis]
    expect = vol.max(axis=axis)
    assert np.array_equal(got, expect)
    assert keep_order == sorted(keep_order)


def test_single_group_with_conv():
    rng = np.random.default_rng(3)
    vol = rng.normal(size=(4, 4, 4, C))
    p = {"s.w": Tensor(rng.normal(size=(1, 1, C, C))), "s.b": Tensor(rng.normal(size=C))}
    got = E.group_s2c_pool(Tensor(vol), "Z", 1, p, "s").data
    np.testing.assert_allclose(got, vol.max(axis=2) @ p["s.w"].data[0, 0] + p["s.b"].data, atol=1e-12)


def test_constant_volume_gives_constant_plane():
    rng = np.random.default_rng(4)
    vol = np.full((4, 4, 4, C), 1.7)
    p = {"s.w": Tensor(rng.normal(size=(1, 1, 2 * C, C))), "s.b": Tensor(rng.normal(size=C))}
    got = E.group_s2c_pool(Tensor(vol), "Y", 2, p, "s").data
    np.testing.assert_allclose(got, np.broadcast_to(got[0, 0], got.shape), atol=1e-12)


def test_indivisible_groups():
    with pytest.raises(IndivisibleGroups):
        E.group_pool_stage(Tensor(np.zeros((4, 4, 3, 2))), "Z", 2)


def test_k2_identity_conv_matches_slab_oracle():
    vol = np.random.default_rng(5).normal(size=(4, 4, 4, 2))
    p = {"s.w": Tensor(np.eye(4).reshape(1, 1, 4, 4)), "s.b": Tensor(np.zeros(4))}
    for axis in range(3):
        got = E.group_s2c_pool(Tensor(vol), axis, 2, p, "s").data
        assert np.array_equal(got, slab_max_oracle(vol, axis, 2))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_pool_stage_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    dims = [int(rng.choice([1, 2, 4, 8])) for _ in range(3)]
    vol = rng.normal(size=tuple(dims) + (int(rng.integers(1, 5)),))
    axis = int(rng.integers(0, 3))
    divisors = [k for k in range(1, dims[axis] + 1) if dims[axis] % k == 0]
    K = int(rng.choice(divisors))
    assert np.array_equal(E.group_pool_stage(Tensor(vol), axis, K).data, slab_max_oracle(vol, axis, K))


def test_tpv_shapes_and_slab_permutation(params):
    rng = np.random.default_rng(6)
    vol = rng.normal(size=(4, 6, 2, C))
    planes = E.tpv_branch(Tensor(vol), 2, params)
    assert planes.xy.shape == (4, 6, C) and planes.xz.shape == (4, 2, C) and planes.yz.shape == (6, 2, C)
    vol4 = rng.normal(size=(4, 4, 4, C))
    shuffled = vol4.copy()
    shuffled[:, :, :2] = vol4[:, :, [1, 0]]
    a = E.group_pool_stage(Tensor(vol4), "Z", 2).data
    b = E.group_pool_stage(Tensor(shuffled), "Z", 2).data
    assert np.array_equal(a, b)


def test_tpv_gradient(params):
    rng = np.random.default_rng(7)
    randomize(params, rng, scale=0.4)
    t = [rng.normal(size=s) for s in [(4, 4, C), (4, 2, C), (4, 2, C)]]

    def f(v):
        p = E.tpv_branch(v, 2, params)
        return (p.xy * t[0]).sum() + (p.xz * t[1]).sum() + (p.yz * t[2]).sum()

    assert check_gradients(f, [rng.normal(size=(4, 4, 2, C))]) < 1e-4


def planes_for(rng, X, Y, Z, c=C):
    return E.TpvPlanes(Tensor(rng.normal(size=(X, Y, c))), Tensor(rng.normal(size=(X, Z, c))),
                       Tensor(rng.normal(size=(Y, Z, c))))


def test_one_hot_fusion_selects_voxel_branch(params):
    rng = np.random.default_rng(8)
    params["lge.fuse.w"].data[...] = 0
    params["lge.fuse.b"].data[...] = [40.0, 0, 0, 0]
    fv = rng.normal(size=(3, 2, 2, C))
    out = E.dynamic_fuse(Tensor(fv), planes_for(rng, 3, 2, 2), params).data
    np.testing.assert_allclose(out, fv, rtol=0, atol=1e-6)


def test_fusion_of_equal_fields(params):
    rng = np.random.default_rng(9)
    randomize(params, rng)
    c = rng.normal(size=C)
    fv = np.broadcast_to(c, (3, 2, 2, C)).copy()
    planes = E.TpvPlanes(*(Tensor(np.broadcast_to(c, s + (C,)).copy()) for s in [(3, 2), (3, 2), (2, 2)]))
    out, w = E.dynamic_fuse(Tensor(fv), planes, params, return_weights=True)
    np.testing.assert_allclose(out.data, fv, atol=1e-12)
    np.testing.assert_allclose(w.data.sum(-1), 1.0, atol=1e-6)


def test_fusion_convex(params):
    rng = np.random.default_rng(10)
    randomize(params, rng)
    fv = rng.normal(size=(3, 4, 2, C))
    pl = planes_for(rng, 3, 4, 2)
    out = E.dynamic_fuse(Tensor(fv), pl, params).data
    cand = np.stack(np.broadcast_arrays(fv, pl.xy.data[:, :, None], pl.xz.data[:, None], pl.yz.data[None]))
    assert np.all(out >= cand.min(0) - 1e-12) and np.all(out <= cand.max(0) + 1e-12)


def test_fusion_gradient(params):
    rng = np.random.default_rng(11)
    randomize(params, rng)
    target = rng.normal(size=(3, 2, 2, C))
    f = lambda fv, a, b, c: (E.dynamic_fuse(fv, E.TpvPlanes(a, b, c), params) * target).sum()
    inputs = [rng.normal(size=(3, 2, 2, C)), rng.normal(size=(3, 2, C)), rng.normal(size=(3, 2, C)),
              rng.normal(size=(2, 2, C))]
    assert check_gradients(f, inputs) < 1e-4


def test_decode_head(params):
    rng = np.random.default_rng(12)
    params["lge.head.w"].data[...] = 0
    params["lge.head.b"].data[...] = [0.1, 0.5, -0.2, 0.3]
    f = Tensor(rng.normal(size=(3, 2, 2, C)))
    logits = E.decode_head(f, params).data
    assert np.all(logits.argmax(-1) == 1)
    randomize(params, rng)
    small = E.decode_head(f, params).data
    up = E.decode_head(f, params, upsample=True).data
    assert up.shape == (6, 4, 4, 4)
    np.testing.assert_allclose(up[::2, ::2, ::2], small, atol=1e-12)


def test_upsample_gradient():
    rng = np.random.default_rng(13)
    target = rng.normal(size=(4, 6, 2, 2))
    assert check_gradients(lambda x: (E.upsample2x(x) * target).sum(), [rng.normal(size=(2, 3, 1, 2))]) < 1e-6


def test_full_encoder_gradient():
    pb = ParamBuilder(make_rng(5), dtype=np.float64)
    E.init_encoder_params(pb, C, num_classes=3)
    params = pb.params
    rng = np.random.default_rng(14)
    target = rng.normal(size=(4, 4, 2, 3))
    f = lambda v: (E.run_lge(v, params) * target).sum()
    assert check_gradients(f, [rng.normal(size=(4, 4, 2, C))]) < 1e-3
