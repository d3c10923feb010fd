import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eraseredraw import classic_aug as ca


def rand_pair(seed, h=32, w=32):
    rng = np.random.default_rng(seed)
    img = rng.integers(0, 256, (h, w, 3)) / 255.0
    lbl = (rng.random((h, w)) < 0.4).astype(np.uint8)
    return img, lbl


# ---- basic


def test_basic_all_probabilities_zero_is_identity():
    img, lbl = rand_pair(0)
    out_img, out_lbl = ca.basic(img, lbl, np.random.default_rng(1), p_flip=0, p_rotate=0,
                                p_photometric=0, p_elastic=0)
    assert np.array_equal(out_img, img) and np.array_equal(out_lbl, lbl)


def test_hflip_twice_identity():
    img, lbl = rand_pair(2)
    assert all(np.array_equal(a, b) for a, b in zip(ca.hflip(*ca.hflip(img, lbl)), (img, lbl)))


def rasterized_rotated_square_area(h, w, half, angle_deg):
    """Count pixel centres inside a centred square rotated by angle (point-in-polygon)."""
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    t = np.deg2rad(angle_deg)
    ys, xs = np.mgrid[0:h, 0:w]
    dy, dx = ys - cy, xs - cx
    u = np.cos(t) * dx + np.sin(t) * dy
    v = -np.sin(t) * dx + np.cos(t) * dy
    return int(np.count_nonzero((np.abs(u) < half) & (np.abs(v) < half)))


def test_rotation_preserves_label_area():
    lbl = np.zeros((64, 64), np.uint8)
    lbl[31:33, 31:33] = 1
    _, out = ca.warp(np.zeros((64, 64, 3)), lbl, angle_deg=15.0)
    assert abs(ca.imaging.area(out) - 4) <= 0.2 * 4
    # larger square against the rasterisation oracle
    big = np.zeros((64, 64), np.uint8)
    big[22:42, 22:42] = 1
    _, out = ca.warp(np.zeros((64, 64, 3)), big, angle_deg=15.0)
    oracle = rasterized_rotated_square_area(64, 64, 10.0, 15.0)
    assert abs(ca.imaging.area(out) - oracle) <= 0.05 * oracle


def test_basic_keeps_label_binary_and_geometry_shared():
    ys, xs = np.mgrid[0:32, 0:32]
    lbl = ((ys - 18) ** 2 + (xs - 12) ** 2 < 80).astype(np.uint8)
    img = np.repeat(lbl[:, :, None].astype(float), 3, axis=2)
    for seed in range(10):
        out_img, out_lbl = ca.basic(img, lbl, np.random.default_rng(seed), p_photometric=0)
        assert set(np.unique(out_lbl)) <= {0, 1}
        # a label-valued image moves with the label
        agree = np.mean((out_img[..., 0] > 0.5) == out_lbl.astype(bool))
        assert agree > 0.95


# ---- random erasing


def test_random_erasing_prob_zero_identity():
    img, _ = rand_pair(4)
    assert np.array_equal(ca.random_erasing(img, np.random.default_rng(0), prob=0.0), img)


def test_random_erasing_outside_box_untouched_and_inside_noisy():
    img, _ = rand_pair(5, 64, 64)
    checked = 0
    for seed in range(50):
        out, box = ca.random_erasing(img, np.random.default_rng(seed), prob=1.0, return_box=True)
        assert box is not None
        y0, x0, y1, x1 = box
        outside = np.ones(img.shape[:2], bool)
        outside[y0:y1, x0:x1] = False
        assert np.array_equal(out[outside], img[outside])
        if y1 - y0 >= 8 and x1 - x0 >= 8:
            region = out[y0:y1, x0:x1].reshape(-1, 3)
            assert np.all(region.var(axis=0, ddof=1) > 0.02)
            checked += 1
    assert checked > 10


# ---- cutout


def test_cutout_corner_clipping():
    img = np.ones((64, 64, 3))
    out = ca.cutout(img, np.random.default_rng(0), size=16, center=(0, 0))
    zero = np.all(out == 0, axis=2)
    assert zero[:8, :8].all() and zero.sum() == 64


@pytest.mark.parametrize("center", [(0, 0), (10, 15), (19, 29)])
def test_cutout_huge_size_zeroes_everything(center):
    out = ca.cutout(np.ones((20, 30, 3)), np.random.default_rng(0), size=60, center=center)
    assert np.all(out == 0)


def test_cutout_untouched_pixels_bit_identical():
    img, _ = rand_pair(6)
    out = ca.cutout(img, np.random.default_rng(0), size=10, center=(12, 20))
    zero = np.zeros(img.shape[:2], bool)
    zero[7:17, 15:25] = True
    assert np.all(out[zero] == 0)
    assert np.array_equal(out[~zero], img[~zero])


# ---- cutmix


def test_cutmix_identical_inputs():
    a = rand_pair(7)
    (o1, l1), (o2, l2) = ca.cutmix(a, a, np.random.default_rng(0))
    for x in (o1, o2):
        assert np.array_equal(x, a[0])
    assert np.array_equal(l1, a[1]) and np.array_equal(l2, a[1])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_cutmix_mass_conservation_and_involution(seed):
    a, b = rand_pair(seed), rand_pair(seed + 1)
    ((o1, l1), (o2, l2)), box = ca.cutmix(a, b, np.random.default_rng(seed), return_box=True)
    # integer pixel accounting: no rounding can hide a lost or duplicated pixel
    q = lambda x: np.rint(x * 255).astype(np.int64)
    assert q(o1).sum() + q(o2).sum() == q(a[0]).sum() + q(b[0]).sum()
    assert sorted(np.concatenate([o1.ravel(), o2.ravel()])) == sorted(np.concatenate([a[0].ravel(), b[0].ravel()]))
    (r1, m1), (r2, m2) = ca.swap_box((o1, l1), (o2, l2), box)
    assert np.array_equal(r1, a[0]) and np.array_equal(r2, b[0])
    assert np.array_equal(m1, a[1]) and np.array_equal(m2, b[1])


# ---- gridmask


def test_gridmask_ratio_one_identity():
    img, _ = rand_pair(8)
    assert np.array_equal(ca.gridmask(img, np.random.default_rng(0), ratio=1.0), img)


def test_gridmask_fraction_d16():
    zero = ca.grid_zero_mask((64, 64), 16, 0.6, (0, 0))
    assert abs(zero.mean() - (6 / 16) ** 2) <= 0.02


@settings(max_examples=30, deadline=None)
@given(st.integers(8, 32), st.integers(0, 31), st.integers(0, 31))
def test_gridmask_periodic(d, py, px):
    zero = ca.grid_zero_mask((80, 80), d, 0.6, (py % d, px % d))
    assert np.array_equal(zero[d:, :], zero[:-d, :])
    assert np.array_equal(zero[:, d:], zero[:, :-d])


def test_gridmask_only_zeroes():
    img, _ = rand_pair(9, 64, 64)
    out = ca.gridmask(img, np.random.default_rng(3))
    changed = np.any(out != img, axis=2)
    assert np.all(out[changed] == 0)


# ---- standard duplication and policy plumbing


def test_standard_duplicate():
    data = [rand_pair(i) for i in range(10)]
    dup = ca.standard_duplicate(data, 3)
    assert len(dup) == 30
    for i, (img, lbl) in enumerate(dup):
        assert np.array_equal(img, data[i // 3][0]) and np.array_equal(lbl, data[i // 3][1])
    assert ca.standard_duplicate(data, 1) == data


def test_policy_validation():
    ca.AugPolicy("gridmask", {"ratio": 0.5})
    with pytest.raises(ValueError):
        ca.AugPolicy("mixup")
    with pytest.raises(ValueError):
        ca.AugPolicy("cutmix", {"area": [0.05, 0.4]})
    with pytest.raises(ValueError):
        ca.AugPolicy("cutout", {"colour": 1})


@pytest.mark.parametrize("kind", [k for k in ca.POLICY_REGISTRY if k != "erase_redraw"])
def test_apply_classic_label_binary(kind):
    img, lbl = rand_pair(10)
    partner = rand_pair(11)
    pol = ca.AugPolicy(kind)
    out_img, out_lbl = ca.apply_classic(kind, pol.params, img, lbl, np.random.default_rng(0), partner)
    assert out_img.shape == img.shape and out_lbl.shape == lbl.shape
    assert out_img.min() >= 0 and out_img.max() <= 1
    assert set(np.unique(out_lbl)) <= {0, 1}
    if kind not in ("basic", "cutmix"):
        assert np.array_equal(out_lbl, lbl)
