import json

import numpy as np
import numpy.testing as npt
import pytest

from pgdiff.metrics import (PSNR_CAP, EvalReport, LengthMismatch, TooSmall,
                            flow_warp_error, psnr, ssim, warp_image)


# ---------------------------------------------------------------------------
# psnr

def test_psnr_identical_hits_cap(rng):
    a = rng.uniform(-1, 1, (3, 16, 16))
    assert psnr(a, a) == PSNR_CAP


def test_psnr_full_range_error_is_zero_db():
    a = np.full((3, 16, 16), -1.0)
    b = np.full((3, 16, 16), 1.0)
    assert psnr(a, b) == pytest.approx(0.0, abs=1e-12)


def test_psnr_uniform_offset_exact():
    # mse 0.04 against peak^2 = 4 is exactly 20 dB
    a = np.zeros((3, 16, 16))
    assert psnr(a, a + 0.2) == pytest.approx(20.0, abs=1e-12)


def test_psnr_symmetry_and_monotonicity(rng):
    a = rng.uniform(-1, 1, (3, 16, 16))
    b = rng.uniform(-1, 1, (3, 16, 16))
    assert psnr(a, b) == psnr(b, a)
    assert psnr(a, a + 0.01) > psnr(a, a + 0.1)


def test_psnr_shape_check(rng):
    with pytest.raises(ValueError):
        psnr(rng.uniform(-1, 1, (3, 16, 16)), rng.uniform(-1, 1, (3, 8, 8)))


# ---------------------------------------------------------------------------
# ssim

def test_ssim_identical_is_one(rng):
    a = rng.uniform(-1, 1, (3, 16, 16))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)


def test_ssim_negation_is_negative():
    # needs locally zero-mean content: with nonzero window means both the
    # luminance and structure factors flip sign and the product turns
    # positive again, so a checkerboard is the clean case
    ys, xs = np.mgrid[0:16, 0:16]
    a = 0.9 * (-1.0) ** (ys + xs)
    assert ssim(a, -a) < -0.9


def test_ssim_less_than_one_under_noise(rng):
    a = rng.uniform(-1, 1, (3, 16, 16))
    assert ssim(a, np.clip(a + rng.normal(0, 0.2, a.shape), -1, 1)) < 0.99


def test_ssim_symmetry(rng):
    a = rng.uniform(-1, 1, (16, 16))
    b = rng.uniform(-1, 1, (16, 16))
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)


def test_ssim_direct_formula_oracle(rng):
    # recompute from scratch with explicit python loops over window positions
    a = rng.uniform(-1, 1, (16, 16))
    b = np.clip(a + rng.normal(0, 0.1, a.shape), -1, 1)
    half = 5
    x = np.arange(11) - 5.0
    k = np.exp(-(x ** 2) / (2 * 1.5 ** 2))
    k2 = np.outer(k, k)
    k2 /= k2.sum()
    c1 = (0.01 * 2.0) ** 2
    c2 = (0.03 * 2.0) ** 2
    vals = []
    for y in range(half, 16 - half):
        for x_ in range(half, 16 - half):
            wa = a[y - half:y + half + 1, x_ - half:x_ + half + 1]
            wb = b[y - half:y + half + 1, x_ - half:x_ + half + 1]
            mu_a = (wa * k2).sum()
            mu_b = (wb * k2).sum()
            va = (wa * wa * k2).sum() - mu_a ** 2
            vb = (wb * wb * k2).sum() - mu_b ** 2
            cov = (wa * wb * k2).sum() - mu_a * mu_b
            vals.append(((2 * mu_a * mu_b + c1) * (2 * cov + c2))
                        / ((mu_a ** 2 + mu_b ** 2 + c1) * (va + vb + c2)))
    npt.assert_allclose(ssim(a, b), np.mean(vals), atol=1e-9)


def test_ssim_too_small():
    with pytest.raises(TooSmall):
        ssim(np.zeros((3, 10, 16)), np.zeros((3, 10, 16)))


# ---------------------------------------------------------------------------
# warping

def test_warp_zero_flow_is_identity(rng):
    img = rng.uniform(-1, 1, (3, 8, 8))
    npt.assert_array_equal(warp_image(img, np.zeros((2, 8, 8))), img)


def test_warp_integer_shift_exact(rng):
    img = rng.uniform(-1, 1, (3, 8, 8))
    flow = np.zeros((2, 8, 8))
    flow[0] = 2.0  # sample two columns to the right
    out = warp_image(img, flow)
    npt.assert_array_equal(out[:, :, :6], img[:, :, 2:])


def test_warp_bilinear_oracle(rng):
    img = rng.uniform(-1, 1, (3, 8, 8))
    flow = rng.uniform(-2.0, 2.0, (2, 8, 8))
    out = warp_image(img, flow)
    ys, xs = np.mgrid[0:8, 0:8]
    for y in range(8):
        for x in range(8):
            sx = min(max(x + flow[0, y, x], 0.0), 7.0)
            sy = min(max(y + flow[1, y, x], 0.0), 7.0)
            x0, y0 = int(np.floor(sx)), int(np.floor(sy))
            x1, y1 = min(x0 + 1, 7), min(y0 + 1, 7)
            fx, fy = sx - x0, sy - y0
            want = (img[:, y0, x0] * (1 - fx) * (1 - fy)
                    + img[:, y0, x1] * fx * (1 - fy)
                    + img[:, y1, x0] * (1 - fx) * fy
                    + img[:, y1, x1] * fx * fy)
            npt.assert_allclose(out[:, y, x], want, atol=1e-12)


def test_warp_clamps_at_border(rng):
    img = rng.uniform(-1, 1, (3, 8, 8))
    flow = np.full((2, 8, 8), 100.0)
    out = warp_image(img, flow)
    npt.assert_array_equal(out, np.broadcast_to(img[:, -1:, -1:], out.shape))


def test_warp_flow_shape_check(rng):
    with pytest.raises(ValueError):
        warp_image(rng.uniform(-1, 1, (3, 8, 8)), np.zeros((2, 4, 4)))


# ---------------------------------------------------------------------------
# sequence warp error

def test_flow_warp_error_static_sequence(rng):
    frame = rng.uniform(-1, 1, (3, 8, 8))
    frames = [frame, frame.copy(), frame.copy()]
    flows = [np.zeros((2, 8, 8))] * 2
    masks = [np.ones((8, 8), dtype=bool)] * 2
    assert flow_warp_error(frames, flows, masks) == 0.0


def test_flow_warp_error_known_value():
    a = np.zeros((3, 8, 8))
    b = np.full((3, 8, 8), 0.5)
    mask = np.zeros((8, 8), dtype=bool)
    mask[2:4, 3:5] = True
    got = flow_warp_error([a, b], [np.zeros((2, 8, 8))], [mask])
    assert got == pytest.approx(0.5, abs=1e-15)


def test_flow_warp_error_empty_masks_contribute_nothing(rng):
    frames = [rng.uniform(-1, 1, (3, 8, 8)) for _ in range(3)]
    flows = [np.zeros((2, 8, 8))] * 2
    masks = [np.zeros((8, 8), dtype=bool), np.ones((8, 8), dtype=bool)]
    only_second = flow_warp_error(frames[1:], flows[1:], masks[1:])
    assert flow_warp_error(frames, flows, masks) == pytest.approx(only_second)
    assert flow_warp_error(frames, flows, [masks[0], masks[0]]) == 0.0


def test_flow_warp_error_prefers_true_ordering(rng):
    # frames drift right by one pixel per step; the matching flow must score
    # better than the same frames with shuffled contents
    base = rng.uniform(-1, 1, (3, 8, 16))
    frames = [base[:, :, 4 - i:12 - i] for i in range(3)]  # content moves right
    flow = np.full((2, 8, 8), 0.0)
    flow[0] = -1.0  # current pixel came from one to the left in the previous frame
    flows = [flow] * 2
    mask = np.zeros((8, 8), dtype=bool)
    mask[:, 1:] = True
    masks = [mask] * 2
    ordered = flow_warp_error(frames, flows, masks)
    shuffled = flow_warp_error([frames[1], frames[2], frames[0]], flows, masks)
    assert ordered < 1e-12
    assert shuffled > 0.01


def test_flow_warp_error_length_check(rng):
    frames = [rng.uniform(-1, 1, (3, 8, 8))] * 3
    with pytest.raises(LengthMismatch):
        flow_warp_error(frames, [np.zeros((2, 8, 8))], [np.ones((8, 8), bool)])


# ---------------------------------------------------------------------------
# report

def test_eval_report_json_and_table():
    rep = EvalReport(psnr=[30.0, 28.5], ssim=[0.95, 0.91], warp_error=0.0123,
                     frames_scored=5, config_hash="abc123")
    data = json.loads(rep.to_json())
    assert data["psnr"] == [30.0, 28.5]
    assert data["config_hash"] == "abc123"
    table = rep.table()
    assert "30.000" in table and "0.9500" in table and "0.012300" in table
    assert table.count("\n") == 3
