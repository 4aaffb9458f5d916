import math

import numpy as np
import pytest
import torch

import oracles
from helpers import gradient_relative_error, random_batch
from nulite.losses import (
    TERMS,
    LossWeights,
    bce_on_softmax,
    dice_loss,
    focal_tversky_loss,
    hv_gradients,
    loss_hv,
    loss_np,
    loss_nt,
    loss_total,
    msge_term,
    sobel_kernels,
)


@pytest.mark.parametrize("name", TERMS)
def test_gradients_match_central_differences(name):
    assert gradient_relative_error(name) < 1e-2


# ---------------------------------------------------------------------------
# closed forms on 6x6 fixtures


def halves():
    t = torch.zeros(1, 1, 6, 6, dtype=torch.float64)
    t[..., :3] = 1.0
    return t


def test_dice_and_ftl_disjoint():
    t = halves()
    assert float(dice_loss(1 - t, t)) == pytest.approx(1.0, abs=1e-6)
    assert float(focal_tversky_loss(1 - t, t)) == pytest.approx(1.0, abs=1e-6)


def test_dice_and_ftl_identical():
    t = halves()
    assert float(dice_loss(t, t)) == pytest.approx(0.0, abs=1e-6)
    assert float(focal_tversky_loss(t, t)) == pytest.approx(0.0, abs=1e-6)


def test_dice_and_ftl_half_overlap():
    t = halves()
    p = torch.zeros_like(t)
    p[..., :3, :] = 1.0  # agrees with t on half of the pixels, complementary elsewhere
    assert float(dice_loss(p, t)) == pytest.approx(0.5, abs=1e-6)
    # with alpha + beta = 1 the Tversky index equals the overlap fraction
    assert float(focal_tversky_loss(p, t, 0.7, 0.3, 1.0)) == pytest.approx(0.5, abs=1e-6)
    assert float(focal_tversky_loss(p, t, 0.7, 0.3, 4 / 3)) == pytest.approx(0.5 ** (4 / 3), abs=1e-6)


def test_soft_disjoint_strip():
    p = torch.tensor([[[1.0, 1.0, 0.0, 0.0]]])
    t = torch.tensor([[[0.0, 0.0, 1.0, 1.0]]])
    assert float(dice_loss(p, t)) == 1.0


def test_np_loss_decreases_with_saturation():
    target = torch.zeros(1, 6, 6, dtype=torch.long)
    target[:, 1:4, 2:5] = 1
    values = []
    for m in (0.5, 1.0, 2.0, 4.0, 8.0, 16.0):
        logits = torch.stack([torch.where(target > 0, -m, m), torch.where(target > 0, m, -m)], 1).double()
        values.append(sum(float(v) for v in loss_np(logits, target).values()))
    assert all(a > b for a, b in zip(values, values[1:]))
    assert values[-1] < 1e-5


def test_hv_identity_and_offset():
    b = random_batch(3, h=8, w=8)
    zero = loss_hv(b.hv_target.double(), b.hv_target.double(), b.np_target)
    assert float(zero["hv_mse"]) == 0.0 and float(zero["hv_msge"]) == 0.0
    shifted = loss_hv(b.hv_target.double() + 0.1, b.hv_target.double(), b.np_target, LossWeights(hv_msge=1.0))
    assert float(shifted["hv_mse"]) == pytest.approx(0.01, abs=1e-12)
    assert float(shifted["hv_msge"]) == pytest.approx(0.0, abs=1e-12)


def test_hv_terms_match_scalar_oracle():
    b = random_batch(4, h=8, w=8)
    got = loss_hv(b.hv_map, b.hv_target, b.np_target, LossWeights(hv_msge=1.0))
    pred, tgt, npt = b.hv_map.numpy(), b.hv_target.numpy(), b.np_target.numpy()
    assert float(got["hv_mse"]) == pytest.approx(oracles.mse(pred, tgt), abs=1e-6)
    assert float(got["hv_msge"]) == pytest.approx(oracles.msge(pred, tgt, npt), abs=1e-6)


def test_msge_empty_mask_is_zero():
    x = torch.randn(1, 2, 6, 6, requires_grad=True)
    v = msge_term(x, torch.zeros(1, 2, 6, 6), torch.zeros(1, 6, 6))
    assert float(v.detach()) == 0.0
    v.backward()


def test_derivative_kernel_matches_oracle():
    kx, ky = sobel_kernels(5, torch.float64)
    okx, oky = oracles.derivative_kernel(5)
    assert np.allclose(kx.numpy(), okx) and np.allclose(ky.numpy(), oky)


def test_hv_gradient_of_linear_ramp():
    # interior derivative of a unit ramp is the kernel row sum of offsets / distances
    ramp = torch.arange(10, dtype=torch.float64).repeat(10, 1)
    g = hv_gradients(torch.stack([ramp, ramp.T]))
    kx, _ = sobel_kernels(5, torch.float64)
    expected = float((kx * torch.arange(-2, 3, dtype=torch.float64)).sum())
    assert torch.allclose(g[0, 2:-2, 2:-2], torch.full((6, 6), expected, dtype=torch.float64))
    assert torch.allclose(g[1, 2:-2, 2:-2], torch.full((6, 6), expected, dtype=torch.float64))


def test_nt_perfect_prediction():
    target = torch.randint(0, 4, (1, 6, 6))
    logits = (torch.nn.functional.one_hot(target, 4).permute(0, 3, 1, 2).double() * 2 - 1) * 40
    for name, v in loss_nt(logits, target).items():
        assert float(v) < 1e-6, name


def test_bce_uniform_two_class():
    logits = torch.zeros(1, 2, 4, 4)
    target = torch.zeros(1, 2, 4, 4)
    target[:, 0, :, :2] = 1
    target[:, 1, :, 2:] = 1
    assert float(bce_on_softmax(logits, target)) == pytest.approx(math.log(2), abs=1e-6)


def test_nt_terms_match_scalar_oracle():
    b = random_batch(5, h=8, w=8, classes=4)
    w = LossWeights()
    got = loss_nt(b.nt_logits, b.nt_target, w)
    logits = b.nt_logits.numpy()
    target = oracles.one_hot(b.nt_target.numpy(), 4)
    prob = oracles.softmax_map(logits)
    assert float(got["nt_dice"]) == pytest.approx(oracles.dice(prob, target), abs=1e-6)
    assert float(got["nt_ftl"]) == pytest.approx(
        oracles.focal_tversky(prob, target, w.ftl_alpha, w.ftl_beta, w.ftl_gamma), abs=1e-6)
    assert float(got["nt_bce"]) == pytest.approx(oracles.bce(logits, target), abs=1e-6)


def test_one_hot_and_index_targets_agree():
    b = random_batch(6, classes=3)
    onehot = torch.nn.functional.one_hot(b.nt_target, 3).permute(0, 3, 1, 2)
    a, c = loss_nt(b.nt_logits, b.nt_target), loss_nt(b.nt_logits, onehot)
    assert all(torch.allclose(a[k], c[k]) for k in a)


def test_tissue_only_objective():
    w = LossWeights(**{t: 0.0 for t in TERMS if t != "tc_ce"}, tc_ce=1.0)
    b = random_batch(8)
    b.tissue_logits = torch.full((2, 19), -30.0, dtype=torch.float64)
    b.tissue_logits[torch.arange(2), b.tissue_target] = 30.0
    out = loss_total(b, b, w)
    assert float(out.total) < 1e-6


def test_total_is_sum_of_independent_terms():
    b = random_batch(9, h=8, w=8, classes=4)
    w = LossWeights()
    out = loss_total(b, b, w)
    npl = b.np_logits.numpy()
    npt = oracles.one_hot(b.np_target.numpy(), 2)
    ntl = b.nt_logits.numpy()
    ntt = oracles.one_hot(b.nt_target.numpy(), 4)
    p_np, p_nt = oracles.softmax_map(npl), oracles.softmax_map(ntl)
    expected = (
        w.np_ftl * oracles.focal_tversky(p_np, npt, w.ftl_alpha, w.ftl_beta, w.ftl_gamma)
        + w.np_dice * oracles.dice(p_np, npt)
        + w.hv_mse * oracles.mse(b.hv_map.numpy(), b.hv_target.numpy())
        + w.hv_msge * oracles.msge(b.hv_map.numpy(), b.hv_target.numpy(), b.np_target.numpy())
        + w.nt_ftl * oracles.focal_tversky(p_nt, ntt, w.ftl_alpha, w.ftl_beta, w.ftl_gamma)
        + w.nt_dice * oracles.dice(p_nt, ntt)
        + w.nt_bce * oracles.bce(ntl, ntt)
        + w.tc_ce * oracles.cross_entropy(b.tissue_logits.numpy(), b.tissue_target.numpy())
    )
    assert float(out.total) == pytest.approx(expected, abs=1e-6)
    assert float(out.total) == pytest.approx(sum(float(out.terms[t]) for t in TERMS), abs=1e-6)


def test_doubling_weights_doubles_total():
    b = random_batch(10)
    w = LossWeights()
    assert float(loss_total(b, b, w.scaled(2.0)).total) == pytest.approx(2 * float(loss_total(b, b, w).total),
                                                                          rel=1e-12)


@pytest.mark.parametrize("bad", [{"np_ftl": -1.0}, {"hv_mse": float("nan")}, {t: 0.0 for t in TERMS}])
def test_invalid_weights(bad):
    with pytest.raises(ValueError):
        LossWeights(**bad)


def test_shape_mismatch_is_reported():
    with pytest.raises(ValueError):
        loss_hv(torch.zeros(1, 2, 4, 4), torch.zeros(1, 2, 4, 5), torch.zeros(1, 4, 4))
    with pytest.raises(ValueError):
        loss_nt(torch.zeros(1, 3, 4, 4), torch.full((1, 4, 4), 5))
