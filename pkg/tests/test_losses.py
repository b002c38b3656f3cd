import math
from collections import OrderedDict

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from regattn.errors import ConfigError, InputError
from regattn.losses import (DEFAULT_REG_WEIGHTS, LossBreakdown, d_loss, g_adv_loss,
                            perceptual_reg, total_g_loss)
from regattn.models import FeatureExtractor

from oracles import d_loss_loop, g_adv_loop, neg_log_sigmoid as _nls


def test_symmetric_point_values():
    z = torch.zeros(1, 1, 30, 30, dtype=torch.float64)
    assert d_loss(z, z).item() == pytest.approx(2 * math.log(2), abs=1e-12)
    assert g_adv_loss(z).item() == pytest.approx(math.log(2), abs=1e-12)
    assert d_loss(z, z).item() == pytest.approx(1.386294, abs=1e-6)
    assert g_adv_loss(z).item() == pytest.approx(0.693147, abs=1e-6)


def test_winning_limits():
    big = torch.full((1, 1, 6, 6), 40.0, dtype=torch.float64)
    assert d_loss(big, -big).item() < 1e-15
    assert g_adv_loss(big).item() < 1e-15


def test_clamp_keeps_losses_finite():
    huge = torch.full((1, 1, 4, 4), 1e4, dtype=torch.float64)
    value = d_loss(-huge, huge).item()
    assert value == pytest.approx(-2 * math.log(1e-12))
    assert math.isfinite(g_adv_loss(-huge).item())


def test_patch_loop_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        shape = (int(rng.integers(1, 4)), 1, int(rng.integers(1, 9)), int(rng.integers(1, 9)))
        real = torch.from_numpy(rng.normal(0, 4, size=shape))
        fake = torch.from_numpy(rng.normal(0, 4, size=shape))
        assert abs(d_loss(real, fake).item() - d_loss_loop(real, fake)) <= 1e-10
        assert abs(g_adv_loss(fake).item() - g_adv_loop(fake)) <= 1e-10


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=20), st.floats(0.01, 5))
def test_nonnegative_and_monotone(values, shift):
    z = torch.tensor(values, dtype=torch.float64).view(1, 1, 1, -1)
    assert g_adv_loss(z).item() >= 0
    assert d_loss(z, z).item() >= 0
    # generator improves when its logits rise, discriminator when real rises / fake falls;
    # strictly so unless every logit sits on the clamp floor, where the oracle is flat too
    g_new, g_old = g_adv_loss(z + shift).item(), g_adv_loss(z).item()
    d_new, d_old = d_loss(z + shift, z - shift).item(), d_loss(z, z).item()
    assert g_new <= g_old and d_new <= d_old
    if g_adv_loop(z) - g_adv_loop(z + shift) > 1e-9:
        assert g_new < g_old
    if d_loss_loop(z, z) - d_loss_loop(z + shift, z - shift) > 1e-9:
        assert d_new < d_old


def test_permutation_invariance():
    gen = torch.Generator().manual_seed(1)
    real = torch.randn(6, 1, 5, 5, generator=gen, dtype=torch.float64)
    fake = torch.randn(6, 1, 5, 5, generator=gen, dtype=torch.float64)
    perm = torch.randperm(6, generator=gen)
    assert d_loss(real[perm], fake[perm]).item() == pytest.approx(d_loss(real, fake).item(), abs=1e-14)
    assert g_adv_loss(fake[perm]).item() == pytest.approx(g_adv_loss(fake).item(), abs=1e-14)
    ex = FeatureExtractor(width=8, pretrained=False).double()
    x = torch.rand(6, 3, 16, 16, generator=gen, dtype=torch.float64) * 2 - 1
    gx = torch.rand(6, 3, 16, 16, generator=gen, dtype=torch.float64) * 2 - 1
    assert perceptual_reg(x[perm], gx[perm], ex).item() == \
        pytest.approx(perceptual_reg(x, gx, ex).item(), rel=1e-12)


# -- perceptual regularizer ---------------------------------------------------


def stub_extractor(t):
    # a single 1x1x1 "feature": the top-left red value
    return OrderedDict(f=t[:, :1, :1, :1])


def test_reg_stub_hand_value():
    a, b = 0.3, -0.45
    x = torch.full((1, 3, 4, 4), a, dtype=torch.float64)
    gx = torch.full((1, 3, 4, 4), b, dtype=torch.float64)
    assert perceptual_reg(x, gx, stub_extractor, weights=(1.0,)).item() == pytest.approx((a - b) ** 2)


class ArrayExtractor:
    """Returns fixed per-input feature arrays, so the regularizer can be checked by hand."""

    def __init__(self, table):
        self.table = table

    def __call__(self, t):
        return self.table[id(t)]


def reg_loop_oracle(fa, fb, weights):
    total = 0.0
    for w, a, b in zip(weights, fa, fb):
        n, c, h, wd = a.shape
        acc = 0.0
        for i in range(n):
            for y in range(h):
                for x in range(wd):
                    acc += sum((w * (a[i, k, y, x] - b[i, k, y, x])) ** 2 for k in range(c))
        total += acc / (n * h * wd)
    return total


def test_reg_layer_weighting_oracle():
    rng = np.random.default_rng(5)
    shapes = [(2, 4, 6, 6), (2, 8, 3, 3), (2, 16, 2, 2)]
    fa = [rng.normal(size=s) for s in shapes]
    fb = [rng.normal(size=s) for s in shapes]
    x = torch.zeros(2, 3, 4, 4, dtype=torch.float64)
    gx = torch.ones(2, 3, 4, 4, dtype=torch.float64)
    ex = ArrayExtractor({
        id(x): OrderedDict((f"l{i}", torch.from_numpy(a)) for i, a in enumerate(fa)),
        id(gx): OrderedDict((f"l{i}", torch.from_numpy(b)) for i, b in enumerate(fb)),
    })
    got = perceptual_reg(x, gx, ex, weights=DEFAULT_REG_WEIGHTS).item()
    assert got == pytest.approx(reg_loop_oracle(fa, fb, DEFAULT_REG_WEIGHTS), rel=1e-12)


def test_default_weights_value():
    assert DEFAULT_REG_WEIGHTS == (1.0 / 32, 1.0 / 16, 1.0 / 8)


def test_reg_identity_and_symmetry():
    ex = FeatureExtractor(width=8, pretrained=False).double()
    gen = torch.Generator().manual_seed(2)
    x = torch.rand(2, 3, 16, 16, generator=gen, dtype=torch.float64) * 2 - 1
    gx = torch.rand(2, 3, 16, 16, generator=gen, dtype=torch.float64) * 2 - 1
    assert perceptual_reg(x, x.clone(), ex).item() == 0.0
    r1 = perceptual_reg(x, gx, ex).item()
    assert r1 > 0
    assert r1 == pytest.approx(perceptual_reg(gx, x, ex).item(), rel=1e-12)


def test_reg_errors():
    x = torch.zeros(1, 3, 4, 4)
    with pytest.raises(InputError):
        perceptual_reg(x, torch.zeros(1, 3, 8, 8), stub_extractor, weights=(1.0,))
    with pytest.raises(ConfigError):
        perceptual_reg(x, x, stub_extractor, weights=(1.0, 2.0))
    with pytest.raises(ConfigError):
        perceptual_reg(x, x, stub_extractor, weights=(-1.0,))


def test_reg_reuses_given_features():
    calls = []

    def counting(t):
        calls.append(t)
        return stub_extractor(t)

    x = torch.zeros(1, 3, 4, 4)
    perceptual_reg(x, x + 0.5, counting, weights=(1.0,), x_features=stub_extractor(x))
    assert len(calls) == 1


# -- total --------------------------------------------------------------------


def logit_for_adv(value):
    # z with -log(sigmoid(z)) == value
    return -math.log(math.expm1(value))


def _stub_pair(reg):
    x = torch.full((1, 3, 4, 4), math.sqrt(reg), dtype=torch.float64)
    return x, torch.zeros_like(x)


def test_total_lambda_zero_is_adv():
    fake = torch.randn(1, 1, 6, 6, dtype=torch.float64)
    x, gx = _stub_pair(0.3)
    total, br = total_g_loss(fake, x, gx, 0.0, stub_extractor, weights=(1.0,))
    assert total.item() == br.adv == g_adv_loss(fake).item()
    assert br.reg == pytest.approx(0.3)


def test_total_unit_weight():
    fake = torch.full((1, 1, 2, 2), 0.8, dtype=torch.float64)
    x, gx = _stub_pair(0.25)
    _, br = total_g_loss(fake, x, gx, 1.0, stub_extractor, weights=(1.0,))
    assert br.total == pytest.approx(br.adv + 0.25, rel=1e-12)


def test_total_hand_arithmetic():
    fake = torch.full((1, 1, 3, 3), logit_for_adv(0.4), dtype=torch.float64)
    x, gx = _stub_pair(0.2)
    total, br = total_g_loss(fake, x, gx, 0.5, stub_extractor, weights=(1.0,))
    assert br.adv == pytest.approx(0.4, rel=1e-12)
    assert br.reg == pytest.approx(0.2, rel=1e-12)
    assert total.item() == pytest.approx(0.5, rel=1e-12)
    assert br.as_dict() == {"adv": br.adv, "reg": br.reg, "lambda": 0.5, "total": br.total}


def test_total_negative_lambda():
    x, gx = _stub_pair(0.1)
    with pytest.raises(ConfigError):
        total_g_loss(torch.zeros(1, 1, 2, 2), x, gx, -0.1, stub_extractor, weights=(1.0,))


@settings(max_examples=60, deadline=None)
@given(st.floats(-8, 8), st.floats(0, 4), st.floats(0, 100))
def test_breakdown_invariant(z, r, lam):
    fake = torch.full((1, 1, 2, 2), z, dtype=torch.float64)
    x, gx = _stub_pair(r)
    _, br = total_g_loss(fake, x, gx, lam, stub_extractor, weights=(1.0,))
    assert isinstance(br, LossBreakdown)
    expected = br.adv + lam * br.reg
    assert abs(br.total - expected) <= 1e-6 * max(1.0, abs(expected))
