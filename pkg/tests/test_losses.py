import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from stdaseg.losses import (
    DEFAULT_BETA,
    DEFAULT_LAMBDA,
    NonFiniteLossError,
    adversarial_losses,
    combine,
    discriminator_loss,
    generator_loss,
    seg_loss,
    st_loss,
)
from stdaseg.metrics import IGNORE_INDEX
from stdaseg.selftrain import PseudoLabel

import oracles


def test_default_weights():
    assert DEFAULT_LAMBDA == 0.25 and DEFAULT_BETA == 0.005


# --------------------------------------------------------------------- segmentation


def test_confident_correct_logits_give_zero_loss():
    label = torch.randint(0, 5, (2, 6, 6))
    logits = torch.nn.functional.one_hot(label, 5).permute(0, 3, 1, 2).double() * 100
    assert seg_loss(logits, label).item() < 1e-30


@pytest.mark.parametrize("k", [2, 3, 6, 17])
def test_uniform_logits_give_log_k(k):
    logits = torch.full((1, k, 4, 5), 0.37, dtype=torch.float64)
    label = torch.randint(0, k, (1, 4, 5))
    assert abs(seg_loss(logits, label).item() - math.log(k)) <= 1e-9


def test_seg_loss_matches_scalar_oracle(rng):
    logits = rng.normal(size=(3, 2, 2))
    label = rng.integers(0, 3, size=(2, 2))
    got = seg_loss(torch.tensor(logits), torch.tensor(label)).item()
    assert got == pytest.approx(oracles.cross_entropy(logits, label), abs=1e-12)


def test_ignored_pixels_excluded(rng):
    logits = rng.normal(size=(4, 3, 3))
    label = rng.integers(0, 4, size=(3, 3))
    label[0, :] = IGNORE_INDEX
    got = seg_loss(torch.tensor(logits), torch.tensor(label)).item()
    assert got == pytest.approx(oracles.cross_entropy(logits, label), abs=1e-12)


def test_all_ignored_is_zero_with_warning():
    logits = torch.randn(1, 3, 2, 2, requires_grad=True)
    label = torch.full((1, 2, 2), IGNORE_INDEX)
    with pytest.warns(RuntimeWarning):
        loss = seg_loss(logits, label)
    assert loss.item() == 0.0
    loss.backward()  # still differentiable


def test_seg_loss_shift_invariance(rng):
    logits = torch.tensor(rng.normal(size=(2, 4, 3, 3)))
    shift = torch.tensor(rng.normal(size=(2, 1, 3, 3))) * 10
    label = torch.tensor(rng.integers(0, 4, size=(2, 3, 3)))
    assert seg_loss(logits + shift, label).item() == pytest.approx(seg_loss(logits, label).item(), abs=1e-12)


# --------------------------------------------------------------------- self-training


def test_st_loss_with_own_argmax_is_self_entropy(rng):
    logits = torch.tensor(rng.normal(size=(1, 5, 3, 3)) * 2)
    pseudo = PseudoLabel(logits.argmax(1), 0)
    got = st_loss(logits, pseudo).item()
    arr = logits[0].numpy()
    manual = 0.0
    for r in range(3):
        for c in range(3):
            p = oracles.softmax_vec(list(arr[:, r, c]))
            manual += -math.log(max(p))
    assert got == pytest.approx(manual / 9, abs=1e-12)
    assert got < math.log(5)


def test_st_loss_agreeing_one_hot_is_zero():
    labels = torch.randint(0, 3, (1, 4, 4))
    logits = torch.nn.functional.one_hot(labels, 3).permute(0, 3, 1, 2).double() * 80
    assert st_loss(logits, PseudoLabel(labels, 0)).item() < 1e-30


def test_st_loss_equals_seg_loss(rng):
    logits = torch.tensor(rng.normal(size=(2, 4, 3, 3)))
    labels = torch.tensor(rng.integers(0, 4, size=(2, 3, 3)))
    assert st_loss(logits, PseudoLabel(labels, 3)).item() == seg_loss(logits, labels).item()
    assert st_loss(logits, labels).item() == seg_loss(logits, labels).item()


# --------------------------------------------------------------------- adversarial


def test_zero_logits_give_ln2():
    z = torch.zeros(2, 1, 3, 3, dtype=torch.float64)
    g, d = adversarial_losses(z, z)
    assert g.item() == pytest.approx(math.log(2), abs=1e-15)
    assert d.item() == pytest.approx(math.log(2), abs=1e-15)


def test_perfect_discriminator_limits():
    real = torch.full((1, 1, 2, 2), 1e4, dtype=torch.float64)
    fake = torch.full((1, 1, 2, 2), -1e4, dtype=torch.float64)
    g, d = adversarial_losses(real, fake)
    assert d.item() == 0.0
    assert math.isfinite(g.item()) and g.item() == pytest.approx(1e4)


def test_adversarial_matches_bce_oracle(rng):
    real = rng.normal(size=(1, 3, 3)) * 2
    fake = rng.normal(size=(1, 3, 3)) * 2
    g, d = adversarial_losses(torch.tensor(real), torch.tensor(fake))
    r, f = real.ravel(), fake.ravel()
    g_ref = np.mean([oracles.bce_with_logits(v, 1) for v in f])
    d_ref = 0.5 * (np.mean([oracles.bce_with_logits(v, 1) for v in r]) + np.mean([oracles.bce_with_logits(v, 0) for v in f]))
    assert g.item() == pytest.approx(g_ref, abs=1e-12)
    assert d.item() == pytest.approx(d_ref, abs=1e-12)
    assert generator_loss(torch.tensor(fake)).item() == g.item()
    assert discriminator_loss(torch.tensor(real), torch.tensor(fake)).item() == d.item()


def test_adversarial_shape_mismatch():
    with pytest.raises(ValueError):
        adversarial_losses(torch.zeros(1, 1, 2, 2), torch.zeros(1, 1, 3, 3))


# --------------------------------------------------------------------- combination


def test_zero_weights_keep_only_segmentation():
    parts = dict(seg_S=0.7, seg_T=1.1, st_S=5.0, st_T=6.0, adv_S=9.0, adv_T=2.0)
    assert combine(parts, 0.0, 0.0).combined == pytest.approx(1.8, abs=1e-15)


def test_unit_parts():
    parts = {k: 1.0 for k in ("seg_S", "seg_T", "st_S", "st_T", "adv_S", "adv_T", "disc_S", "disc_T")}
    assert abs(combine(parts).combined - 2.51) <= 1e-12


def test_disc_terms_logged_not_summed():
    b = combine(dict(seg_S=1.0, disc_S=100.0, disc_T=100.0))
    assert b.combined == 1.0 and b.disc_S == 100.0


@settings(max_examples=100, deadline=None)
@given(vals=st.lists(st.floats(-50, 50), min_size=6, max_size=6), lam=st.floats(0, 2), beta=st.floats(0, 1))
def test_combined_matches_scalar_recomputation(vals, lam, beta):
    names = ("seg_S", "seg_T", "st_S", "st_T", "adv_S", "adv_T")
    parts = dict(zip(names, vals))
    got = combine(parts, lam, beta)
    ref = (vals[0] + vals[1]) + lam * (vals[2] + vals[3]) + beta * (vals[4] + vals[5])
    assert abs(float(got.combined) - ref) <= 1e-8
    assert got.record()["st_T"] == vals[3]


def test_combined_linear_in_each_part():
    base = dict(seg_S=0.3, seg_T=0.4, st_S=0.5, st_T=0.6, adv_S=0.7, adv_T=0.8)
    coeff = dict(seg_S=1, seg_T=1, st_S=0.25, st_T=0.25, adv_S=0.005, adv_T=0.005)
    c0 = combine(base).combined
    for k in base:
        bumped = dict(base, **{k: base[k] + 1.0})
        assert combine(bumped).combined - c0 == pytest.approx(coeff[k], abs=1e-12)


def test_combined_gradient_is_weighted_sum():
    torch.manual_seed(0)
    w = torch.randn(3, dtype=torch.float64, requires_grad=True)
    terms = {
        "seg_S": (w ** 2).sum(), "seg_T": w.sin().sum(), "st_S": w.exp().sum(),
        "st_T": (w * 3).sum(), "adv_S": w.cos().sum(), "adv_T": (w ** 3).sum(),
    }
    total = combine(terms).combined
    g_total, = torch.autograd.grad(total, w, retain_graph=True)
    coeff = dict(seg_S=1, seg_T=1, st_S=0.25, st_T=0.25, adv_S=0.005, adv_T=0.005)
    expect = sum(coeff[k] * torch.autograd.grad(v, w, retain_graph=True)[0] for k, v in terms.items())
    torch.testing.assert_close(g_total, expect, rtol=0, atol=1e-12)

    # finite-difference spot check on one coordinate
    eps = 1e-6
    def f(x):
        return combine({
            "seg_S": (x ** 2).sum(), "seg_T": x.sin().sum(), "st_S": x.exp().sum(),
            "st_T": (x * 3).sum(), "adv_S": x.cos().sum(), "adv_T": (x ** 3).sum(),
        }).combined.item()
    e = torch.zeros(3, dtype=torch.float64)
    e[1] = eps
    fd = (f(w.detach() + e) - f(w.detach() - e)) / (2 * eps)
    assert fd == pytest.approx(g_total[1].item(), rel=1e-6)


@pytest.mark.parametrize("bad", [float("nan"), float("inf")])
def test_non_finite_part_aborts(bad):
    with pytest.raises(NonFiniteLossError, match="adv_T"):
        combine(dict(seg_S=1.0, adv_T=bad))


def test_unknown_part_rejected():
    with pytest.raises(KeyError):
        combine(dict(seg=1.0))
