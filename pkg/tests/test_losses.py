"""Loss oracles: hand-computed values plus direct finite-difference checks
of the returned prediction gradients."""

import numpy as np
import pytest

from meltpool_da.errors import ContractError
from meltpool_da.losses import (bce, classifier_losses_phase3, discrepancy_loss,
                                domain_loss, encoder_loss, LossValue)

LN2 = float(np.log(2.0))


def fd(func, p, h=1e-6):
    """Central finite differences of a scalar function of an array."""
    g = np.zeros_like(p)
    flat = p.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = func()
        flat[i] = orig - h
        fm = func()
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g


# --- bce --------------------------------------------------------------------

def test_bce_half_confidence():
    loss, _ = bce(np.array([0.5]), np.array([1]))
    assert abs(loss.value - LN2) < 1e-4


def test_bce_near_perfect():
    loss, _ = bce(np.array([1 - 1e-7]), np.array([1]))
    assert abs(loss.value) < 1e-6


def test_bce_wrong_side():
    loss, _ = bce(np.array([0.2]), np.array([0]))
    assert abs(loss.value + np.log(0.8)) < 1e-4


def test_bce_label_contract():
    with pytest.raises(ContractError):
        bce(np.array([0.5]), np.array([2]))
    with pytest.raises(ContractError):
        bce(np.array([0.5, 0.5]), np.array([1]))


def test_bce_gradient_matches_fd(rng):
    p = rng.uniform(0.1, 0.9, size=(5, 1))
    y = rng.integers(0, 2, size=5)
    _, dp = bce(p, y)
    expect = fd(lambda: bce(p, y)[0].value, p)
    assert np.allclose(dp, expect, rtol=1e-4, atol=1e-8)


# --- domain loss --------------------------------------------------------------

def test_domain_loss_maximal_confusion():
    loss, _, _ = domain_loss(np.array([0.5]), np.array([0.5]))
    assert abs(loss.value - 2 * LN2) < 1e-4


def test_domain_loss_perfect_discrimination():
    loss, _, _ = domain_loss(np.array([1e-7]), np.array([1 - 1e-7]))
    assert loss.value < 1e-6


def test_domain_loss_hand_value():
    loss, _, _ = domain_loss(np.array([0.9]), np.array([0.8]))
    assert abs(loss.value - (-np.log(0.1) - np.log(0.8))) < 1e-4


def test_domain_loss_empty_batch():
    with pytest.raises(ContractError):
        domain_loss(np.array([]), np.array([0.5]))


def test_domain_loss_permutation_invariant(rng):
    ds = rng.uniform(0.1, 0.9, size=6)
    dt = rng.uniform(0.1, 0.9, size=6)
    a, _, _ = domain_loss(ds, dt)
    b, _, _ = domain_loss(ds[::-1].copy(), rng.permutation(dt))
    assert np.isclose(a.value, b.value)


def test_domain_loss_gradients_match_fd(rng):
    ds = rng.uniform(0.2, 0.8, size=(4, 1))
    dt = rng.uniform(0.2, 0.8, size=(3, 1))
    _, dds, ddt = domain_loss(ds, dt)
    assert np.allclose(dds, fd(lambda: domain_loss(ds, dt)[0].value, ds), rtol=1e-4)
    assert np.allclose(ddt, fd(lambda: domain_loss(ds, dt)[0].value, dt), rtol=1e-4)


# --- encoder loss --------------------------------------------------------------

def test_encoder_loss_adversarial_subtraction():
    l = encoder_loss(LossValue(0.5, "L_t1"), LossValue(0.4, "L_t2"),
                     LossValue(1.3863, "L_d"), lam=1.0)
    assert abs(l.value + 0.4863) < 1e-4


def test_encoder_loss_without_domain_term():
    l = encoder_loss(LossValue(0.5, "L_t1"), LossValue(0.4, "L_t2"))
    assert np.isclose(l.value, 0.9)
    z = encoder_loss(LossValue(0.5, "L_t1"), LossValue(0.4, "L_t2"),
                     LossValue(2.0, "L_d"), lam=0.0)
    assert np.isclose(z.value, 0.9)


def test_encoder_loss_negative_lambda():
    with pytest.raises(ContractError):
        encoder_loss(LossValue(0.5, "a"), LossValue(0.4, "b"),
                     LossValue(1.0, "c"), lam=-1.0)


# --- discrepancy loss ------------------------------------------------------------

def test_discrepancy_symmetric_bce_residual_entropy():
    loss, _, _ = discrepancy_loss(np.array([0.5]), np.array([0.5]))
    assert abs(loss.value - LN2) < 1e-4


def test_discrepancy_confident_agreement():
    loss, _, _ = discrepancy_loss(np.array([0.99]), np.array([0.99]))
    h = -(0.99 * np.log(0.99) + 0.01 * np.log(0.01))
    assert abs(loss.value - h) < 1e-4
    assert abs(loss.value - 0.0560) < 5e-4


def test_discrepancy_l1_identical_is_zero(rng):
    p = rng.uniform(0.1, 0.9, size=5)
    loss, da, db = discrepancy_loss(p, p.copy(), metric="l1")
    assert loss.value == 0.0


def test_discrepancy_unknown_metric():
    with pytest.raises(ContractError):
        discrepancy_loss(np.array([0.5]), np.array([0.5]), metric="l2")


def test_discrepancy_length_mismatch():
    with pytest.raises(ContractError):
        discrepancy_loss(np.array([0.5, 0.5]), np.array([0.5]))


def test_discrepancy_gradients_match_fd(rng):
    p1 = rng.uniform(0.2, 0.8, size=(4, 1))
    p2 = rng.uniform(0.2, 0.8, size=(4, 1))
    _, d1, d2 = discrepancy_loss(p1, p2)
    f = lambda: discrepancy_loss(p1, p2)[0].value
    assert np.allclose(d1, fd(f, p1), rtol=1e-4, atol=1e-8)
    assert np.allclose(d2, fd(f, p2), rtol=1e-4, atol=1e-8)


def test_discrepancy_symmetric(rng):
    p1 = rng.uniform(0.1, 0.9, size=5)
    p2 = rng.uniform(0.1, 0.9, size=5)
    a, _, _ = discrepancy_loss(p1, p2)
    b, _, _ = discrepancy_loss(p2, p1)
    assert np.isclose(a.value, b.value)


# --- phase-3 head objectives -----------------------------------------------------

def test_phase3_head_losses_are_sums():
    l1, l2 = classifier_losses_phase3(LossValue(0.3, "L_t1"), LossValue(0.7, "L_t2"),
                                      LossValue(0.2, "L_dis"))
    assert np.isclose(l1.value, 0.5) and np.isclose(l2.value, 0.9)


def test_phase3_zero_discrepancy_reduces_to_task_loss():
    l1, l2 = classifier_losses_phase3(LossValue(0.3, "a"), LossValue(0.7, "b"),
                                      LossValue(0.0, "d"))
    assert l1.value == 0.3 and l2.value == 0.7
