import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rcerm.exceptions import ConfigError, ContractError, EmptyPoolError
from rcerm.gradcheck import check_function
from rcerm.losses import (
    contrastive_total,
    cross_entropy_total,
    nt_xent,
    nt_xent_naive,
    nt_xent_rows,
    total_loss,
)
from rcerm.tensor import Tensor, backward, constant


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def rand_unit(rng, d):
    return unit(rng.standard_normal(d) + 0.05)


# ---------------------------------------------------------------------------
# nt_xent values


def test_nt_xent_direct_substitution():
    q = constant(np.array([1.0, 0.0]))
    negs = constant(np.array([[0.0, 1.0]]))
    assert nt_xent(q, q, negs, tau=1.0).item() == pytest.approx(-1.0, abs=1e-15)


def test_nt_xent_hand_computed_two_negatives():
    # cosine to the positive 0.8, to the negatives 0.2 and -0.4, tau=0.5:
    # loss = -1.6 + log(e^0.4 + e^-0.8) = -0.9367175326619689
    q = constant(np.array([1.0, 0.0]))
    k = constant(unit([0.8, 0.6]))
    negs = constant(np.stack([unit([0.2, np.sqrt(1 - 0.04)]),
                              unit([-0.4, np.sqrt(1 - 0.16)])]))
    expected = -1.6 + math.log(math.exp(0.4) + math.exp(-0.8))
    value = nt_xent(q, k, negs, tau=0.5).item()
    assert value == pytest.approx(expected, abs=1e-12)
    assert value == pytest.approx(-0.9367175326619689, abs=1e-12)


def test_nt_xent_invariant_under_negative_permutation(rng):
    d = 6
    q, k = rand_unit(rng, d), rand_unit(rng, d)
    negs = np.stack([rand_unit(rng, d) for _ in range(5)])
    perm = rng.permutation(5)
    a = nt_xent(constant(q), constant(k), constant(negs), tau=0.3).item()
    b = nt_xent(constant(q), constant(k), constant(negs[perm]), tau=0.3).item()
    assert a == pytest.approx(b, rel=1e-14)


def test_nt_xent_guards():
    q = constant(np.array([1.0, 0.0]))
    with pytest.raises(EmptyPoolError):
        nt_xent(q, q, constant(np.zeros((0, 2))), tau=1.0)
    with pytest.raises(ConfigError):
        nt_xent(q, q, constant(np.ones((1, 2))), tau=0.0)
    with pytest.raises(ConfigError):
        nt_xent(q, q, constant(np.ones((1, 2))), tau=-0.5)


def test_nt_xent_matches_naive_oracle_100_instances():
    rng = np.random.default_rng(11)
    for _ in range(100):
        d = int(rng.integers(2, 9))
        n = int(rng.integers(1, 17))
        q, k = rand_unit(rng, d), rand_unit(rng, d)
        negs = np.stack([rand_unit(rng, d) for _ in range(n)])
        tau = float(rng.uniform(0.05, 1.0))
        include = bool(rng.integers(0, 2))
        ours = nt_xent(constant(q), constant(k), constant(negs), tau,
                       include_positive_in_denominator=include).item()
        oracle = nt_xent_naive(q, k, negs, tau, include_positive_in_denominator=include)
        assert ours == pytest.approx(oracle, abs=1e-10)


def test_nt_xent_monotonicity(rng):
    d = 4
    k0 = rand_unit(rng, d)
    negs = np.stack([rand_unit(rng, d) for _ in range(3)])
    q = rand_unit(rng, d)
    base = nt_xent(constant(q), constant(k0), constant(negs), tau=0.2).item()
    # raising q.k strictly decreases the loss
    closer = unit(k0 + 0.2 * (q - k0))
    assert float(q @ closer) > float(q @ k0)
    assert nt_xent(constant(q), constant(closer), constant(negs), tau=0.2).item() < base
    # raising any q.n strictly increases it
    hot = negs.copy()
    hot[1] = unit(hot[1] + 0.3 * q)
    assert float(q @ hot[1]) > float(q @ negs[1])
    assert nt_xent(constant(q), constant(k0), constant(hot), tau=0.2).item() > base


def test_nt_xent_single_negative_closed_form_exact(rng):
    # With one negative the loss telescopes to (s_n - s_p) / tau; for a
    # power-of-two tau the float computation is bitwise exact.
    d = 5
    for tau in (1.0, 0.5, 0.25):
        q, k, n = rand_unit(rng, d), rand_unit(rng, d), rand_unit(rng, d)
        value = nt_xent(constant(q), constant(k), constant(n[None, :]), tau).item()
        s_p = float(q @ k)
        s_n = float(q @ n)
        assert value == (s_n - s_p) / tau


def test_nt_xent_stable_at_low_temperature(rng):
    d = 8
    q, k = rand_unit(rng, d), rand_unit(rng, d)
    negs = np.stack([rand_unit(rng, d) for _ in range(8)])
    value = nt_xent(constant(q), constant(k), constant(negs), tau=0.01).item()
    assert math.isfinite(value)


def test_nt_xent_gradient_matches_finite_differences(rng):
    d = 5
    negs = np.stack([rand_unit(rng, d) for _ in range(4)])
    err = check_function(
        lambda p: nt_xent(p[0], p[1], constant(negs), tau=0.3),
        [rand_unit(rng, d), rand_unit(rng, d)])
    assert err <= 1e-5


def test_nt_xent_rows_equals_per_row_sum(rng):
    d, b, n = 6, 4, 7
    q = np.stack([rand_unit(rng, d) for _ in range(b)])
    k = np.stack([rand_unit(rng, d) for _ in range(b)])
    negs = np.stack([rand_unit(rng, d) for _ in range(n)])
    for include in (False, True):
        batched = nt_xent_rows(constant(q), constant(k), constant(negs), 0.15,
                               include_positive_in_denominator=include).item()
        loop = sum(nt_xent(constant(q[i]), constant(k[i]), constant(negs), 0.15,
                           include_positive_in_denominator=include).item()
                   for i in range(b))
        assert batched == pytest.approx(loop, rel=1e-12)


def test_include_positive_flag_increases_denominator(rng):
    d = 4
    q, k = rand_unit(rng, d), rand_unit(rng, d)
    negs = np.stack([rand_unit(rng, d) for _ in range(3)])
    off = nt_xent(constant(q), constant(k), constant(negs), 0.2).item()
    on = nt_xent(constant(q), constant(k), constant(negs), 0.2,
                 include_positive_in_denominator=True).item()
    assert on > off


# ---------------------------------------------------------------------------
# aggregation


def test_contrastive_total_sums():
    parts = [constant(np.asarray(-1.0)), constant(np.asarray(-1.0))]
    assert contrastive_total(parts).item() == -2.0


def test_contrastive_total_empty_is_zero():
    out = contrastive_total([])
    assert out.item() == 0.0
    assert not out.grad_enabled


def test_contrastive_total_reorder_invariant(rng):
    values = [constant(np.asarray(float(v))) for v in rng.standard_normal(6)]
    a = contrastive_total(values).item()
    b = contrastive_total(list(reversed(values))).item()
    assert a == pytest.approx(b, rel=1e-15)


# ---------------------------------------------------------------------------
# cross entropy


def test_cross_entropy_uniform_logits_is_log_n_classes():
    logits = constant(np.zeros((3, 7)))
    value = cross_entropy_total(logits, [0, 3, 6]).item()
    assert value == pytest.approx(math.log(7.0), abs=1e-12)
    assert value == pytest.approx(1.945910, abs=5e-7)


def test_cross_entropy_saturated_correct_logit_is_zero():
    logits = np.zeros((2, 4))
    logits[0, 1] = 1000.0
    logits[1, 2] = 1000.0
    value = cross_entropy_total(constant(logits), [1, 2]).item()
    assert abs(value) <= 1e-9


def test_cross_entropy_rejects_out_of_range_label():
    with pytest.raises(IndexError):
        cross_entropy_total(constant(np.zeros((2, 3))), [0, 3])
    with pytest.raises(ContractError):
        cross_entropy_total(constant(np.zeros((0, 3))), [])


def test_cross_entropy_gradient(rng):
    labels = np.array([2, 0, 3])
    err = check_function(lambda p: cross_entropy_total(p[0], labels),
                         [rng.standard_normal((3, 4))])
    assert err <= 1e-5


# ---------------------------------------------------------------------------
# total loss


def test_total_loss_substitution():
    out = total_loss(constant(np.asarray(2.0)), constant(np.asarray(-1.0)), lam=0.5)
    assert out.item() == 1.5


def test_total_loss_degenerate_contrastive():
    out = total_loss(constant(np.asarray(0.73)), constant(np.asarray(0.0)), lam=0.9)
    assert out.item() == 0.73


def test_total_loss_linear_in_lam():
    l_ce, l_cl = 1.25, -0.5
    values = [total_loss(constant(np.asarray(l_ce)), constant(np.asarray(l_cl)), lam).item()
              for lam in (0.25, 0.5, 1.0)]
    assert values == [l_ce + lam * l_cl for lam in (0.25, 0.5, 1.0)]


def test_total_loss_rejects_non_positive_lam():
    with pytest.raises(ConfigError):
        total_loss(constant(np.asarray(1.0)), constant(np.asarray(1.0)), lam=0.0)
    with pytest.raises(ConfigError):
        total_loss(constant(np.asarray(1.0)), constant(np.asarray(1.0)), lam=-1.0)


@given(st.floats(0.05, 2.0), st.floats(-5, 5), st.floats(0, 5))
def test_total_loss_exact_affine(lam, l_cl, l_ce):
    out = total_loss(constant(np.asarray(l_ce)), constant(np.asarray(l_cl)), lam).item()
    assert out == l_ce + lam * l_cl
