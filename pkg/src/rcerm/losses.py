"""Contrastive and classification losses.

The contrastive term is a temperature-scaled cross entropy whose
denominator sums over negatives only; a config flag can add the positive
back in for comparison runs, but the negatives-only form is the default.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .exceptions import ConfigError, ContractError, EmptyPoolError
from .tensor import (
    Tensor,
    add,
    add_scalar,
    constant,
    div_scalar,
    dot,
    exp,
    log,
    matmul,
    mul,
    neg,
    reshape,
    scale,
    sub,
    sum_all,
    sum_last,
    take_per_row,
    transpose,
)


@dataclass
class LossReport:
    """Scalar loss values of one update step, plus the constants used."""

    l_cl: float
    l_ce: float
    l_total: float
    skipped_cells: int
    tau: float
    lam: float


def nt_xent(q: Tensor, k: Tensor, negatives: Tensor, tau: float,
            include_positive_in_denominator: bool = False) -> Tensor:
    """-(q.k)/tau + log sum_n exp((q.n)/tau), via max-subtracted log-sum-exp."""
    if tau <= 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    if negatives.ndim != 2:
        raise ConfigError(f"negatives must be 2-D, got shape {negatives.shape}")
    n_neg = negatives.shape[0]
    if n_neg == 0:
        raise EmptyPoolError("nt_xent needs at least one negative")
    d = q.shape[0]
    s_pos = div_scalar(dot(q, k), tau)
    s_neg = div_scalar(reshape(matmul(negatives, reshape(q, (d, 1))), (n_neg,)), tau)

    shift = float(s_neg.data.max())
    if include_positive_in_denominator:
        shift = max(shift, float(s_pos.data))
    denom = sum_all(exp(add_scalar(s_neg, -shift)))
    if include_positive_in_denominator:
        denom = add(denom, exp(add_scalar(s_pos, -shift)))
    lse = add_scalar(log(denom), shift)
    return add(neg(s_pos), lse)


def nt_xent_rows(q_rows: Tensor, k_rows: Tensor, negatives: Tensor, tau: float,
                 include_positive_in_denominator: bool = False) -> Tensor:
    """Sum of nt_xent over paired rows of ``q_rows``/``k_rows``.

    One matmul against the shared negatives replaces the per-row loop;
    the value equals the per-row accumulation up to float associativity.
    """
    if tau <= 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    if q_rows.ndim != 2 or k_rows.ndim != 2 or q_rows.shape != k_rows.shape:
        raise ConfigError(f"paired rows must share a 2-D shape, got "
                          f"{q_rows.shape} and {k_rows.shape}")
    if negatives.ndim != 2 or negatives.shape[0] == 0:
        raise EmptyPoolError("nt_xent needs at least one negative")
    b = q_rows.shape[0]
    s_pos = div_scalar(reshape(sum_last(mul(q_rows, k_rows)), (b,)), tau)  # [B]
    s_neg = div_scalar(matmul(q_rows, transpose(negatives)), tau)  # [B, N]

    shift = s_neg.data.max(axis=1, keepdims=True)
    if include_positive_in_denominator:
        shift = np.maximum(shift, s_pos.data[:, None])
    shift_col = constant(shift)
    denom = sum_last(exp(sub(s_neg, shift_col)))  # [B, 1]
    if include_positive_in_denominator:
        denom = add(denom, exp(sub(reshape(s_pos, (b, 1)), shift_col)))
    lse = reshape(add(log(denom), shift_col), (b,))
    return sum_all(sub(lse, s_pos))


def contrastive_total(per_example_losses: Sequence[Tensor]) -> Tensor:
    """Plain sum of per-example contrastive losses; empty input sums to 0."""
    if not per_example_losses:
        return constant(np.asarray(0.0))
    total = per_example_losses[0]
    for term in per_example_losses[1:]:
        total = add(total, term)
    return total


def cross_entropy_total(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label], log-sum-exp stable."""
    if logits.ndim != 2:
        raise ConfigError(f"logits must be 2-D, got shape {logits.shape}")
    b, c = logits.shape
    if b < 1:
        raise ContractError("cross entropy needs a non-empty batch")
    idx = np.asarray(labels, dtype=np.int64)
    if idx.ndim != 1 or idx.shape[0] != b:
        raise ConfigError(f"need {b} labels, got shape {tuple(idx.shape)}")
    if idx.min() < 0 or idx.max() >= c:
        bad = int(idx[(idx < 0) | (idx >= c)][0])
        raise IndexError(f"label {bad} out of range for {c} classes")

    row_max = constant(logits.data.max(axis=1, keepdims=True))
    shifted = sub(logits, row_max)
    lse = reshape(add(log(sum_last(exp(shifted))), row_max), (b,))
    true_logit = take_per_row(logits, idx)
    return div_scalar(sum_all(sub(lse, true_logit)), b)


def total_loss(l_ce: Tensor, l_cl: Tensor, lam: float) -> Tensor:
    """l_ce + lam * l_cl."""
    if lam <= 0:
        raise ConfigError(f"lam must be positive, got {lam}")
    return add(l_ce, scale(l_cl, lam))


def nt_xent_naive(q: np.ndarray, k: np.ndarray, negatives: np.ndarray, tau: float,
                  include_positive_in_denominator: bool = False) -> float:
    """Direct-summation oracle without the log-sum-exp trick."""
    s_pos = float(q @ k) / tau
    terms = [float(np.exp(float(q @ n) / tau)) for n in negatives]
    if include_positive_in_denominator:
        terms.append(float(np.exp(s_pos)))
    return -s_pos + float(np.log(sum(terms)))
