"""Positive generation: gated fusion of teacher representatives, attention
over the refined set, and the residual augmentation head.

Pool rows always enter as detached constants, so gradients can only flow
through the query embedding and (in ``grad_through_augmenter`` routing)
the gate/attention parameters. ``detach_full`` routing additionally cuts
the produced positive from the tape.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import DimensionError, EmptyPoolError
from .networks import LinearLayer
from .queues import PoolView
from .tensor import (
    Tensor,
    add,
    broadcast_rows,
    concat_last,
    constant,
    hadamard,
    l2_normalize_rows,
    matmul,
    mul,
    relu,
    repeat_each_row,
    reshape,
    sigmoid,
    softmax_last,
    sub,
    sum_last,
    sum_row_blocks,
    tanh,
    transpose,
)

GRAD_ROUTING_MODES = ("grad_through_augmenter", "detach_full")
AUGMENT_MODES = ("rcerm", "rcermng")


@dataclass
class AugmentedPositive:
    """Unit-norm generated positives, one row per query."""

    k: Tensor
    detached: bool


def _gate_z(q_rows: Tensor, k_rows: Tensor, gate: LinearLayer,
            z_override: np.ndarray | None) -> Tensor:
    if z_override is not None:
        return constant(np.broadcast_to(np.asarray(z_override, dtype=np.float64),
                                        q_rows.shape).copy())
    return sigmoid(gate(concat_last(q_rows, k_rows)))


def gate_fuse(q: Tensor, k_raw: Tensor, gate: LinearLayer,
              z_override: np.ndarray | None = None) -> Tensor:
    """Blend one query/representative pair through the learned gate.

    ``z_override`` is a test hook that bypasses the gate network.
    """
    if q.ndim != 1 or k_raw.ndim != 1 or q.shape != k_raw.shape:
        raise DimensionError(f"gate_fuse needs equal-length vectors, got {q.shape} and {k_raw.shape}")
    z = _gate_z(q, k_raw, gate, z_override)
    one_minus_z = sub(constant(np.ones(q.shape)), z)
    return add(hadamard(z, tanh(q)), hadamard(one_minus_z, tanh(k_raw)))


def gate_fuse_set(q: Tensor, pool_rows: Tensor, gate: LinearLayer,
                  z_override: np.ndarray | None = None) -> Tensor:
    """Refine every pool row against one query vector; returns [R, D]."""
    if q.ndim != 1:
        raise DimensionError(f"gate_fuse_set needs a 1-D query, got {q.shape}")
    if pool_rows.ndim != 2 or pool_rows.shape[1] != q.shape[0]:
        raise DimensionError(f"gate_fuse_set: pool {pool_rows.shape} incompatible with query {q.shape}")
    n = pool_rows.shape[0]
    q_rows = broadcast_rows(q, n)
    z = _gate_z(q_rows, pool_rows, gate, z_override)
    one_minus_z = sub(constant(np.ones(z.shape)), z)
    return add(hadamard(z, tanh(q_rows)), hadamard(one_minus_z, tanh(pool_rows)))


def attention_weights(q: Tensor, refined: Tensor, phi1: LinearLayer) -> Tensor:
    """Softmax-normalized scores of the query against each refined row."""
    if refined.ndim != 2:
        raise DimensionError(f"attention_weights needs a 2-D refined set, got {refined.shape}")
    if refined.shape[0] < 1:
        raise EmptyPoolError("attention over an empty representative set")
    if q.ndim != 1 or q.shape[0] != refined.shape[1]:
        raise DimensionError(f"attention_weights: query {q.shape} incompatible with {refined.shape}")
    a = phi1(q)
    b = phi1(refined)
    scores = reshape(matmul(b, reshape(a, (a.shape[0], 1))), (refined.shape[0],))
    return softmax_last(scores)


def positive_representative(weights: Tensor, refined: Tensor, phi1: LinearLayer) -> Tensor:
    """Attention-weighted combination of the projected refined rows."""
    if weights.ndim != 1 or refined.ndim != 2 or weights.shape[0] != refined.shape[0]:
        raise DimensionError(
            f"positive_representative: weights {weights.shape} vs refined {refined.shape}")
    total = float(weights.data.sum())
    if abs(total - 1.0) > 1e-9:
        raise DimensionError(f"weights must sum to 1 (got {total!r})")
    b = phi1(refined)
    p = matmul(reshape(weights, (1, weights.shape[0])), b)
    return reshape(p, (refined.shape[1],))


def augment(q: Tensor, p: Tensor, phi1: LinearLayer, phi2: LinearLayer,
            phi3: LinearLayer) -> Tensor:
    """Residual augmentation head; returns the raw (pre-normalization) positive."""
    if q.ndim != 1 or p.ndim != 1 or q.shape != p.shape:
        raise DimensionError(f"augment needs equal-length vectors, got {q.shape} and {p.shape}")
    fused = phi2(concat_last(phi1(q), p))
    return relu(add(q, phi3(relu(fused))))


def augment_batch(q_batch: Tensor, pos_pool: PoolView, gate: LinearLayer,
                  phi1: LinearLayer, phi2: LinearLayer, phi3: LinearLayer,
                  mode: str = "rcerm", grad_routing: str = "grad_through_augmenter",
                  z_override: np.ndarray | None = None) -> AugmentedPositive:
    """Generate one unit-norm positive per query row from the positive pool.

    ``rcerm`` refines pool rows through the gate before attention;
    ``rcermng`` attends over the raw pool rows unchanged. All query rows
    are processed in one vectorized pass; each row's result equals the
    per-row composition of the single-query operations above.
    """
    if mode not in AUGMENT_MODES:
        raise DimensionError(f"unknown augment mode {mode!r}")
    if grad_routing not in GRAD_ROUTING_MODES:
        raise DimensionError(f"unknown grad routing {grad_routing!r}")
    if q_batch.ndim != 2:
        raise DimensionError(f"augment_batch needs a 2-D query batch, got {q_batch.shape}")
    if len(pos_pool) == 0:
        raise EmptyPoolError("positive pool is empty")
    if pos_pool.rows.shape[1] != q_batch.shape[1]:
        raise DimensionError(
            f"pool width {pos_pool.rows.shape[1]} != query width {q_batch.shape[1]}")

    b = q_batch.shape[0]
    n_pool = pos_pool.rows.shape[0]
    a_proj = phi1(q_batch)  # [B, D]
    if mode == "rcerm":
        # Per query row, refine every pool row through the gate; rows of the
        # [B*R, D] blocks belong to query i at block i.
        q_rep = repeat_each_row(q_batch, n_pool)
        pool_rep = constant(np.tile(pos_pool.rows, (b, 1)))
        z = _gate_z(q_rep, pool_rep, gate, z_override)
        one_minus_z = sub(constant(np.ones(z.shape)), z)
        refined = add(hadamard(z, tanh(q_rep)), hadamard(one_minus_z, tanh(pool_rep)))
        b_proj = phi1(refined)  # [B*R, D]
        scores = reshape(sum_last(mul(repeat_each_row(a_proj, n_pool), b_proj)),
                         (b, n_pool))
        w = softmax_last(scores)  # [B, R]
        p = sum_row_blocks(mul(b_proj, reshape(w, (b * n_pool, 1))), n_pool)  # [B, D]
    else:
        # Raw pool rows are shared by every query, so one projection serves all.
        b_proj = phi1(constant(pos_pool.rows))  # [R, D]
        w = softmax_last(matmul(a_proj, transpose(b_proj)))  # [B, R]
        p = matmul(w, b_proj)  # [B, D]

    fused = phi2(concat_last(a_proj, p))
    k_raw = relu(add(q_batch, phi3(relu(fused))))
    k = l2_normalize_rows(k_raw)
    if grad_routing == "detach_full":
        return AugmentedPositive(k=k.detach(), detached=True)
    return AugmentedPositive(k=k, detached=False)
