import numpy as np
import pytest

from rcerm.augment import (
    attention_weights,
    augment,
    augment_batch,
    gate_fuse,
    gate_fuse_set,
    positive_representative,
)
from rcerm.exceptions import DegenerateEmbeddingError, DimensionError, EmptyPoolError
from rcerm.networks import LinearLayer, init_linear
from rcerm.queues import PoolView
from rcerm.tensor import Tensor, constant, l2_normalize_rows


def linear(weight, bias=None, grad=False):
    w = np.asarray(weight, dtype=np.float64)
    b = np.zeros(w.shape[0]) if bias is None else np.asarray(bias, dtype=np.float64)
    return LinearLayer(weight=Tensor(w, requires_grad=grad),
                       bias=Tensor(b, requires_grad=grad))


def identity_layer(d):
    return linear(np.eye(d))


def zero_layer(out_dim, in_dim):
    return linear(np.zeros((out_dim, in_dim)))


def rand_layers(rng, d):
    gate = init_linear(rng, d, 2 * d)
    phi1 = init_linear(rng, d, d)
    phi2 = init_linear(rng, d, 2 * d)
    phi3 = init_linear(rng, d, d)
    return gate, phi1, phi2, phi3


def pool_view(rows):
    rows = np.asarray(rows, dtype=np.float64)
    return PoolView(rows=rows, provenance=[(0, 1)] * rows.shape[0])


# ---------------------------------------------------------------------------
# gate fusion


def test_gate_fuse_zero_params_is_mean_of_tanhs(rng):
    d = 4
    q = rng.standard_normal(d)
    k = rng.standard_normal(d)
    out = gate_fuse(constant(q), constant(k), zero_layer(d, 2 * d))
    assert np.allclose(out.data, 0.5 * (np.tanh(q) + np.tanh(k)), atol=1e-15)


def test_gate_fuse_hand_value():
    out = gate_fuse(constant(np.zeros(2)), constant(np.array([1.0, -1.0])),
                    zero_layer(2, 4))
    assert out.data == pytest.approx([0.380797, -0.380797], abs=5e-7)
    assert out.data[0] == pytest.approx(0.5 * np.tanh(1.0), abs=1e-15)


def test_gate_fuse_forced_open_ignores_teacher(rng):
    d = 3
    q = rng.standard_normal(d)
    for k in (rng.standard_normal(d), rng.standard_normal(d) * 10):
        out = gate_fuse(constant(q), constant(k), zero_layer(d, 2 * d),
                        z_override=np.ones(d))
        assert np.allclose(out.data, np.tanh(q), atol=1e-15)


def test_gate_fuse_rejects_mismatched_dims(rng):
    with pytest.raises(DimensionError):
        gate_fuse(constant(np.ones(3)), constant(np.ones(4)), zero_layer(3, 6))


def test_gate_values_stay_in_open_interval(rng):
    # float64 sigmoid saturates past |logit| ~ 37; stay below that.
    d = 6
    gate = init_linear(rng, d, 2 * d)
    gate.weight.data *= 4
    q = rng.standard_normal(d) * 3
    k = rng.standard_normal(d) * 3
    from rcerm.tensor import concat_last, sigmoid

    logits = gate(concat_last(constant(q), constant(k))).data
    assert np.all(np.abs(logits) < 36)
    z = sigmoid(gate(concat_last(constant(q), constant(k)))).data
    assert np.all(z > 0.0) and np.all(z < 1.0)


def test_gate_fuse_set_matches_per_pair(rng):
    d = 5
    gate = init_linear(rng, d, 2 * d)
    q = rng.standard_normal(d)
    pool = rng.standard_normal((7, d))
    batched = gate_fuse_set(constant(q), constant(pool), gate).data
    for i in range(7):
        single = gate_fuse(constant(q), constant(pool[i]), gate).data
        assert np.allclose(batched[i], single, rtol=1e-12, atol=1e-14)


# ---------------------------------------------------------------------------
# attention


def test_attention_identical_representatives_split_evenly(rng):
    d = 4
    phi1 = init_linear(rng, d, d)
    rep = rng.standard_normal(d)
    w = attention_weights(constant(rng.standard_normal(d)),
                          constant(np.stack([rep, rep])), phi1)
    assert np.allclose(w.data, [0.5, 0.5], atol=1e-12)


def test_attention_hand_value_with_identity_projection():
    w = attention_weights(constant(np.array([1.0, 0.0])),
                          constant(np.array([[1.0, 0.0], [0.0, 1.0]])),
                          identity_layer(2))
    assert w.data == pytest.approx([0.731059, 0.268941], abs=5e-7)


def test_attention_single_representative():
    w = attention_weights(constant(np.array([1.0, 2.0])),
                          constant(np.array([[3.0, 4.0]])), identity_layer(2))
    assert np.array_equal(w.data, [1.0])


def test_attention_rejects_empty_set():
    with pytest.raises(EmptyPoolError):
        attention_weights(constant(np.ones(2)), constant(np.zeros((0, 2))),
                          identity_layer(2))


def test_attention_weights_sum_to_one(rng):
    d = 6
    phi1 = init_linear(rng, d, d)
    for n in (1, 2, 9):
        w = attention_weights(constant(rng.standard_normal(d)),
                              constant(rng.standard_normal((n, d))), phi1).data
        assert abs(w.sum() - 1.0) <= 1e-12
        assert np.all(w >= 0)


# ---------------------------------------------------------------------------
# positive representative


def test_representative_midpoint():
    reps = constant(np.array([[1.0, 0.0], [0.0, 1.0]]))
    p = positive_representative(constant(np.array([0.5, 0.5])), reps, identity_layer(2))
    assert np.allclose(p.data, [0.5, 0.5], atol=1e-15)


def test_representative_selects_with_one_hot():
    reps = constant(np.array([[1.0, 2.0], [3.0, 4.0]]))
    p = positive_representative(constant(np.array([1.0, 0.0])), reps, identity_layer(2))
    assert np.allclose(p.data, [1.0, 2.0], atol=1e-15)


def test_representative_matches_loop_oracle(rng):
    d, n = 3, 4
    phi1 = init_linear(rng, d, d)
    reps = rng.standard_normal((n, d))
    w = rng.uniform(0.1, 1.0, n)
    w /= w.sum()
    p = positive_representative(constant(w), constant(reps), phi1).data
    expected = np.zeros(d)
    for i in range(n):
        expected += w[i] * (phi1.weight.data @ reps[i] + phi1.bias.data)
    assert np.allclose(p, expected, atol=1e-12)


def test_representative_rejects_length_mismatch(rng):
    with pytest.raises(DimensionError):
        positive_representative(constant(np.array([1.0])),
                                constant(np.ones((2, 3))), identity_layer(3))


# ---------------------------------------------------------------------------
# augmentation head


def test_augment_zero_residual_returns_relu_of_query(rng):
    d = 4
    q = rng.standard_normal(d)
    p = rng.standard_normal(d)
    out = augment(constant(q), constant(p), identity_layer(d),
                  zero_layer(d, 2 * d), zero_layer(d, d))
    assert np.allclose(out.data, np.maximum(q, 0.0), atol=1e-15)


def test_augment_all_negative_query_collapses_then_normalize_raises():
    d = 3
    q = np.array([-1.0, -2.0, -0.5])
    out = augment(constant(q), constant(np.ones(d)), identity_layer(d),
                  zero_layer(d, 2 * d), zero_layer(d, d))
    assert np.array_equal(out.data, np.zeros(d))
    with pytest.raises(DegenerateEmbeddingError):
        l2_normalize_rows(out)


def scalar_augment(q, p, phi1, phi2, phi3):
    """Straight-line scalar transcription of the augmentation formula."""

    def affine(layer, v):
        w, b = layer.weight.data, layer.bias.data
        return [sum(w[i][j] * v[j] for j in range(len(v))) + b[i]
                for i in range(w.shape[0])]

    def vrelu(v):
        return [x if x > 0.0 else 0.0 for x in v]

    inner = affine(phi2, list(affine(phi1, list(q))) + list(p))
    residual = affine(phi3, vrelu(inner))
    return vrelu([qi + ri for qi, ri in zip(q, residual)])


def test_augment_matches_scalar_interpreter_50_instances():
    rng = np.random.default_rng(42)
    d = 4
    for _ in range(50):
        _, phi1, phi2, phi3 = rand_layers(rng, d)
        phi1.bias.data[:] = rng.standard_normal(d)
        phi2.bias.data[:] = rng.standard_normal(d)
        phi3.bias.data[:] = rng.standard_normal(d)
        q = rng.standard_normal(d)
        p = rng.standard_normal(d)
        ours = augment(constant(q), constant(p), phi1, phi2, phi3).data
        oracle = scalar_augment(q, p, phi1, phi2, phi3)
        assert np.allclose(ours, oracle, rtol=1e-12, atol=1e-12)


# ---------------------------------------------------------------------------
# batched generation


def test_batch_rcermng_with_trivial_heads_is_normalized_relu(rng):
    d = 4
    q = np.abs(rng.standard_normal((3, d))) + 0.1
    out = augment_batch(constant(q), pool_view(rng.standard_normal((5, d))),
                        zero_layer(d, 2 * d), identity_layer(d),
                        zero_layer(d, 2 * d), zero_layer(d, d), mode="rcermng")
    expected = np.maximum(q, 0.0)
    expected /= np.linalg.norm(expected, axis=1, keepdims=True)
    assert np.allclose(out.k.data, expected, atol=1e-14)


def test_batch_single_pool_row_gate_forced_open(rng):
    d = 4
    gate, phi1, phi2, phi3 = rand_layers(rng, d)
    q = rng.standard_normal((2, d)) + 1.0
    out = augment_batch(constant(q), pool_view(rng.standard_normal((1, d))),
                        gate, phi1, phi2, phi3, mode="rcerm",
                        z_override=np.ones(d))
    assert np.all(np.isfinite(out.k.data))
    norms = np.linalg.norm(out.k.data, axis=1)
    assert np.allclose(norms, 1.0, atol=1e-12)


def test_batch_rows_independent(rng):
    d = 5
    gate, phi1, phi2, phi3 = rand_layers(rng, d)
    pool = pool_view(rng.standard_normal((6, d)))
    q = rng.standard_normal((2, d)) + 0.5
    for mode in ("rcerm", "rcermng"):
        full = augment_batch(constant(q), pool, gate, phi1, phi2, phi3, mode=mode)
        for i in range(2):
            single = augment_batch(constant(q[i:i + 1]), pool, gate, phi1, phi2,
                                   phi3, mode=mode)
            assert np.allclose(full.k.data[i], single.k.data[0],
                               rtol=1e-12, atol=1e-14), mode


def test_batch_matches_per_row_composition_of_public_ops(rng):
    d = 4
    gate, phi1, phi2, phi3 = rand_layers(rng, d)
    pool = rng.standard_normal((5, d))
    q = rng.standard_normal((3, d)) + 0.5
    out = augment_batch(constant(q), pool_view(pool), gate, phi1, phi2, phi3,
                        mode="rcerm").k.data
    for i in range(3):
        qi = constant(q[i])
        refined = gate_fuse_set(qi, constant(pool), gate)
        w = attention_weights(qi, refined, phi1)
        p = positive_representative(w, refined, phi1)
        k_raw = augment(qi, p, phi1, phi2, phi3)
        expected = l2_normalize_rows(k_raw).data
        assert np.allclose(out[i], expected, rtol=1e-12, atol=1e-14)


def test_rcermng_bitwise_independent_of_gate_params(rng):
    d = 4
    _, phi1, phi2, phi3 = rand_layers(rng, d)
    pool = pool_view(rng.standard_normal((4, d)))
    q = constant(rng.standard_normal((2, d)) + 0.3)
    gate_a = init_linear(rng, d, 2 * d)
    gate_b = init_linear(rng, d, 2 * d)
    gate_b.weight.data *= -3.7
    out_a = augment_batch(q, pool, gate_a, phi1, phi2, phi3, mode="rcermng")
    out_b = augment_batch(q, pool, gate_b, phi1, phi2, phi3, mode="rcermng")
    assert out_a.k.data.tobytes() == out_b.k.data.tobytes()


def test_batch_rejects_empty_pool(rng):
    d = 3
    gate, phi1, phi2, phi3 = rand_layers(rng, d)
    with pytest.raises(EmptyPoolError):
        augment_batch(constant(rng.standard_normal((2, d))),
                      pool_view(np.zeros((0, d))), gate, phi1, phi2, phi3)


def test_detach_full_cuts_the_tape(rng):
    d = 4
    rng2 = np.random.default_rng(3)
    gate = init_linear(rng2, d, 2 * d)
    phi1 = init_linear(rng2, d, d)
    phi2 = init_linear(rng2, d, 2 * d)
    phi3 = init_linear(rng2, d, d)
    q = Tensor(rng.standard_normal((2, d)) + 0.5, requires_grad=True)
    pool = pool_view(rng.standard_normal((3, d)))
    attached = augment_batch(q, pool, gate, phi1, phi2, phi3,
                             grad_routing="grad_through_augmenter")
    detached = augment_batch(q, pool, gate, phi1, phi2, phi3,
                             grad_routing="detach_full")
    assert attached.k.grad_enabled and not attached.detached
    assert not detached.k.grad_enabled and detached.detached
    assert np.allclose(attached.k.data, detached.k.data, atol=0)


def test_outputs_non_negative_and_unit_norm(rng):
    d = 6
    gate, phi1, phi2, phi3 = rand_layers(rng, d)
    q = constant(rng.standard_normal((4, d)) + 0.8)
    pool = pool_view(rng.standard_normal((7, d)))
    for mode in ("rcerm", "rcermng"):
        out = augment_batch(q, pool, gate, phi1, phi2, phi3, mode=mode).k.data
        assert np.all(out >= 0.0)
        assert np.allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-12)
