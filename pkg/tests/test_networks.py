import numpy as np
import pytest

from rcerm.exceptions import ConfigError, DimensionError
from rcerm.networks import classify, ema_update, encode, init_bundle
from rcerm.tensor import Tensor, backward, constant, softmax_last, sum_all, tanh


def small_bundle(seed=0, **overrides):
    kwargs = dict(input_dim=12, n_classes=3, embed_dim=6, hidden_dims=(8, 8),
                  mu=0.9, lam=0.5, tau=0.1, seed=seed)
    kwargs.update(overrides)
    return init_bundle(**kwargs)


def teacher_equals_student(bundle):
    return all(
        np.array_equal(t.weight.data, s.weight.data)
        and np.array_equal(t.bias.data, s.bias.data)
        for t, s in zip(bundle.key_encoder.layers, bundle.query_encoder.layers))


# ---------------------------------------------------------------------------
# init


def test_teacher_initialized_as_exact_copy():
    assert teacher_equals_student(small_bundle())


def test_same_seed_gives_identical_bundles():
    b1, b2 = small_bundle(seed=9), small_bundle(seed=9)
    for (n1, p1), (n2, p2) in zip(b1.named_parameters(), b2.named_parameters()):
        assert n1 == n2
        assert p1.data.tobytes() == p2.data.tobytes()


def test_zero_embed_dim_rejected():
    with pytest.raises(ConfigError):
        small_bundle(embed_dim=0)
    with pytest.raises(ConfigError):
        small_bundle(input_dim=0)
    with pytest.raises(ConfigError):
        small_bundle(mu=1.0)


def test_teacher_parameters_never_grad_enabled():
    bundle = small_bundle()
    for layer in bundle.key_encoder.layers:
        assert not layer.weight.grad_enabled
        assert not layer.bias.grad_enabled


# ---------------------------------------------------------------------------
# encode / classify


def test_zero_parameters_give_zero_embeddings(rng):
    bundle = small_bundle()
    for layer in bundle.query_encoder.layers:
        layer.weight.data[:] = 0.0
        layer.bias.data[:] = 0.0
    out = encode(bundle.query_encoder, constant(rng.uniform(0, 1, (4, 12))))
    assert np.array_equal(out.data, np.zeros((4, 6)))


def test_batch_row_independence(rng):
    bundle = small_bundle()
    x = rng.uniform(0, 1, (2, 12))
    full = encode(bundle.query_encoder, constant(x)).data
    single = encode(bundle.query_encoder, constant(x[:1])).data
    assert np.allclose(full[0], single[0], rtol=1e-12, atol=0)


def test_query_and_key_agree_right_after_init(rng):
    bundle = small_bundle()
    x = constant(rng.uniform(0, 1, (3, 12)))
    q = encode(bundle.query_encoder, x).data
    k = encode(bundle.key_encoder, x).data
    assert np.array_equal(q, k)


def test_encode_rejects_wrong_width(rng):
    bundle = small_bundle()
    with pytest.raises(DimensionError):
        encode(bundle.query_encoder, constant(rng.uniform(0, 1, (2, 11))))


def test_zero_classifier_gives_uniform_softmax(rng):
    bundle = small_bundle()
    bundle.classifier.weight.data[:] = 0.0
    bundle.classifier.bias.data[:] = 0.0
    logits = classify(bundle.classifier, constant(rng.standard_normal((5, 6))))
    assert np.array_equal(logits.data, np.zeros((5, 3)))
    probs = softmax_last(logits).data
    assert np.allclose(probs, 1.0 / 3.0, atol=1e-15)


def test_single_class_classifier():
    bundle = small_bundle(n_classes=1)
    logits = classify(bundle.classifier, constant(np.ones((2, 6))))
    assert logits.shape == (2, 1)


def test_permuting_batch_rows_permutes_logits(rng):
    bundle = small_bundle()
    emb = rng.standard_normal((4, 6))
    perm = np.array([2, 0, 3, 1])
    direct = classify(bundle.classifier, constant(emb)).data
    permuted = classify(bundle.classifier, constant(emb[perm])).data
    assert np.allclose(permuted, direct[perm], rtol=1e-12, atol=0)


# ---------------------------------------------------------------------------
# EMA


def test_ema_scalar_case():
    bundle = small_bundle()
    bundle.key_encoder.layers[0].weight.data[:] = 1.0
    bundle.query_encoder.layers[0].weight.data[:] = 0.0
    ema_update(bundle, 0.9)
    assert np.allclose(bundle.key_encoder.layers[0].weight.data, 0.9, atol=1e-15)


def test_ema_fixed_point_when_equal():
    bundle = small_bundle()
    before = [layer.weight.data.copy() for layer in bundle.key_encoder.layers]
    ema_update(bundle, 0.9)
    for prev, layer in zip(before, bundle.key_encoder.layers):
        assert np.allclose(layer.weight.data, prev, atol=1e-15)


def test_ema_geometric_decay_over_five_updates(rng):
    bundle = small_bundle()
    mu = 0.7
    # Push the teacher away, freeze the student, then contract five times.
    for layer in bundle.key_encoder.layers:
        layer.weight.data += rng.standard_normal(layer.weight.data.shape)
    gaps0 = [layer_t.weight.data - layer_s.weight.data
             for layer_t, layer_s in zip(bundle.key_encoder.layers,
                                         bundle.query_encoder.layers)]
    for _ in range(5):
        ema_update(bundle, mu)
    for gap0, layer_t, layer_s in zip(gaps0, bundle.key_encoder.layers,
                                      bundle.query_encoder.layers):
        gap5 = layer_t.weight.data - layer_s.weight.data
        assert np.allclose(gap5, (mu ** 5) * gap0, rtol=1e-12, atol=1e-15)


def test_ema_contraction_norm_exact(rng):
    bundle = small_bundle()
    mu = 0.93
    for layer in bundle.key_encoder.layers:
        layer.weight.data += rng.standard_normal(layer.weight.data.shape)
    before = np.sqrt(sum(
        float(np.sum((lt.weight.data - ls.weight.data) ** 2)) +
        float(np.sum((lt.bias.data - ls.bias.data) ** 2))
        for lt, ls in zip(bundle.key_encoder.layers, bundle.query_encoder.layers)))
    ema_update(bundle, mu)
    after = np.sqrt(sum(
        float(np.sum((lt.weight.data - ls.weight.data) ** 2)) +
        float(np.sum((lt.bias.data - ls.bias.data) ** 2))
        for lt, ls in zip(bundle.key_encoder.layers, bundle.query_encoder.layers)))
    assert after == pytest.approx(mu * before, abs=1e-12)


def test_ema_rejects_mu_outside_open_interval():
    bundle = small_bundle()
    for bad in (0.0, 1.0, -0.1, 1.5):
        with pytest.raises(ConfigError):
            ema_update(bundle, bad)


def test_teacher_receives_no_gradient_from_losses(rng):
    bundle = small_bundle()
    x = constant(rng.uniform(0, 1, (2, 12)))
    q = encode(bundle.query_encoder, x)
    k = encode(bundle.key_encoder, x)
    assert not k.grad_enabled
    loss = sum_all(tanh(q))
    backward(loss)
    for layer in bundle.key_encoder.layers:
        assert layer.weight.grad is None
