"""Encoders, classifier, gate/attention parameter nets, and the EMA teacher.

The student (query) encoder, classifier, gate net, and the three attention
projections are trainable tape leaves. The teacher (key) encoder holds
frozen copies of the student weights and is updated only through
:func:`ema_update`, so it can never appear on the tape.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .exceptions import ConfigError, DimensionError
from .tensor import Tensor, add, matmul, relu, reshape, transpose


@dataclass
class LinearLayer:
    """Affine map y = x Wᵀ + b with weight shape [out, in]."""

    weight: Tensor
    bias: Tensor

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim == 1:
            if x.shape[0] != self.in_dim:
                raise DimensionError(f"linear: input width {x.shape[0]} != {self.in_dim}")
            out = add(matmul(reshape(x, (1, self.in_dim)), transpose(self.weight)), self.bias)
            return reshape(out, (self.out_dim,))
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise DimensionError(f"linear: input shape {x.shape} incompatible with width {self.in_dim}")
        return add(matmul(x, transpose(self.weight)), self.bias)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


def init_linear(rng: np.random.Generator, out_dim: int, in_dim: int,
                trainable: bool = True) -> LinearLayer:
    """Kaiming-uniform weight for relu stacks, zero bias."""
    if out_dim <= 0 or in_dim <= 0:
        raise ConfigError(f"linear dims must be positive, got ({out_dim}, {in_dim})")
    bound = np.sqrt(6.0 / in_dim)
    w = rng.uniform(-bound, bound, size=(out_dim, in_dim))
    return LinearLayer(
        weight=Tensor(w, requires_grad=trainable),
        bias=Tensor(np.zeros(out_dim), requires_grad=trainable),
    )


@dataclass
class Encoder:
    """MLP featurizer: linear layers with relu between them (none after the last)."""

    layers: list[LinearLayer]

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def embed_dim(self) -> int:
        return self.layers[-1].out_dim

    def __call__(self, batch: Tensor) -> Tensor:
        h = batch
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = relu(h)
        return h

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]


def encode(encoder: Encoder, batch: Tensor) -> Tensor:
    """Forward a [B, input_dim] batch to [B, embed_dim] embeddings."""
    if batch.ndim != 2 or batch.shape[1] != encoder.input_dim:
        raise DimensionError(
            f"encode: batch shape {batch.shape} incompatible with input width {encoder.input_dim}")
    return encoder(batch)


def classify(classifier: LinearLayer, embeddings: Tensor) -> Tensor:
    """Affine map from embeddings to class logits."""
    if embeddings.ndim != 2 or embeddings.shape[1] != classifier.in_dim:
        raise DimensionError(
            f"classify: embeddings shape {embeddings.shape} incompatible with width {classifier.in_dim}")
    return classifier(embeddings)


@dataclass
class ModelBundle:
    """All parameter groups of one training run plus its loss constants."""

    query_encoder: Encoder
    key_encoder: Encoder
    classifier: LinearLayer
    gate: LinearLayer
    phi1: LinearLayer
    phi2: LinearLayer
    phi3: LinearLayer
    mu: float
    lam: float
    tau: float
    embed_dim: int

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        for i, layer in enumerate(self.query_encoder.layers):
            out.append((f"query_encoder.{i}.weight", layer.weight))
            out.append((f"query_encoder.{i}.bias", layer.bias))
        for i, layer in enumerate(self.key_encoder.layers):
            out.append((f"key_encoder.{i}.weight", layer.weight))
            out.append((f"key_encoder.{i}.bias", layer.bias))
        for name, layer in (("classifier", self.classifier), ("gate", self.gate),
                            ("phi1", self.phi1), ("phi2", self.phi2), ("phi3", self.phi3)):
            out.append((f"{name}.weight", layer.weight))
            out.append((f"{name}.bias", layer.bias))
        return out

    def trainable_parameters(self, algorithm: str) -> list[Tensor]:
        params = self.query_encoder.parameters() + self.classifier.parameters()
        if algorithm in ("rcerm", "rcermng"):
            params += self.gate.parameters()
            params += self.phi1.parameters() + self.phi2.parameters() + self.phi3.parameters()
        return params

    def augmenter_layers(self) -> tuple[LinearLayer, LinearLayer, LinearLayer, LinearLayer]:
        return self.gate, self.phi1, self.phi2, self.phi3


def init_bundle(input_dim: int, n_classes: int, embed_dim: int = 64,
                hidden_dims: Sequence[int] = (128, 128), mu: float = 0.999,
                lam: float = 0.5, tau: float = 0.1, seed: int = 0) -> ModelBundle:
    """Build all networks from one seed; the teacher starts as an exact copy."""
    if input_dim <= 0 or n_classes <= 0 or embed_dim <= 0:
        raise ConfigError(
            f"dims must be positive: input_dim={input_dim}, n_classes={n_classes}, embed_dim={embed_dim}")
    if any(h <= 0 for h in hidden_dims):
        raise ConfigError(f"hidden dims must be positive, got {tuple(hidden_dims)}")
    if not 0.0 < mu < 1.0:
        raise ConfigError(f"mu must lie in (0,1), got {mu}")
    if tau <= 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    if lam < 0:
        raise ConfigError(f"lam must be non-negative, got {lam}")

    rng = np.random.default_rng([int(seed), 0])
    widths = [input_dim, *hidden_dims, embed_dim]
    query = Encoder([init_linear(rng, widths[i + 1], widths[i]) for i in range(len(widths) - 1)])
    key = Encoder([
        LinearLayer(weight=Tensor(layer.weight.data.copy()), bias=Tensor(layer.bias.data.copy()))
        for layer in query.layers
    ])
    classifier = init_linear(rng, n_classes, embed_dim)
    gate = init_linear(rng, embed_dim, 2 * embed_dim)
    phi1 = init_linear(rng, embed_dim, embed_dim)
    phi2 = init_linear(rng, embed_dim, 2 * embed_dim)
    phi3 = init_linear(rng, embed_dim, embed_dim)
    return ModelBundle(query_encoder=query, key_encoder=key, classifier=classifier,
                       gate=gate, phi1=phi1, phi2=phi2, phi3=phi3,
                       mu=mu, lam=lam, tau=tau, embed_dim=embed_dim)


def ema_update(bundle: ModelBundle, mu: float | None = None) -> None:
    """Teacher <- mu * teacher + (1 - mu) * student, in place and off the tape."""
    m = bundle.mu if mu is None else float(mu)
    if not 0.0 < m < 1.0:
        raise ConfigError(f"mu must lie in (0,1), got {m}")
    for t_layer, s_layer in zip(bundle.key_encoder.layers, bundle.query_encoder.layers):
        t_layer.weight.data = m * t_layer.weight.data + (1.0 - m) * s_layer.weight.data
        t_layer.bias.data = m * t_layer.bias.data + (1.0 - m) * s_layer.bias.data
