"""Central finite-difference verification of tape gradients.

Every primitive is checked at random points against (f(x+h) - f(x-h)) / 2h,
and the full contrastive update-step loss is checked end to end on a
2-class / 2-domain micro model. The numeric side never touches the tape.
"""
from __future__ import annotations

import copy
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .networks import init_bundle
from .queues import QueueStore
from .tensor import Tensor, backward, constant
from .trainer import TrainConfig, forward_losses


def finite_difference(f: Callable[[], float], arrays: Sequence[np.ndarray],
                      h: float = 1e-5) -> list[np.ndarray]:
    """Central-difference gradient of a scalar function of the given arrays."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gf = a.ravel(), g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            gf[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def max_rel_err(analytic: Sequence[np.ndarray], numeric: Sequence[np.ndarray]) -> float:
    """Largest deviation, scaled by the largest gradient magnitude seen."""
    diff = 0.0
    scale = 1e-8
    for a, n in zip(analytic, numeric):
        diff = max(diff, float(np.abs(a - n).max()) if a.size else 0.0)
        if a.size:
            scale = max(scale, float(np.abs(a).max()), float(np.abs(n).max()))
    return diff / scale


def check_function(build: Callable[[list[Tensor]], Tensor],
                   arrays: Sequence[np.ndarray], h: float = 1e-5) -> float:
    """Compare tape gradients of sum(weights * build(arrays)) with differences."""
    rng = np.random.default_rng(abs(hash(tuple(a.shape for a in arrays))) % (2**32))
    params = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(params)
    weights = rng.standard_normal(out.shape) if out.ndim else np.asarray(1.0)
    loss = T.sum_all(T.mul(out, constant(weights)))
    backward(loss)
    analytic = [p.grad.copy() for p in params]

    work = [a.copy() for a in arrays]

    def f() -> float:
        value = build([Tensor(a) for a in work])
        return float(np.sum(value.data * weights))

    numeric = finite_difference(f, work, h=h)
    return max_rel_err(analytic, numeric)


# ---------------------------------------------------------------------------
# the battery


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return x + np.sign(x) * margin


def primitive_checks(seed: int = 0, points_per_op: int = 100,
                     h: float = 1e-5) -> list[tuple[str, float]]:
    """(name, max relative error) for every differentiable primitive."""
    rng = np.random.default_rng(seed)
    results: list[tuple[str, float]] = []

    def run(name: str, n_inputs_builder) -> None:
        worst = 0.0
        for _ in range(points_per_op):
            arrays, build = n_inputs_builder()
            worst = max(worst, check_function(build, arrays, h=h))
        results.append((name, worst))

    run("matmul", lambda: ([rng.standard_normal((3, 4)), rng.standard_normal((4, 2))],
                           lambda p: T.matmul(p[0], p[1])))
    run("transpose", lambda: ([rng.standard_normal((3, 4))],
                              lambda p: T.transpose(p[0])))
    run("add", lambda: ([rng.standard_normal((3, 4)), rng.standard_normal((3, 4))],
                        lambda p: T.add(p[0], p[1])))
    run("add_broadcast", lambda: ([rng.standard_normal((3, 4)), rng.standard_normal(4)],
                                  lambda p: T.add(p[0], p[1])))
    run("hadamard", lambda: ([rng.standard_normal(8), rng.standard_normal(8)],
                             lambda p: T.hadamard(p[0], p[1])))
    run("neg", lambda: ([rng.standard_normal(6)], lambda p: T.neg(p[0])))
    run("scale", lambda: ([rng.standard_normal(6)], lambda p: T.scale(p[0], 1.7)))
    run("div_scalar", lambda: ([rng.standard_normal(6)], lambda p: T.div_scalar(p[0], 0.3)))
    run("add_scalar", lambda: ([rng.standard_normal(6)], lambda p: T.add_scalar(p[0], -2.5)))
    run("sigmoid", lambda: ([rng.standard_normal(6)], lambda p: T.sigmoid(p[0])))
    run("tanh", lambda: ([rng.standard_normal(6)], lambda p: T.tanh(p[0])))
    run("relu", lambda: ([_away_from_zero(rng, 6)], lambda p: T.relu(p[0])))
    run("exp", lambda: ([rng.standard_normal(6)], lambda p: T.exp(p[0])))
    run("log", lambda: ([rng.uniform(0.2, 3.0, 6)], lambda p: T.log(p[0])))
    run("concat_last", lambda: ([rng.standard_normal((2, 3)), rng.standard_normal((2, 2))],
                                lambda p: T.concat_last(p[0], p[1])))
    run("concat_rows", lambda: ([rng.standard_normal((2, 3)), rng.standard_normal((3, 3))],
                                lambda p: T.concat_rows(p)))
    run("stack_rows", lambda: ([rng.standard_normal(4), rng.standard_normal(4)],
                               lambda p: T.stack_rows(p)))
    run("row", lambda: ([rng.standard_normal((3, 4))], lambda p: T.row(p[0], 1)))
    run("broadcast_rows", lambda: ([rng.standard_normal(4)],
                                   lambda p: T.broadcast_rows(p[0], 3)))
    run("repeat_each_row", lambda: ([rng.standard_normal((2, 3))],
                                    lambda p: T.repeat_each_row(p[0], 3)))
    run("sum_row_blocks", lambda: ([rng.standard_normal((6, 3))],
                                   lambda p: T.sum_row_blocks(p[0], 2)))
    run("reshape", lambda: ([rng.standard_normal((2, 6))],
                            lambda p: T.reshape(p[0], (3, 4))))
    run("softmax_last", lambda: ([rng.standard_normal((2, 5))],
                                 lambda p: T.softmax_last(p[0])))
    run("l2_normalize_rows", lambda: ([_away_from_zero(rng, (3, 4), margin=0.3)],
                                      lambda p: T.l2_normalize_rows(p[0])))
    run("dot", lambda: ([rng.standard_normal(5), rng.standard_normal(5)],
                        lambda p: T.dot(p[0], p[1])))
    run("sum_all", lambda: ([rng.standard_normal((2, 3))], lambda p: T.sum_all(p[0])))
    run("sum_last", lambda: ([rng.standard_normal((2, 3))], lambda p: T.sum_last(p[0])))

    idx = np.array([1, 0, 2])
    run("take_per_row", lambda: ([rng.standard_normal((3, 4))],
                                 lambda p: T.take_per_row(p[0], idx)))
    return results


# ---------------------------------------------------------------------------
# end-to-end micro model


def micro_config(grad_routing: str = "grad_through_augmenter") -> TrainConfig:
    return TrainConfig(algorithm="rcerm", steps=1, batch_per_cell=2, n_classes=2,
                       n_domains=2, embed_dim=8, hidden_dims=(8, 8), queue_sz=4,
                       tau=0.2, lam=0.7, mu=0.9, lr=1e-3, seed=3,
                       grad_routing=grad_routing, eval_every=1,
                       holdout_domain=1, small_frac=0.5)


def _micro_world(config: TrainConfig, seed: int = 3):
    rng = np.random.default_rng(seed)
    input_dim = 16
    bundle = init_bundle(input_dim=input_dim, n_classes=config.n_classes,
                         embed_dim=config.embed_dim, hidden_dims=config.hidden_dims,
                         mu=config.mu, lam=config.lam, tau=config.tau, seed=config.seed)
    store = QueueStore(config.n_classes, config.n_domains, config.queue_sz,
                       config.embed_dim)
    for c in range(config.n_classes):
        for d in range(config.n_domains):
            raw = rng.standard_normal((3, config.embed_dim))
            store.enqueue_dequeue(c, d, raw / np.linalg.norm(raw, axis=1, keepdims=True))
    batch = {(c, d): rng.uniform(0.0, 1.0, size=(config.batch_per_cell, input_dim))
             for c in range(config.n_classes) for d in range(config.n_domains)}
    return bundle, store, batch


def end_to_end_check(grad_routing: str = "grad_through_augmenter",
                     h: float = 1e-5, seed: int = 3) -> float:
    """Finite-difference check of the full update-step loss on the micro model.

    ``detach_full`` stops gradients at the generated positives, so its
    oracle differentiates the loss with the positives frozen at their
    unperturbed values; ``grad_through_augmenter`` uses the raw loss.
    """
    config = micro_config(grad_routing)
    bundle, store, batch = _micro_world(config, seed=seed)
    # Both domains participate so every positive pool is populated.
    domains = list(range(config.n_domains))
    frozen = {} if grad_routing == "detach_full" else None

    params = bundle.trainable_parameters("rcerm")
    loss, _ = forward_losses(bundle, copy.deepcopy(store), batch, config,
                             train_domains=domains, frozen_positives=frozen)
    for p in params:
        p.zero_grad()
    backward(loss)
    analytic = [p.grad.copy() for p in params]

    def f() -> float:
        value, _ = forward_losses(bundle, copy.deepcopy(store), batch, config,
                                  train_domains=domains, frozen_positives=frozen)
        return float(value.data)

    numeric = finite_difference(f, [p.data for p in params], h=h)
    return max_rel_err(analytic, numeric)


def run_suite(seed: int = 0, points_per_op: int = 100, h: float = 1e-5,
              tolerance: float = 1e-4, verbose: bool = False) -> tuple[float, list[tuple[str, float]]]:
    """Primitive battery plus both end-to-end routings; returns (worst, details)."""
    checks = primitive_checks(seed=seed, points_per_op=points_per_op, h=h)
    checks.append(("step_loss[grad_through_augmenter]",
                   end_to_end_check("grad_through_augmenter", h=h)))
    checks.append(("step_loss[detach_full]", end_to_end_check("detach_full", h=h)))
    worst = max(err for _, err in checks)
    if verbose:
        for name, err in checks:
            status = "ok" if err <= tolerance else "FAIL"
            print(f"{status:4s} {name:40s} max_rel_err={err:.3e}")
        print(f"overall max_rel_err={worst:.3e} tolerance={tolerance:.1e}")
    return worst, checks
