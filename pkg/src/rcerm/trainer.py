"""Training loop: structured batches, the update step, checkpoints, metrics.

One update step walks all (class, domain) cells of the training domains in
fixed order: encode the cell with the student, generate positives from the
queues, accumulate the contrastive terms, push the cell's teacher
embeddings into the queues only after its loss used the pools, then
classify everything, combine the losses, backprop, apply Adam, and finally
move the teacher by EMA.
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .augment import GRAD_ROUTING_MODES, augment_batch
from .data import DomainDataset, SplitPlan, selector_for, split
from .exceptions import ConfigError, DatasetError, FormatError
from .losses import LossReport, contrastive_total, cross_entropy_total, nt_xent_rows
from .networks import ModelBundle, classify, ema_update, encode, init_bundle
from .optim import Adam
from .queues import QueueStore
from .selection import RunRecord, accuracy
from .tensor import (
    Tensor,
    add,
    backward,
    concat_rows,
    constant,
    l2_normalize_np,
    l2_normalize_rows,
    scale,
)
from .tensor_io import load_tensor, save_tensor

ALGORITHMS = ("erm", "rcerm", "rcermng")


@dataclass
class TrainConfig:
    algorithm: str = "rcerm"
    steps: int = 2000
    batch_per_cell: int = 4
    n_classes: int = 4
    n_domains: int = 4
    embed_dim: int = 64
    hidden_dims: tuple[int, ...] = (128, 128)
    queue_sz: int = 64
    tau: float = 0.1
    lam: float = 0.5
    mu: float = 0.999
    lr: float = 1e-3
    seed: int = 0
    grad_routing: str = "grad_through_augmenter"
    eval_every: int = 100
    holdout_domain: int = 3
    exclude_domain: int | None = None
    small_frac: float = 0.2
    include_positive_in_denominator: bool = False

    def validate(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        for name in ("steps",):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("batch_per_cell", "n_classes", "n_domains", "embed_dim",
                     "queue_sz", "eval_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.lam < 0:
            raise ConfigError(f"lam must be non-negative, got {self.lam}")
        if not 0.0 < self.mu < 1.0:
            raise ConfigError(f"mu must lie in (0,1), got {self.mu}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.grad_routing not in GRAD_ROUTING_MODES:
            raise ConfigError(f"grad_routing must be one of {GRAD_ROUTING_MODES}, "
                              f"got {self.grad_routing!r}")
        if not 0 <= self.holdout_domain < self.n_domains:
            raise ConfigError(f"holdout_domain {self.holdout_domain} out of range "
                              f"[0, {self.n_domains})")
        if self.exclude_domain is not None:
            if not 0 <= self.exclude_domain < self.n_domains:
                raise ConfigError(f"exclude_domain {self.exclude_domain} out of range")
            if self.exclude_domain == self.holdout_domain:
                raise ConfigError("exclude_domain must differ from holdout_domain")
        if not 0.0 < self.small_frac < 1.0:
            raise ConfigError(f"small_frac must lie in (0,1), got {self.small_frac}")
        if any(h < 1 for h in self.hidden_dims):
            raise ConfigError(f"hidden_dims must be positive, got {self.hidden_dims}")

    def to_dict(self) -> dict:
        payload = asdict(self)
        payload["hidden_dims"] = list(self.hidden_dims)
        return payload

    @classmethod
    def from_dict(cls, payload: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(payload) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        data = dict(payload)
        if "hidden_dims" in data:
            data["hidden_dims"] = tuple(int(h) for h in data["hidden_dims"])
        cfg = cls(**data)
        cfg.validate()
        return cfg

    @property
    def train_domains(self) -> list[int]:
        skip = {self.holdout_domain}
        if self.exclude_domain is not None:
            skip.add(self.exclude_domain)
        return [d for d in range(self.n_domains) if d not in skip]

    @property
    def uses_contrastive(self) -> bool:
        return self.algorithm in ("rcerm", "rcermng")


@dataclass
class StepMetrics:
    step: int
    l_ce: float
    l_cl: float
    l_total: float
    skipped_cells: int
    wall_time: float


StructuredBatch = dict[tuple[int, int], np.ndarray]


def bundle_from_config(config: TrainConfig, input_dim: int) -> ModelBundle:
    return init_bundle(input_dim=input_dim, n_classes=config.n_classes,
                       embed_dim=config.embed_dim, hidden_dims=config.hidden_dims,
                       mu=config.mu, lam=config.lam, tau=config.tau, seed=config.seed)


def forward_losses(bundle: ModelBundle, store: QueueStore, batch: StructuredBatch,
                   config: TrainConfig,
                   train_domains: list[int] | None = None,
                   frozen_positives: dict[tuple[int, int], np.ndarray] | None = None,
                   ) -> tuple[Tensor, LossReport]:
    """Build the full step loss graph; enqueues teacher embeddings as it goes.

    ``frozen_positives`` serves the stop-gradient finite-difference oracle:
    cells present in the dict reuse the stored positive values as constants,
    cells absent are computed through the augmenter and stored.
    """
    if train_domains is None:
        train_domains = config.train_domains
    gate, phi1, phi2, phi3 = bundle.augmenter_layers()
    cl_terms = []
    feats = []
    labels: list[int] = []
    skipped = 0
    for c in range(config.n_classes):
        for d in train_domains:
            x = constant(batch[(c, d)])
            q = encode(bundle.query_encoder, x)
            feats.append(q)
            labels.extend([c] * x.shape[0])
            if not config.uses_contrastive:
                continue
            pos = store.positive_pool(c, d)
            negs = store.negative_pool(c, d)
            if len(pos) and len(negs):
                if frozen_positives is not None and (c, d) in frozen_positives:
                    k_rows = constant(frozen_positives[(c, d)])
                else:
                    k_rows = augment_batch(
                        q, pos, gate, phi1, phi2, phi3, mode=config.algorithm,
                        grad_routing=config.grad_routing).k
                    if frozen_positives is not None:
                        frozen_positives[(c, d)] = k_rows.data.copy()
                qn = l2_normalize_rows(q)
                cl_terms.append(nt_xent_rows(
                    qn, k_rows, constant(negs.rows), config.tau,
                    include_positive_in_denominator=config.include_positive_in_denominator))
            else:
                skipped += 1
            teacher = encode(bundle.key_encoder, x)
            store.enqueue_dequeue(c, d, l2_normalize_np(teacher.data))

    all_x = concat_rows(feats)
    logits = classify(bundle.classifier, all_x)
    l_ce = cross_entropy_total(logits, np.asarray(labels))
    l_cl = contrastive_total(cl_terms)
    if config.uses_contrastive:
        l_total = add(l_ce, scale(l_cl, config.lam))
    else:
        l_total = l_ce
    report = LossReport(l_cl=float(l_cl.data), l_ce=float(l_ce.data),
                        l_total=float(l_total.data), skipped_cells=skipped,
                        tau=config.tau, lam=config.lam)
    return l_total, report


def update_step(bundle: ModelBundle, store: QueueStore, batch: StructuredBatch,
                config: TrainConfig, optimizer: Adam) -> StepMetrics:
    """One full optimization step; EMA runs strictly after the Adam update."""
    t0 = time.perf_counter()
    l_total, report = forward_losses(bundle, store, batch, config)
    optimizer.zero_grad()
    backward(l_total)
    optimizer.step()
    if config.uses_contrastive:
        ema_update(bundle, config.mu)
    return StepMetrics(step=-1, l_ce=report.l_ce, l_cl=report.l_cl,
                       l_total=report.l_total, skipped_cells=report.skipped_cells,
                       wall_time=time.perf_counter() - t0)


def sample_structured_batch(dataset: DomainDataset, plan: SplitPlan,
                            config: TrainConfig,
                            rng: np.random.Generator) -> StructuredBatch:
    """Draw batch_per_cell big-split examples per training cell, flattened."""
    batch: StructuredBatch = {}
    for c in range(config.n_classes):
        for d in config.train_domains:
            big = plan.big(c, d, dataset.n_per_cell)
            idx = rng.choice(len(big), size=config.batch_per_cell, replace=False)
            chosen = [big[i] for i in idx]
            images = dataset.cells[(c, d)][chosen]
            batch[(c, d)] = images.reshape(len(chosen), -1)
    return batch


def warm_up_queues(bundle: ModelBundle, store: QueueStore, dataset: DomainDataset,
                   plan: SplitPlan, config: TrainConfig,
                   rng: np.random.Generator) -> None:
    """Fill every training-cell queue once so step 1 sees non-empty pools."""
    batch = sample_structured_batch(dataset, plan, config, rng)
    for c in range(config.n_classes):
        for d in config.train_domains:
            teacher = encode(bundle.key_encoder, constant(batch[(c, d)]))
            store.enqueue_dequeue(c, d, l2_normalize_np(teacher.data))


# ---------------------------------------------------------------------------
# checkpoints

_CKPT_MANIFEST = "manifest.json"


def save_checkpoint(bundle: ModelBundle, out_dir, config: TrainConfig | None = None,
                    step: int = 0) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for name, param in bundle.named_parameters():
        save_tensor(out / f"{name}.rct", param.data)
        names.append(name)
    manifest = {
        "format": "rcerm-checkpoint",
        "step": int(step),
        "config": config.to_dict() if config is not None else None,
        "parameters": names,
    }
    (out / _CKPT_MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_checkpoint(in_dir) -> tuple[ModelBundle, TrainConfig, int]:
    root = Path(in_dir)
    manifest_path = root / _CKPT_MANIFEST
    if not manifest_path.is_file():
        raise FormatError(f"{root}: missing {_CKPT_MANIFEST}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as err:
        raise FormatError(f"{manifest_path}: invalid JSON ({err})") from None
    if manifest.get("format") != "rcerm-checkpoint":
        raise FormatError(f"{manifest_path}: not a checkpoint manifest")
    if manifest.get("config") is None:
        raise FormatError(f"{manifest_path}: checkpoint lacks its config")
    config = TrainConfig.from_dict(manifest["config"])
    # Recover the encoder input width from the first layer's stored shape.
    first = load_tensor(root / "query_encoder.0.weight.rct")
    bundle = bundle_from_config(config, input_dim=first.shape[1])
    stored = dict(bundle.named_parameters())
    if sorted(manifest["parameters"]) != sorted(stored):
        raise FormatError(f"{root}: parameter list does not match the config architecture")
    for name, param in bundle.named_parameters():
        path = root / f"{name}.rct"
        if not path.is_file():
            raise FormatError(f"{root}: missing tensor file for parameter {name}")
        try:
            arr = load_tensor(path)
        except FormatError as err:
            raise FormatError(f"parameter {name}: {err}") from None
        if arr.shape != param.data.shape:
            raise FormatError(f"parameter {name}: stored shape {arr.shape} != "
                              f"expected {param.data.shape}")
        param.data = arr
    return bundle, config, int(manifest["step"])


# ---------------------------------------------------------------------------
# full runs

_CSV_HEADER = "step,l_ce,l_cl,l_total,skipped_cells,acc_train,acc_val,acc_test"


def _resolve_split(dataset: DomainDataset, config: TrainConfig) -> SplitPlan:
    plan = dataset.split_plan
    if plan is not None and plan.holdout_domain == config.holdout_domain:
        return plan
    return split(dataset, config.holdout_domain, small_frac=config.small_frac,
                 seed=config.seed)


def _check_dataset(dataset: DomainDataset, config: TrainConfig) -> None:
    if dataset.n_classes != config.n_classes or dataset.n_domains != config.n_domains:
        raise DatasetError(
            f"dataset grid ({dataset.n_classes} classes, {dataset.n_domains} domains) "
            f"does not match config ({config.n_classes}, {config.n_domains})")
    for c in range(config.n_classes):
        for d in range(config.n_domains):
            cell = dataset.cells.get((c, d))
            if cell is None or cell.shape[0] == 0:
                raise DatasetError(f"training cell (class={c}, domain={d}) is empty")
    n_small = min(max(1, round(config.small_frac * dataset.n_per_cell)),
                  dataset.n_per_cell - 1)
    if config.batch_per_cell > dataset.n_per_cell - n_small:
        raise DatasetError(
            f"batch_per_cell {config.batch_per_cell} exceeds the big-split size "
            f"{dataset.n_per_cell - n_small}")


def _evaluate(bundle: ModelBundle, dataset: DomainDataset, plan: SplitPlan,
              config: TrainConfig) -> dict[str, float]:
    out = {
        "acc_train": accuracy(bundle, dataset.examples(
            selector_for(dataset, plan, "big", domains=config.train_domains))),
        "acc_val": accuracy(bundle, dataset.examples(
            selector_for(dataset, plan, "small", domains=config.train_domains))),
        "acc_test": accuracy(bundle, dataset.examples(
            selector_for(dataset, plan, "all", domains=[config.holdout_domain]))),
        "acc_test_small": accuracy(bundle, dataset.examples(
            [(c, config.holdout_domain, plan.small[(c, config.holdout_domain)])
             for c in range(config.n_classes)])),
    }
    if config.exclude_domain is not None:
        out["acc_excluded"] = accuracy(bundle, dataset.examples(
            selector_for(dataset, plan, "all", domains=[config.exclude_domain])))
    return out


def train_run(config: TrainConfig, dataset: DomainDataset, out_dir,
              config_id: int = 0) -> RunRecord:
    """Run one training job end to end and write its artifacts into out_dir."""
    config.validate()
    _check_dataset(dataset, config)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t_start = time.perf_counter()

    plan = _resolve_split(dataset, config)
    bundle = bundle_from_config(config, input_dim=dataset.input_dim)
    store = QueueStore(config.n_classes, config.n_domains, config.queue_sz,
                       config.embed_dim)
    optimizer = Adam(bundle.trainable_parameters(config.algorithm), lr=config.lr)
    batch_rng = np.random.default_rng([config.seed, 1])
    warm_rng = np.random.default_rng([config.seed, 2])
    if config.uses_contrastive:
        warm_up_queues(bundle, store, dataset, plan, config, warm_rng)

    csv_rows = [_CSV_HEADER]
    last_metrics = StepMetrics(step=0, l_ce=float("nan"), l_cl=0.0,
                               l_total=float("nan"), skipped_cells=0, wall_time=0.0)
    final_eval = _evaluate(bundle, dataset, plan, config)
    for step in range(1, config.steps + 1):
        batch = sample_structured_batch(dataset, plan, config, batch_rng)
        metrics = update_step(bundle, store, batch, config, optimizer)
        metrics.step = step
        last_metrics = metrics
        if step % config.eval_every == 0 or step == config.steps:
            final_eval = _evaluate(bundle, dataset, plan, config)
            csv_rows.append(
                f"{step},{metrics.l_ce!r},{metrics.l_cl!r},{metrics.l_total!r},"
                f"{metrics.skipped_cells},{final_eval['acc_train']!r},"
                f"{final_eval['acc_val']!r},{final_eval['acc_test']!r}")

    metrics_path = out / "metrics.csv"
    metrics_path.write_text("\n".join(csv_rows) + "\n")
    ckpt_dir = out / "checkpoint"
    save_checkpoint(bundle, ckpt_dir, config=config, step=config.steps)

    record = RunRecord(
        config=config.to_dict(),
        config_id=config_id,
        seed=config.seed,
        algorithm=config.algorithm,
        holdout_domain=config.holdout_domain,
        exclude_domain=config.exclude_domain,
        steps=config.steps,
        final_step=config.steps,
        l_ce=last_metrics.l_ce,
        l_cl=last_metrics.l_cl,
        l_total=last_metrics.l_total,
        acc_train=final_eval["acc_train"],
        acc_val=final_eval["acc_val"],
        acc_test=final_eval["acc_test"],
        acc_test_small=final_eval["acc_test_small"],
        acc_excluded=final_eval.get("acc_excluded"),
        checkpoint_path=str(ckpt_dir),
        metrics_path=str(metrics_path),
        wall_time_s=time.perf_counter() - t_start,
    )
    record.save(out / "run_record.json")
    return record
