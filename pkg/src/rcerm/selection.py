"""Run records, accuracy, and the three model-selection criteria.

Criteria operate on lists of :class:`RunRecord` for a single held-out
domain. "Standard" records were trained on every training domain;
"leave-one-out" records additionally excluded one training domain and
carry the accuracy measured on it.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Example, stack_examples
from .exceptions import ContractError, RecordError
from .networks import ModelBundle, classify, encode
from .tensor import constant


def accuracy(bundle: ModelBundle, examples: list[Example]) -> float:
    """Fraction of examples whose argmax logit equals the label.

    Ties break toward the lowest class index.
    """
    if not examples:
        raise ContractError("accuracy needs a non-empty example list")
    x, y = stack_examples(examples)
    emb = encode(bundle.query_encoder, constant(x))
    logits = classify(bundle.classifier, emb)
    pred = np.argmax(logits.data, axis=1)
    return float(np.mean(pred == y))


def mean_std(values: list[float]) -> tuple[float, float | None]:
    """Mean and population standard deviation; std is absent under 2 seeds."""
    arr = np.asarray(values, dtype=np.float64)
    mean = float(arr.mean())
    std = float(arr.std()) if arr.size >= 2 else None
    return mean, std


@dataclass
class RunRecord:
    """Everything the selection harness needs from one finished run."""

    config: dict
    config_id: int
    seed: int
    algorithm: str
    holdout_domain: int
    exclude_domain: int | None
    steps: int
    final_step: int
    l_ce: float
    l_cl: float
    l_total: float
    acc_train: float | None
    acc_val: float | None
    acc_test: float | None
    acc_test_small: float | None
    acc_excluded: float | None
    checkpoint_path: str | None
    metrics_path: str | None
    wall_time_s: float | None = None

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, payload: dict) -> "RunRecord":
        fields = set(cls.__dataclass_fields__)
        unknown = set(payload) - fields
        if unknown:
            raise RecordError(f"unknown record fields: {sorted(unknown)}")
        missing = fields - set(payload) - {"wall_time_s"}
        if missing:
            raise RecordError(f"missing record fields: {sorted(missing)}")
        return cls(**payload)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "RunRecord":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class SelectionResult:
    """Outcome of one criterion over one record set."""

    criterion: str
    chosen_config_id: int
    score: float
    per_domain: dict[int, dict]
    oracle: bool = False

    def to_dict(self) -> dict:
        return {
            "criterion": self.criterion,
            "chosen_config_id": self.chosen_config_id,
            "score": self.score,
            "oracle": self.oracle,
            "per_domain": {str(d): v for d, v in sorted(self.per_domain.items())},
        }


def _require(record: RunRecord, field_name: str) -> float:
    value = getattr(record, field_name)
    if value is None:
        raise RecordError(f"record (config {record.config_id}, seed {record.seed}) "
                          f"lacks {field_name}")
    return float(value)


def _group_by_config(records: list[RunRecord]) -> dict[int, list[RunRecord]]:
    groups: dict[int, list[RunRecord]] = {}
    for r in records:
        groups.setdefault(r.config_id, []).append(r)
    return groups


def _test_summary(records: list[RunRecord]) -> dict[int, dict]:
    """Per-holdout-domain test accuracy mean/std over seeds."""
    by_domain: dict[int, list[float]] = {}
    for r in records:
        by_domain.setdefault(r.holdout_domain, []).append(_require(r, "acc_test"))
    out = {}
    for d, vals in sorted(by_domain.items()):
        mean, std = mean_std(vals)
        out[d] = {"mean": mean, "std": std, "n_seeds": len(vals)}
    return out


def select_training_domain(records: list[RunRecord]) -> SelectionResult:
    """Argmax of validation accuracy on the union of training-domain small splits."""
    standard = [r for r in records if r.exclude_domain is None]
    if not standard:
        raise RecordError("no standard (all-training-domain) records supplied")
    groups = _group_by_config(standard)
    scored = []
    for cid, group in groups.items():
        vals = [_require(r, "acc_val") for r in group]
        for r in group:
            _require(r, "acc_test")
        scored.append((float(np.mean(vals)), cid))
    best_score, best_cid = max(scored, key=lambda t: (t[0], -t[1]))
    return SelectionResult(criterion="training_domain", chosen_config_id=best_cid,
                           score=best_score, per_domain=_test_summary(groups[best_cid]))


def select_leave_one_out(records: list[RunRecord]) -> SelectionResult:
    """Argmax of the average accuracy over left-out training domains.

    The winner's reported test accuracy comes from its standard records,
    i.e. the retrain on all training domains.
    """
    holdouts = {r.holdout_domain for r in records}
    if len(holdouts) != 1:
        raise RecordError(f"records span holdout domains {sorted(holdouts)}; "
                          "apply the criterion per holdout")
    holdout = holdouts.pop()
    n_domains = {int(r.config["n_domains"]) for r in records}
    if len(n_domains) != 1:
        raise RecordError("records disagree on the number of domains")
    train_domains = sorted(set(range(n_domains.pop())) - {holdout})
    if len(train_domains) < 2:
        raise RecordError("leave-one-out needs at least 2 training domains; "
                          f"got {len(train_domains)}")

    loo = [r for r in records if r.exclude_domain is not None]
    if not loo:
        raise RecordError("no leave-one-out records supplied")
    standard = _group_by_config([r for r in records if r.exclude_domain is None])

    scored = []
    groups = _group_by_config(loo)
    for cid, group in groups.items():
        per_left_out: dict[int, list[float]] = {}
        for r in group:
            per_left_out.setdefault(int(r.exclude_domain), []).append(_require(r, "acc_excluded"))
        missing = [d for d in train_domains if d not in per_left_out]
        if missing:
            raise RecordError(f"config {cid} lacks leave-one-out runs for domains {missing}")
        domain_means = [float(np.mean(per_left_out[d])) for d in train_domains]
        scored.append((float(np.mean(domain_means)), cid))
    best_score, best_cid = max(scored, key=lambda t: (t[0], -t[1]))
    if best_cid not in standard:
        raise RecordError(f"winning config {best_cid} has no all-training-domain retrain record")
    return SelectionResult(criterion="leave_one_out", chosen_config_id=best_cid,
                           score=best_score, per_domain=_test_summary(standard[best_cid]))


def select_test_domain(records: list[RunRecord]) -> SelectionResult:
    """Argmax of final-step accuracy on the held-out domain's small split.

    Flagged as an oracle: it peeks at test-distribution data.
    """
    standard = [r for r in records if r.exclude_domain is None]
    if not standard:
        raise RecordError("no standard (all-training-domain) records supplied")
    for r in standard:
        _require(r, "acc_test_small")
        if r.final_step != r.steps:
            raise RecordError(
                f"record (config {r.config_id}, seed {r.seed}) measured at step "
                f"{r.final_step}, not the final step {r.steps}")
    groups = _group_by_config(standard)
    scored = []
    for cid, group in groups.items():
        vals = [_require(r, "acc_test_small") for r in group]
        scored.append((float(np.mean(vals)), cid))
    best_score, best_cid = max(scored, key=lambda t: (t[0], -t[1]))
    return SelectionResult(criterion="test_domain", chosen_config_id=best_cid,
                           score=best_score, per_domain=_test_summary(groups[best_cid]),
                           oracle=True)


CRITERIA = {
    "training_domain": select_training_domain,
    "leave_one_out": select_leave_one_out,
    "test_domain": select_test_domain,
}
