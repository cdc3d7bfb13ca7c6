"""Sweep runner: executes (config, seed, holdout) trials, applies the three
selection criteria per algorithm and holdout, and writes a report.

Leave-one-out inner runs exclude one training domain at a time; the
winner's reported test accuracy comes from its standard run, which is the
retrain on all training domains.
"""
from __future__ import annotations

import json
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import STYLES, DomainDataset
from .exceptions import ConfigError, RecordError
from .selection import CRITERIA, RunRecord, SelectionResult
from .trainer import TrainConfig, train_run

ALL_CRITERIA = ("training_domain", "leave_one_out", "test_domain")


@dataclass
class SweepPlan:
    configs: list[TrainConfig]
    seeds: list[int]
    holdout_domains: list[int]
    criteria: tuple[str, ...] = ALL_CRITERIA

    def validate(self) -> None:
        if not self.configs:
            raise ConfigError("sweep plan has no configs")
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"seeds must be non-empty and distinct, got {self.seeds}")
        keys = [json.dumps({**c.to_dict(), "seed": None, "holdout_domain": None,
                            "exclude_domain": None}, sort_keys=True)
                for c in self.configs]
        if len(set(keys)) != len(keys):
            raise ConfigError("sweep plan contains duplicate configs")
        if not self.holdout_domains:
            raise ConfigError("sweep plan has no holdout domains")
        unknown = set(self.criteria) - set(ALL_CRITERIA)
        if unknown:
            raise ConfigError(f"unknown criteria: {sorted(unknown)}")
        for cfg in self.configs:
            cfg.validate()

    def to_dict(self) -> dict:
        return {
            "configs": [c.to_dict() for c in self.configs],
            "seeds": list(self.seeds),
            "holdout_domains": list(self.holdout_domains),
            "criteria": list(self.criteria),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "SweepPlan":
        known = {"configs", "seeds", "holdout_domains", "criteria"}
        unknown = set(payload) - known
        if unknown:
            raise ConfigError(f"unknown plan fields: {sorted(unknown)}")
        plan = cls(
            configs=[TrainConfig.from_dict(c) for c in payload["configs"]],
            seeds=[int(s) for s in payload["seeds"]],
            holdout_domains=[int(d) for d in payload["holdout_domains"]],
            criteria=tuple(payload.get("criteria", ALL_CRITERIA)),
        )
        plan.validate()
        return plan


def random_plan(n_configs: int = 6, n_seeds: int = 3, seed: int = 0,
                algorithms: tuple[str, ...] = ("erm", "rcerm"),
                base: TrainConfig | None = None,
                criteria: tuple[str, ...] = ALL_CRITERIA) -> SweepPlan:
    """Random draws over tau, lam, lr, batch size, and queue capacity."""
    rng = np.random.default_rng(seed)
    base = base if base is not None else TrainConfig()
    configs = []
    for i in range(n_configs):
        algorithm = algorithms[i % len(algorithms)]
        configs.append(replace(
            base,
            algorithm=algorithm,
            tau=float(np.exp(rng.uniform(np.log(0.05), np.log(0.5)))),
            lam=float(np.exp(rng.uniform(np.log(0.1), np.log(2.0)))),
            lr=float(np.exp(rng.uniform(np.log(3e-4), np.log(3e-3)))),
            batch_per_cell=int(rng.choice([2, 4, 8])),
            queue_sz=int(rng.choice([32, 64, 128])),
        ))
    return SweepPlan(configs=configs, seeds=list(range(n_seeds)),
                     holdout_domains=list(range(base.n_domains)), criteria=criteria)


@dataclass
class Trial:
    index: int
    config: TrainConfig
    config_id: int

    def out_name(self) -> str:
        cfg = self.config
        name = f"t{self.index:04d}_{cfg.algorithm}_c{self.config_id}_h{cfg.holdout_domain}_s{cfg.seed}"
        if cfg.exclude_domain is not None:
            name += f"_x{cfg.exclude_domain}"
        return name


def build_trials(plan: SweepPlan) -> list[Trial]:
    trials: list[Trial] = []
    index = 0
    for config_id, cfg in enumerate(plan.configs):
        for holdout in plan.holdout_domains:
            for seed in plan.seeds:
                standard = replace(cfg, seed=seed, holdout_domain=holdout,
                                   exclude_domain=None)
                trials.append(Trial(index=index, config=standard, config_id=config_id))
                index += 1
                if "leave_one_out" in plan.criteria:
                    for excl in range(cfg.n_domains):
                        if excl == holdout:
                            continue
                        loo = replace(cfg, seed=seed, holdout_domain=holdout,
                                      exclude_domain=excl)
                        trials.append(Trial(index=index, config=loo,
                                            config_id=config_id))
                        index += 1
    return trials


def _run_trial(payload: tuple[Trial, DomainDataset, str]) -> dict:
    trial, dataset, out_dir = payload
    record = train_run(trial.config, dataset, Path(out_dir) / trial.out_name(),
                       config_id=trial.config_id)
    return record.to_dict()


def _domain_name(d: int, n_domains: int) -> str:
    if n_domains == len(STYLES):
        return STYLES[d]
    return f"d{d}"


def _format_cell(entry: dict | None) -> str:
    if entry is None:
        return "-"
    if entry.get("std") is None:
        return f"{100 * entry['mean']:.1f}"
    return f"{100 * entry['mean']:.1f} ± {100 * entry['std']:.1f}"


def _report_tables(results: dict, n_domains: int, holdouts: list[int]) -> str:
    lines = ["# Sweep report", ""]
    for criterion, algos in results.items():
        title = criterion.replace("_", " ")
        oracle = " (oracle)" if criterion == "test_domain" else ""
        lines.append(f"## Model selection: {title}{oracle}")
        lines.append("")
        header = ["Algorithm"] + [_domain_name(d, n_domains) for d in holdouts] + ["Avg"]
        lines.append("| " + " | ".join(header) + " |")
        lines.append("|" + "---|" * len(header))
        for algo, per_domain in sorted(algos.items()):
            cells = [per_domain.get(str(d)) for d in holdouts]
            means = [c["mean"] for c in cells if c is not None]
            avg = f"{100 * float(np.mean(means)):.1f}" if means else "-"
            lines.append("| " + " | ".join(
                [algo] + [_format_cell(c) for c in cells] + [avg]) + " |")
        lines.append("")
    return "\n".join(lines)


def run_sweep(plan: SweepPlan, dataset: DomainDataset, out_dir,
              parallel: int = 1) -> dict:
    """Execute the plan; returns the report dict written to results.json."""
    plan.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trials = build_trials(plan)

    records: list[RunRecord] = []
    failures: list[dict] = []
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            payloads = [(t, dataset, str(out)) for t in trials]
            futures = [pool.submit(_run_trial, p) for p in payloads]
            for trial, future in zip(trials, futures):
                err = future.exception()
                if err is not None:
                    failures.append({"trial": trial.out_name(), "error": repr(err)})
                else:
                    records.append(RunRecord.from_dict(future.result()))
    else:
        for trial in trials:
            try:
                records.append(RunRecord.from_dict(_run_trial((trial, dataset, str(out)))))
            except Exception as err:  # keep going; the report marks the failure
                failures.append({"trial": trial.out_name(), "error": repr(err),
                                 "traceback": traceback.format_exc()})

    algorithms = sorted({r.algorithm for r in records})
    results: dict[str, dict] = {}
    selection_errors: list[dict] = []
    for criterion in plan.criteria:
        select = CRITERIA[criterion]
        per_algo: dict[str, dict] = {}
        for algo in algorithms:
            per_domain: dict[str, dict] = {}
            for holdout in plan.holdout_domains:
                subset = [r for r in records
                          if r.algorithm == algo and r.holdout_domain == holdout]
                if not subset:
                    continue
                try:
                    chosen = select(subset)
                except RecordError as err:
                    selection_errors.append({"criterion": criterion, "algorithm": algo,
                                             "holdout": holdout, "error": str(err)})
                    continue
                entry = chosen.per_domain.get(holdout)
                if entry is not None:
                    per_domain[str(holdout)] = {
                        "chosen_config": chosen.chosen_config_id,
                        "oracle": chosen.oracle,
                        **entry,
                    }
            per_algo[algo] = per_domain
        results[criterion] = per_algo

    report = {
        "n_trials": len(trials),
        "n_completed": len(records),
        "failures": failures,
        "selection_errors": selection_errors,
        "criteria": results,
    }
    (out / "results.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    (out / "report.md").write_text(
        _report_tables(results, dataset.n_domains, plan.holdout_domains) + "\n")
    return report
