"""Desk-scale comparison of the three data-utilization strategies on phantom domains.

Domain A ("high quality") is clean 32^3 phantoms. Domain B ("low quality") is
independently seeded phantoms pushed through :data:`LOW_QUALITY` degradation
(blur, 2x downsampling, contrast loss, noise), giving 16^3 volumes. Every
strategy spends the same number of steps on domain B; S_GLI_to_SSA additionally
pretrains on domain A.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .checkpoint import to_model
from .infer import InferenceConfig, evaluate_models
from .metrics import EvalReport, aggregate_report
from .optim import OptimizerConfig
from .phantom import LOW_QUALITY, PhantomSpec, generate_cases, low_quality_cases, sr_training_pairs
from .segnet import baseline_config, expanded_config
from .srnet import SRNetConfig, build_sr, sr_train
from .train import STRATEGIES, StrategySpec, run_strategy


@dataclass
class ComparisonConfig:
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    n_pretrain: int = 8
    n_target: int = 4
    n_heldout: int = 4
    pretrain_steps: int = 150
    target_steps: int = 100
    patch_shape: tuple[int, int, int] = (16, 16, 16)
    base_filters: int = 8
    levels: int = 3
    sr_filters: int = 8
    sr_cases: int = 4
    sr_epochs: int = 4
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)


def strategy_comparison(seeds=(0, 1, 2), config: ComparisonConfig = ComparisonConfig(),
                        strategies=STRATEGIES) -> dict[str, dict]:
    """Train every strategy for each seed and score held-out domain-B cases.

    Returns ``{strategy: {"per_seed_wt": [...], "report": EvalReport}}`` where the
    report aggregates all held-out cases over all seeds.
    """
    variants = {"baseline": baseline_config(base_filters=config.base_filters, levels=config.levels,
                                            patch_shape=config.patch_shape),
                "expanded": expanded_config(base_filters=config.base_filters, levels=config.levels,
                                            patch_shape=config.patch_shape)}
    results = {k: {"per_seed_wt": [], "cases": []} for k in strategies}
    for seed in seeds:
        base = replace(config.phantom, seed=10_000 + seed)
        pretrain = generate_cases(base, config.n_pretrain, prefix="gli")
        target_spec = replace(config.phantom, seed=20_000 + seed)
        target = low_quality_cases(target_spec, config.n_target, LOW_QUALITY, prefix="ssa")
        heldout = low_quality_cases(target_spec, config.n_heldout, LOW_QUALITY, start=config.n_target, prefix="ssa")
        datasets = {"gli": pretrain, "ssa": target}

        sr_models = {}
        if "S_srSSA" in strategies:
            sr = build_sr(SRNetConfig(filters=config.sr_filters), init_seed=seed)
            pairs = sr_training_pairs(replace(config.phantom, seed=30_000 + seed), config.sr_cases)
            sr, _ = sr_train(sr, pairs, config.optimizer, epochs=config.sr_epochs, seed=seed)
            sr_models["sr"] = sr

        for kind in strategies:
            spec = StrategySpec(kind=kind, target="ssa", pretrain="gli" if kind == "S_GLI_to_SSA" else None,
                                sr_model="sr" if kind == "S_srSSA" else None,
                                pretrain_steps=config.pretrain_steps, target_steps=config.target_steps,
                                pretrain_optimizer=config.optimizer, target_optimizer=config.optimizer,
                                seed=seed)
            res = run_strategy(spec, datasets, sr_models, variants)
            models = [to_model(c) for c in res.checkpoints.values()]
            metrics = evaluate_models(models, heldout, InferenceConfig(),
                                      sr_model=sr_models.get("sr") if kind == "S_srSSA" else None)
            results[kind]["cases"].extend(metrics)
            results[kind]["per_seed_wt"].append(float(np.mean([m.dice[2] for m in metrics])))
    for kind in strategies:
        results[kind]["report"] = aggregate_report(results[kind]["cases"])
    return results


def reports(results: dict[str, dict]) -> dict[str, EvalReport]:
    return {k: v["report"] for k, v in results.items()}
