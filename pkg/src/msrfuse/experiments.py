"""Desk-scale synthetic experiments: enhancement comparison, architecture
ablations, and the generated-depth sweep.

These drive the directional claims that stand in for full-scale benchmark
numbers: with informative knowledge vectors the fused model should beat its
own backbone, and with pure-noise vectors it should neither gain nor lose
much. Shared by the experiment scripts and the acceptance suite.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, SyntheticConfig, split_chrono, synth_generate
from .knowledge import VectorStore
from .metafusion import ARCHITECTURES
from .trainer import TrainerConfig, auc, build_model, evaluate, train

# Small-model overrides of the paper-scale TrainerConfig defaults; everything
# else (Adam, early stopping on mean validation AUC) is unchanged.
DESK_TRAINER = dict(
    batch_size=256,
    learning_rate=2e-3,
    max_epochs=12,
    patience=3,
    embedding_dim=8,
    tower_dims=(32, 16),
    num_experts=4,
    expert_dims=(16,),
    aux_hidden=8,
    knowledge_dim=64,
    meta_hidden=32,
    parallel_hidden=16,
    epnet_hidden=8,
    dyn_hidden=8,
)

ABLATION_VARIANTS = ("full", "user_bottom_only", "user_parallel_only",
                     "domain_bottom_only", "domain_parallel_only", "backbone_only")


def desk_config(**overrides) -> TrainerConfig:
    merged = dict(DESK_TRAINER)
    merged.update(overrides)
    return TrainerConfig(**merged)


@dataclass
class RunOutcome:
    seed: int
    test_auc: list[float | None]
    test_logloss: list[float]
    valid_auc_mean: float
    batch_losses: list[float] = field(repr=False, default_factory=list)


def train_and_test(splits: tuple[Dataset, Dataset, Dataset], store: VectorStore | None,
                   cfg: TrainerConfig) -> RunOutcome:
    train_ds, valid_ds, test_ds = splits
    model = build_model(train_ds.schema, store, cfg)
    result = train(model, train_ds, valid_ds, cfg)
    report = evaluate(model, test_ds, "test", result.state.epoch, cfg.eval_batch_size)
    valid_auc = result.state.best_auc if result.state.best_auc is not None else float("nan")
    return RunOutcome(cfg.seed, report.auc_per_scenario, report.logloss_per_scenario,
                      valid_auc, result.batch_losses)


def _mean_per_scenario(outcomes: list[RunOutcome]) -> list[float]:
    stacked = np.asarray([[a for a in o.test_auc] for o in outcomes], dtype=np.float64)
    return [float(v) for v in stacked.mean(axis=0)]


def oracle_auc(ds: Dataset, probs: np.ndarray) -> list[float]:
    """AUC of the generator's true click probabilities against its labels."""
    out = []
    for d in range(ds.schema.num_scenarios):
        mask = ds.domain_ids == d
        out.append(auc(ds.labels[mask], probs[mask]))
    return out


def run_enhancement_comparison(synth_cfg: SyntheticConfig | None = None,
                               seeds: tuple[int, ...] = (0, 1, 2),
                               backbone: str = "star",
                               trainer_overrides: dict | None = None) -> dict:
    """Architecture ``full`` vs ``backbone_only`` on one synthetic dataset,
    once with informative vectors and once with pure-noise vectors.

    The two stores share the same interactions (vector generation happens
    after the dataset draw), so the comparison is controlled.
    """
    synth_cfg = synth_cfg or SyntheticConfig()
    overrides = dict(trainer_overrides or {})
    overrides.setdefault("knowledge_dim", synth_cfg.knowledge_dim)
    overrides.setdefault("backbone", backbone)

    report: dict = {"synthetic": dataclasses.asdict(synth_cfg), "seeds": list(seeds)}
    for informative in (True, False):
        scfg = dataclasses.replace(synth_cfg, informative=informative)
        ds, store, gt = synth_generate(
            scfg, embedding_dim=overrides.get("embedding_dim",
                                              DESK_TRAINER["embedding_dim"]))
        splits = split_chrono(ds)
        if informative:
            report["oracle_auc"] = oracle_auc(ds, gt.probs)
        arm: dict = {}
        for arch in ("full", "backbone_only"):
            outcomes = [train_and_test(splits, store,
                                       desk_config(architecture=arch, seed=s, **overrides))
                        for s in seeds]
            arm[arch] = {"mean_auc_per_scenario": _mean_per_scenario(outcomes),
                         "per_seed": [{"seed": o.seed, "test_auc": o.test_auc}
                                      for o in outcomes]}
        arm["delta_per_scenario"] = [
            f - b for f, b in zip(arm["full"]["mean_auc_per_scenario"],
                                  arm["backbone_only"]["mean_auc_per_scenario"])]
        report["informative" if informative else "noise"] = arm
    return report


def run_ablation_suite(synth_cfg: SyntheticConfig | None = None,
                       seeds: tuple[int, ...] = (0,),
                       backbone: str = "star",
                       trainer_overrides: dict | None = None) -> dict:
    """Train every wiring variant on the informative synthetic data and rank
    them by mean test AUC."""
    synth_cfg = synth_cfg or SyntheticConfig()
    overrides = dict(trainer_overrides or {})
    overrides.setdefault("knowledge_dim", synth_cfg.knowledge_dim)
    overrides.setdefault("backbone", backbone)
    ds, store, _ = synth_generate(
        synth_cfg, embedding_dim=overrides.get("embedding_dim",
                                               DESK_TRAINER["embedding_dim"]))
    splits = split_chrono(ds)
    variants: dict = {}
    for arch in ABLATION_VARIANTS:
        outcomes = [train_and_test(splits, store,
                                   desk_config(architecture=arch, seed=s, **overrides))
                    for s in seeds]
        per_scenario = _mean_per_scenario(outcomes)
        variants[arch] = {"mean_auc_per_scenario": per_scenario,
                          "mean_auc": float(np.mean(per_scenario))}
    ranking = sorted(variants, key=lambda a: variants[a]["mean_auc"], reverse=True)
    return {"synthetic": dataclasses.asdict(synth_cfg), "seeds": list(seeds),
            "variants": variants, "ranking": ranking}


def first_epoch_loss_profile(batch_losses: list[float], n_batches_per_epoch: int,
                             chunks: int = 3) -> list[float]:
    """Mean training loss over consecutive chunks of the first epoch."""
    first = np.asarray(batch_losses[:n_batches_per_epoch], dtype=np.float64)
    return [float(c.mean()) for c in np.array_split(first, chunks)]


def run_k_sweep(synth_cfg: SyntheticConfig | None = None,
                k_values: tuple[int, ...] = (1, 2, 3),
                seed: int = 0,
                backbone: str = "star",
                trainer_overrides: dict | None = None) -> dict:
    """Depth sweep of the generated stacks for the full architecture."""
    synth_cfg = synth_cfg or SyntheticConfig()
    overrides = dict(trainer_overrides or {})
    overrides.setdefault("knowledge_dim", synth_cfg.knowledge_dim)
    overrides.setdefault("backbone", backbone)
    ds, store, _ = synth_generate(
        synth_cfg, embedding_dim=overrides.get("embedding_dim",
                                               DESK_TRAINER["embedding_dim"]))
    splits = split_chrono(ds)
    n_batches = int(np.ceil(len(splits[0]) / overrides.get("batch_size",
                                                           DESK_TRAINER["batch_size"])))
    sweeps: dict = {}
    for k in k_values:
        cfg = desk_config(architecture="full", k_layers=k, seed=seed, **overrides)
        outcome = train_and_test(splits, store, cfg)
        sweeps[str(k)] = {
            "test_auc": outcome.test_auc,
            "mean_test_auc": float(np.mean([a for a in outcome.test_auc])),
            "all_losses_finite": bool(np.all(np.isfinite(outcome.batch_losses))),
            "first_epoch_loss_profile": first_epoch_loss_profile(
                outcome.batch_losses, n_batches),
        }
    best = max(sweeps, key=lambda k: sweeps[k]["mean_test_auc"])
    return {"synthetic": dataclasses.asdict(synth_cfg), "seed": seed,
            "k_values": list(k_values), "sweeps": sweeps, "best_k": int(best)}
