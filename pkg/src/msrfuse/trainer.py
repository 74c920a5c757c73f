"""Mini-batch training loop, per-scenario evaluation (AUC, logloss), early
stopping on mean validation AUC, and bit-exact JSON checkpoints.

Determinism contract: model initialization draws from RNG stream 0 of the
configured seed and batch shuffling from stream 1, so two runs with equal
seeds produce bit-identical loss sequences, and a checkpoint taken mid-run
resumes exactly (the shuffling RNG state is captured at each epoch start and
the position within the epoch is replayed).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields as dc_fields
from pathlib import Path

import numpy as np

from .backbones import BACKBONE_KINDS, BackboneConfig
from .data import Dataset, FeatureSchema, make_batches
from .gradcore import Array, adam_step, logloss, new_rng, sigmoid_logloss
from .knowledge import VectorStore
from .metafusion import (ARCHITECTURES, BASELINES, FusionConfig, FusionModel,
                         LayerDims)

CHECKPOINT_FORMAT = "msrfuse-checkpoint-v1"


class UndefinedMetricError(ValueError):
    """AUC is undefined because one class is absent."""


class TrainingError(RuntimeError):
    """Training aborted (non-finite loss or inconsistent inputs)."""


class CheckpointError(ValueError):
    """Checkpoint file does not match the expected schema/config."""


@dataclass
class TrainerConfig:
    """Training hyper-parameters.

    Defaults are the paper-scale reference settings (batch 4096, learning
    rate 2e-4, towers [256, 128, 64], embedding width 16); the synthetic
    desk-scale experiments in :mod:`msrfuse.experiments` override them with
    much smaller values.
    """

    batch_size: int = 4096
    learning_rate: float = 2e-4
    max_epochs: int = 100
    patience: int = 3
    seed: int = 0
    eval_every: int = 0  # 0 = evaluate once per epoch
    architecture: str = "full"
    backbone: str = "star"
    baseline: str = "none"
    embedding_dim: int = 16
    tower_dims: tuple[int, ...] = (256, 128, 64)
    num_experts: int = 4
    expert_dims: tuple[int, ...] = (64,)
    ple_shared_experts: int = 2
    ple_scenario_experts: int = 1
    aux_hidden: int = 16
    knowledge_dim: int = 64
    meta_hidden: int = 32
    meta_head_scale: float = 0.05
    k_layers: int = 2
    bottom_hidden: int | None = None
    parallel_hidden: int = 64
    parallel_input: str = "bottom_out"
    epnet_hidden: int = 16
    dyn_hidden: int = 16
    threshold_t: int = 55
    clamp_eps: float = 1e-7
    max_steps: int | None = None
    eval_batch_size: int = 8192

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture '{self.architecture}'")
        if self.backbone not in BACKBONE_KINDS:
            raise ValueError(f"unknown backbone '{self.backbone}'")
        if self.baseline not in BASELINES:
            raise ValueError(f"unknown baseline '{self.baseline}'")
        for name in ("batch_size", "learning_rate", "max_epochs", "patience",
                     "embedding_dim", "knowledge_dim", "meta_hidden", "k_layers",
                     "threshold_t", "clamp_eps", "eval_batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(kind=self.backbone, tower_dims=tuple(self.tower_dims),
                              num_experts=self.num_experts,
                              expert_dims=tuple(self.expert_dims),
                              ple_shared_experts=self.ple_shared_experts,
                              ple_scenario_experts=self.ple_scenario_experts,
                              aux_hidden=self.aux_hidden)

    def fusion_config(self) -> FusionConfig:
        return FusionConfig(architecture=self.architecture, baseline=self.baseline,
                            knowledge_dim=self.knowledge_dim, meta_hidden=self.meta_hidden,
                            meta_head_scale=self.meta_head_scale, k_layers=self.k_layers,
                            bottom_hidden=self.bottom_hidden,
                            parallel_hidden=self.parallel_hidden,
                            parallel_input=self.parallel_input,
                            epnet_hidden=self.epnet_hidden, dyn_hidden=self.dyn_hidden)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainerConfig":
        known = {f.name for f in dc_fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise CheckpointError(f"unknown trainer config keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("tower_dims", "expert_dims"):
            if key in d and d[key] is not None:
                d[key] = tuple(d[key])
        return cls(**d)


def build_model(schema: FeatureSchema, store: VectorStore | None,
                cfg: TrainerConfig) -> FusionModel:
    """Construct the model from config; init draws from RNG stream 0."""
    rng = new_rng(cfg.seed, stream=0)
    return FusionModel(schema, store, cfg.backbone_config(), cfg.fusion_config(), rng)


def auc(labels: Array, scores: Array) -> float:
    """Rank-based AUC with midranks for ties: the probability that a random
    positive outscores a random negative, counting ties as half."""
    y = np.asarray(labels).reshape(-1)
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if y.shape != s.shape:
        raise ValueError(f"labels shape {y.shape} vs scores shape {s.shape}")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(
            f"AUC undefined: {n_pos} positives and {n_neg} negatives")
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    new_group = np.r_[True, sorted_s[1:] != sorted_s[:-1]]
    group_ids = np.cumsum(new_group) - 1
    counts = np.bincount(group_ids)
    ends = np.cumsum(counts).astype(np.float64)
    starts = ends - counts + 1.0
    midranks_sorted = (starts + ends)[group_ids] / 2.0
    ranks = np.empty_like(midranks_sorted)
    ranks[order] = midranks_sorted
    rank_sum_pos = float(ranks[y == 1].sum())
    return (rank_sum_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


@dataclass
class MetricsReport:
    split: str
    epoch: int
    sample_counts: list[int]
    auc_per_scenario: list[float | None]
    logloss_per_scenario: list[float]
    logloss_overall: float

    @property
    def auc_mean(self) -> float:
        defined = [a for a in self.auc_per_scenario if a is not None]
        if not defined:
            raise UndefinedMetricError("AUC undefined in every scenario")
        return float(np.mean(defined))

    def to_dict(self) -> dict:
        return {
            "split": self.split,
            "epoch": self.epoch,
            "sample_counts": self.sample_counts,
            "auc_per_scenario": self.auc_per_scenario,
            "auc_mean": self.auc_mean if any(a is not None for a in self.auc_per_scenario)
            else None,
            "logloss_per_scenario": self.logloss_per_scenario,
            "logloss_overall": self.logloss_overall,
        }


def predict_dataset(model: FusionModel, ds: Dataset, batch_size: int = 8192) -> Array:
    """Deterministic chunked inference over a split, original row order."""
    outs = []
    for start in range(0, len(ds), batch_size):
        outs.append(model.predict_proba(ds.features[start:start + batch_size]))
    return np.concatenate(outs, axis=0).reshape(-1)


def evaluate(model: FusionModel, ds: Dataset, split: str = "test", epoch: int = -1,
             batch_size: int = 8192) -> MetricsReport:
    """Per-scenario AUC and logloss plus overall logloss on one split.

    Scenarios whose slice holds a single class report AUC as None rather than
    a silent 0.5.
    """
    probs = predict_dataset(model, ds, batch_size)
    d_count = ds.schema.num_scenarios
    aucs: list[float | None] = []
    losses: list[float] = []
    counts: list[int] = []
    for d in range(d_count):
        mask = ds.domain_ids == d
        counts.append(int(mask.sum()))
        if counts[-1] == 0:
            aucs.append(None)
            losses.append(float("nan"))
            continue
        y, p = ds.labels[mask], probs[mask]
        losses.append(logloss(y, p))
        try:
            aucs.append(auc(y, p))
        except UndefinedMetricError:
            aucs.append(None)
    overall = logloss(ds.labels, probs)
    return MetricsReport(split, epoch, counts, aucs, losses, overall)


@dataclass
class TrainState:
    """Mid-training bookkeeping; everything a bit-exact resume needs."""

    epoch: int = 0
    pos_in_epoch: int = 0
    global_step: int = 0
    rng_state: dict | None = None  # shuffling RNG state at the current epoch start
    best_auc: float | None = None
    best_snapshot: dict | None = None
    evals_without_improvement: int = 0
    loss_since_eval: list = field(default_factory=list)
    stopped: bool = False


@dataclass
class TrainResult:
    model: FusionModel
    state: TrainState
    batch_losses: list[float]
    eval_rows: list[dict]  # epoch, step, train_loss, valid_auc_mean


def train(model: FusionModel, train_ds: Dataset, valid_ds: Dataset | None,
          cfg: TrainerConfig, state: TrainState | None = None) -> TrainResult:
    """Run the optimization loop.

    Per batch: forward, fused sigmoid+logloss, backward, one Adam step per
    trainable parameter, zero grads. Early stopping tracks mean per-scenario
    validation AUC with the configured patience and restores the best
    snapshot. ``cfg.max_steps`` (if set) stops mid-epoch after that many
    batches, leaving ``state`` ready for a later resume.
    """
    rng = new_rng(cfg.seed, stream=1)
    if state is None:
        state = TrainState()
    if state.rng_state is not None:
        rng.bit_generator.state = state.rng_state

    batch_losses: list[float] = []
    eval_rows: list[dict] = []
    steps_taken = 0

    def run_eval() -> bool:
        """Returns True when patience is exhausted."""
        if valid_ds is None:
            return False
        report = evaluate(model, valid_ds, "valid", state.epoch, cfg.eval_batch_size)
        mean_auc = report.auc_mean
        mean_loss = float(np.mean(state.loss_since_eval)) if state.loss_since_eval else float("nan")
        state.loss_since_eval = []
        eval_rows.append({"epoch": state.epoch, "step": state.global_step,
                          "train_loss": mean_loss, "valid_auc_mean": mean_auc})
        if state.best_auc is None or mean_auc > state.best_auc:
            state.best_auc = mean_auc
            state.best_snapshot = model.snapshot()
            state.evals_without_improvement = 0
        else:
            state.evals_without_improvement += 1
        return state.evals_without_improvement >= cfg.patience

    stop = False
    while state.epoch < cfg.max_epochs and not stop:
        if state.pos_in_epoch == 0:
            state.rng_state = rng.bit_generator.state
        else:
            # resuming mid-epoch: replay the epoch's permutation
            rng.bit_generator.state = state.rng_state
        batches = make_batches(train_ds, cfg.batch_size, rng)
        while state.pos_in_epoch < len(batches):
            idx = batches[state.pos_in_epoch]
            feats = train_ds.features[idx]
            labels = train_ds.labels[idx]
            model.zero_grads()
            logits = model.forward_logits(feats)
            loss, d_logits = sigmoid_logloss(labels, logits)
            if not np.isfinite(loss):
                counts = np.bincount(feats[:, 0], minlength=train_ds.schema.num_scenarios)
                raise TrainingError(
                    f"non-finite loss {loss} at epoch {state.epoch} step "
                    f"{state.global_step} (batch scenario counts {counts.tolist()})")
            model.backward(d_logits)
            for p in model.parameters():
                adam_step(p, cfg.learning_rate)
            batch_losses.append(loss)
            state.loss_since_eval.append(loss)
            state.pos_in_epoch += 1
            state.global_step += 1
            steps_taken += 1
            if cfg.eval_every and state.global_step % cfg.eval_every == 0:
                if run_eval():
                    stop = True
                    break
            if cfg.max_steps is not None and steps_taken >= cfg.max_steps:
                return TrainResult(model, state, batch_losses, eval_rows)
        if stop:
            break
        state.epoch += 1
        state.pos_in_epoch = 0
        if not cfg.eval_every and run_eval():
            break

    state.stopped = True
    if state.best_snapshot is not None:
        model.restore(state.best_snapshot)
    return TrainResult(model, state, batch_losses, eval_rows)


def write_history_csv(eval_rows: list[dict], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write("epoch,step,train_loss,valid_auc_mean\n")
        for row in eval_rows:
            fh.write(f"{row['epoch']},{row['step']},{row['train_loss']:.17g},"
                     f"{row['valid_auc_mean']:.17g}\n")


# -- checkpointing ----------------------------------------------------------

def _params_to_json(snapshot: dict[str, dict]) -> dict:
    out = {}
    for name, rec in snapshot.items():
        out[name] = {"shape": list(rec["value"].shape),
                     "value": rec["value"].tolist(),
                     "m": rec["m"].tolist(),
                     "v": rec["v"].tolist(),
                     "step_count": rec["step_count"]}
    return out


def _params_from_json(obj: dict) -> dict[str, dict]:
    out = {}
    for name, rec in obj.items():
        shape = tuple(rec["shape"])
        out[name] = {"value": np.asarray(rec["value"], dtype=np.float64).reshape(shape),
                     "m": np.asarray(rec["m"], dtype=np.float64).reshape(shape),
                     "v": np.asarray(rec["v"], dtype=np.float64).reshape(shape),
                     "step_count": int(rec["step_count"])}
    return out


def checkpoint_save(path: str | Path, model: FusionModel, cfg: TrainerConfig,
                    state: TrainState | None = None) -> None:
    """One JSON document: config, schema, every parameter with its Adam
    moments and step count, and (optionally) the mid-training state. JSON
    float round trips are exact, so save/load is bit-exact."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(cfg),
        "schema": model.schema.to_dict(),
        "params": _params_to_json(model.snapshot()),
    }
    if state is not None:
        doc["state"] = {
            "epoch": state.epoch,
            "pos_in_epoch": state.pos_in_epoch,
            "global_step": state.global_step,
            "rng_state": state.rng_state,
            "best_auc": state.best_auc,
            "evals_without_improvement": state.evals_without_improvement,
            "loss_since_eval": state.loss_since_eval,
            "best_snapshot": _params_to_json(state.best_snapshot)
            if state.best_snapshot is not None else None,
        }
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def checkpoint_load(path: str | Path, store: VectorStore | None
                    ) -> tuple[FusionModel, TrainerConfig, TrainState | None]:
    """Rebuild the model from a checkpoint and restore it bit-exactly.

    Every stored parameter must exist in the rebuilt model with the same
    shape; a tampered config (e.g. wrong knowledge dim) is rejected with the
    offending parameter named.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: invalid JSON: {exc}") from exc
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: unknown checkpoint format {doc.get('format')!r}")
    cfg = TrainerConfig.from_dict(doc["config"])
    schema = FeatureSchema.from_dict(doc["schema"])
    model = build_model(schema, store, cfg)
    stored = _params_from_json(doc["params"])
    pmap = model.parameter_map()
    if set(stored) != set(pmap):
        diff = sorted(set(stored) ^ set(pmap))
        raise CheckpointError(f"{path}: parameter set mismatch: {diff[:5]}")
    for name, rec in stored.items():
        if pmap[name].shape != rec["value"].shape:
            raise CheckpointError(
                f"{path}: parameter '{name}' has shape {rec['value'].shape} but the "
                f"configured model expects {pmap[name].shape}")
    model.restore(stored)
    state = None
    if doc.get("state") is not None:
        s = doc["state"]
        state = TrainState(
            epoch=s["epoch"], pos_in_epoch=s["pos_in_epoch"],
            global_step=s["global_step"], rng_state=s["rng_state"],
            best_auc=s["best_auc"],
            best_snapshot=_params_from_json(s["best_snapshot"])
            if s["best_snapshot"] is not None else None,
            evals_without_improvement=s["evals_without_improvement"],
            loss_since_eval=list(s["loss_since_eval"]),
        )
    return model, cfg, state
