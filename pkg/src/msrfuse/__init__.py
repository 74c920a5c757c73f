"""Multi-scenario CTR training with knowledge-vector meta layers fused into
conventional multi-scenario backbones."""

__version__ = "0.1.0"

from .data import Dataset, FeatureSchema, SyntheticConfig, synth_generate
from .knowledge import ScenarioStats, VectorStore
from .metafusion import ARCHITECTURES, BASELINES, FusionModel, LayerDims
from .trainer import TrainerConfig, auc, build_model, evaluate, train

__all__ = [
    "ARCHITECTURES", "BASELINES", "Dataset", "FeatureSchema", "FusionModel",
    "LayerDims", "ScenarioStats", "SyntheticConfig", "TrainerConfig",
    "VectorStore", "auc", "build_model", "evaluate", "synth_generate", "train",
]
