import json
import logging
import os
from pathlib import Path
from typing import List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from errors import ConfigError

logger = logging.getLogger(__name__)

TOOL_VERSION = "0.3.0"


class Settings(BaseSettings):
    """Process-level settings read from the environment (prefix LOCALICL_) or .env"""

    model_config = SettingsConfigDict(env_prefix="LOCALICL_", env_file=".env", extra="ignore")

    # Worker cap for micro-batch fan-out; defaults to the logical core count
    THREADS: Optional[int] = None

    LOG_LEVEL: str = "INFO"

    # Run registry
    RUNS_DATABASE_URL: str = "sqlite:///./localicl_runs.db"

    # Max attention-score elements materialized per forward chunk
    ATTENTION_BUDGET: int = 2 ** 23

    @property
    def worker_count(self) -> int:
        if self.THREADS is not None and self.THREADS >= 1:
            return self.THREADS
        return os.cpu_count() or 1


# Global settings instance
settings = Settings()


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelConfig(_Section):
    n_layers: int = Field(3, ge=1)
    d_model: int = Field(64, ge=2)
    n_heads: int = Field(4, ge=1)
    d_ff: int = Field(128, ge=1)
    d_max: int = Field(20, ge=1)
    c_max: int = Field(10, ge=1)
    l_ctx_max: int = Field(512, ge=1)

    @model_validator(mode="after")
    def _heads_divide_width(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        return self


class PriorConfig(_Section):
    """Ranges are inclusive (low, high) pairs."""

    n_features: tuple[int, int] = (2, 20)
    depth: tuple[int, int] = (1, 4)
    width: tuple[int, int] = (4, 64)
    n_classes: tuple[int, int] = (2, 10)
    n_samples: tuple[int, int] = (64, 576)
    query_fraction: tuple[float, float] = (0.1, 0.5)
    noise_std: float = Field(0.1, ge=0.0)
    seed: int = 0

    @model_validator(mode="after")
    def _ranges_nonempty(self):
        for name in ("n_features", "depth", "width", "n_classes", "n_samples", "query_fraction"):
            low, high = getattr(self, name)
            if low > high:
                raise ValueError(f"prior range {name} is empty: {low} > {high}")
        if self.n_classes[0] < 2:
            raise ValueError("prior class count must be at least 2")
        if self.n_features[0] < 1 or self.depth[0] < 1 or self.width[0] < 1:
            raise ValueError("prior dims, depth and width must be positive")
        if not 0.0 < self.query_fraction[0] <= self.query_fraction[1] < 1.0:
            raise ValueError("query_fraction must lie in (0, 1)")
        return self

    def fitted_to(self, model: ModelConfig) -> "PriorConfig":
        """Clamp feature/class/size ranges to what the model can consume."""
        return self.model_copy(update={
            "n_features": (min(self.n_features[0], model.d_max), min(self.n_features[1], model.d_max)),
            "n_classes": (min(self.n_classes[0], model.c_max), min(self.n_classes[1], model.c_max)),
        })


TrainMode = Literal["prior_fit", "finetune_local", "finetune_random", "finetune_exact"]


class TrainConfig(_Section):
    mode: TrainMode = "finetune_local"
    lr: float = Field(0.01, gt=0.0)
    weight_decay: float = Field(0.01, ge=0.0)
    batch_size: int = Field(2, ge=1)
    # Total query rows per step, split evenly over the batch
    n_queries: int = Field(128, ge=1)
    # Context length per sequence; None derives it from the k-rule
    context_length: Optional[int] = Field(None, ge=1)
    eval_every: int = Field(30, ge=1)
    patience: int = Field(5, ge=1)
    max_steps: int = Field(1000, ge=0)
    loss_window: int = Field(500, ge=1)
    check_batches: bool = False
    seed: int = 0


def _default_prior_fit() -> TrainConfig:
    return TrainConfig(mode="prior_fit", lr=1e-3, weight_decay=0.0, batch_size=8,
                       eval_every=100, max_steps=4000)


class RetrievalConfig(_Section):
    k_max: int = Field(512, ge=1)
    embedding: Literal["raw", "one_hot"] = "raw"
    one_hot_max_width: int = Field(100, ge=1)


class EvalConfig(_Section):
    folds: int = Field(10, ge=1)
    bootstrap_resamples: int = Field(2000, ge=1)
    alpha: float = Field(0.05, gt=0.0, lt=1.0)
    batch_size: int = Field(512, ge=1)
    ensemble_members: int = Field(8, ge=1)
    chunk_size: int = Field(512, ge=1)
    full_context_max: int = Field(1024, ge=1)
    knn_baseline_k: int = Field(10, ge=1)
    k_max_sweep: List[int] = Field(default_factory=list)
    reference_method: str = "knn_baseline"
    size_edges: List[int] = Field(default_factory=lambda: [2000])
    complexity_bins: int = Field(5, ge=1)
    prior_probe_tasks: int = Field(200, ge=0)


class IOConfig(_Section):
    output_dir: str = "runs/default"
    register_runs: bool = True


class ExperimentConfig(_Section):
    model: ModelConfig = Field(default_factory=ModelConfig)
    prior: PriorConfig = Field(default_factory=PriorConfig)
    prior_fit: TrainConfig = Field(default_factory=_default_prior_fit)
    train: TrainConfig = Field(default_factory=TrainConfig)
    retrieval: RetrievalConfig = Field(default_factory=RetrievalConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    io: IOConfig = Field(default_factory=IOConfig)
    seed: int = 0

    def snapshot(self) -> dict:
        """All values, defaults included, as plain JSON types"""
        return self.model_dump(mode="json")


def load_experiment_config(path: Union[str, Path, None]) -> ExperimentConfig:
    """Read and validate an experiment config; None yields all defaults."""
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        document = json.loads(path.read_text(encoding="utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    if not isinstance(document, dict):
        raise ConfigError(f"config file {path} must contain a JSON object")
    try:
        config = ExperimentConfig.model_validate(document)
    except ValidationError as e:
        raise ConfigError(f"invalid config {path}:\n{e}") from e
    logger.info(f"Loaded experiment config from {path} (seed={config.seed})")
    return config
