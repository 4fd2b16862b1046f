"""
Prior-fitting from scratch and per-task fine-tuning with early stopping.

Fine-tuning modes:
  finetune_local   shared-context batches built around random anchors
  finetune_random  uniformly random context and query rows
  finetune_exact   every training query gets its own exact kNN context
"""

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from artifacts import write_csv
from config import ModelConfig, PriorConfig, RetrievalConfig, TrainConfig, settings
from datagen import derive_seed, gen_prior_task
from datasets import Dataset
from errors import ContractViolation, DataError, NumericError
from evaluation import accuracy, log_loss, score_auc
from model import (
    ContextBatch,
    FeatureStats,
    ModelParams,
    encode_rows,
    embed_rows,
    fit_feature_stats,
    init_params,
    loss_and_grads,
    pad_rows,
    predict,
    predict_local,
)
from numerics import AdamWState, adamw_step
from retrieval import RetrievalIndex, build_index, build_shared_context_batch, k_rule, knn_query_batch

logger = logging.getLogger(__name__)

LOG_COLUMNS = ["step", "split", "loss", "auc", "wallclock_ms"]


class TrainingLog:
    """Training curve rows; rewritten atomically to ``path`` after every append."""

    def __init__(self, path: Optional[Union[str, Path]] = None):
        self.path = Path(path) if path is not None else None
        self.rows: List[Dict[str, object]] = []
        self._started = time.perf_counter()

    def elapsed_ms(self) -> float:
        return (time.perf_counter() - self._started) * 1000.0

    def append(self, step: int, split: str, loss: float, auc: Optional[float] = None) -> None:
        self.rows.append({
            "step": step,
            "split": split,
            "loss": loss,
            "auc": np.nan if auc is None else auc,
            "wallclock_ms": round(self.elapsed_ms(), 3),
        })
        if self.path is not None:
            write_csv(self.path, self.frame())

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=LOG_COLUMNS)


@dataclass
class TrainState:
    params: ModelParams
    optimizer: AdamWState
    step: int = 0
    best_val_auc: float = -math.inf
    best_params: Optional[ModelParams] = None
    evaluations_since_best: int = 0
    lr_halved: bool = False

    @classmethod
    def start(cls, params: ModelParams, config: TrainConfig) -> "TrainState":
        optimizer = AdamWState.create(params.tensors, config.lr, config.weight_decay)
        return cls(params=params, optimizer=optimizer)

    def record_evaluation(self, auc: float) -> bool:
        """Keep a snapshot on strict improvement; returns whether it improved."""
        if auc > self.best_val_auc:
            self.best_val_auc = auc
            self.best_params = self.params.copy()
            self.evaluations_since_best = 0
            return True
        self.evaluations_since_best += 1
        return False

    def apply_step(self, batches: List[Tuple[ContextBatch, np.ndarray]]) -> Optional[float]:
        """One optimizer step; None when a non-finite value forced the step to be skipped."""
        try:
            loss, grads = accumulated_loss_and_grads(self.params, batches)
            self.params = self.params.replace(adamw_step(self.optimizer, self.params.tensors, grads))
        except NumericError as e:
            if self.lr_halved:
                logger.error(f"❌ Non-finite values again at step {self.step}: {e}")
                raise
            self.lr_halved = True
            self.optimizer.lr /= 2.0
            logger.warning(f"Non-finite values at step {self.step} ({e}); halving lr to {self.optimizer.lr:g}")
            return None
        finally:
            self.step += 1
        return loss


def accumulated_loss_and_grads(params: ModelParams,
                               batches: List[Tuple[ContextBatch, np.ndarray]]) -> Tuple[float, Dict[str, np.ndarray]]:
    """Mean query loss and gradient over several batches, weighted by query count."""
    total = sum(int(np.asarray(t).size) for _, t in batches)
    if total == 0:
        raise ContractViolation("a training step needs at least one query")
    loss_sum = 0.0
    grad_sum: Dict[str, np.ndarray] = {}
    for batch, targets in batches:
        weight = np.asarray(targets).size / total
        loss, grads = loss_and_grads(params, batch, targets)
        loss_sum += weight * loss
        for name, g in grads.items():
            grad_sum[name] = grad_sum[name] + weight * g if name in grad_sum else weight * g
    return loss_sum, grad_sum


def _window_mean(values: List[float], window: int) -> float:
    tail = values[-window:]
    return float(np.mean(tail)) if tail else math.nan


# ---------------------------------------------------------------------------
# Prior-fitting
# ---------------------------------------------------------------------------


def sample_prior_batch(model_config: ModelConfig, prior: PriorConfig, batch_size: int,
                       seed: int) -> Tuple[ContextBatch, np.ndarray]:
    """B prior tasks sharing one size, class count and context/query split length.

    Each task is standardized with statistics of its own context rows.
    """
    rng = np.random.default_rng(seed)
    n = int(rng.integers(prior.n_samples[0], prior.n_samples[1] + 1))
    n_classes = int(rng.integers(prior.n_classes[0], prior.n_classes[1] + 1))
    fraction = float(rng.uniform(*prior.query_fraction))
    n_qy = min(max(1, round(n * fraction)), n - 1)
    l_ctx = min(n - n_qy, model_config.l_ctx_max)

    features = np.empty((batch_size, n, model_config.d_max))
    labels = np.empty((batch_size, n), dtype=np.int64)
    for b in range(batch_size):
        task = gen_prior_task(prior, derive_seed(seed, "task", b), n_samples=n, n_classes=n_classes)
        order = rng.permutation(n)
        stats = fit_feature_stats(task.features[order[:l_ctx]])
        features[b] = encode_rows(task.features[order], stats, model_config)
        labels[b] = task.labels[order]
    targets = labels[:, l_ctx:].copy()
    labels[:, l_ctx:] = model_config.c_max
    return ContextBatch(features, labels, l_ctx, n_classes, model_config.c_max), targets


@dataclass
class PriorFitResult:
    params: ModelParams
    losses: List[float]
    log: TrainingLog
    probe: Dict[str, float] = field(default_factory=dict)

    def smoothed_loss(self, window: int) -> float:
        return _window_mean(self.losses, window)


def prior_fit(model_config: ModelConfig, prior_config: PriorConfig, train_config: TrainConfig,
              log: Optional[TrainingLog] = None, seed: Optional[int] = None) -> PriorFitResult:
    """Minimize query cross-entropy over a stream of fresh prior tasks."""
    seed = train_config.seed if seed is None else seed
    prior = prior_config.fitted_to(model_config)
    log = log or TrainingLog()
    state = TrainState.start(init_params(model_config, derive_seed(seed, "init")), train_config)
    losses: List[float] = []
    logger.info(f"Prior-fitting {state.params.size} parameters for {train_config.max_steps} steps "
                f"(batch {train_config.batch_size}, lr {train_config.lr:g})")

    while state.step < train_config.max_steps:
        step = state.step
        batch = sample_prior_batch(model_config, prior, train_config.batch_size, derive_seed(seed, "batch", step))
        loss = state.apply_step([batch])
        if loss is not None:
            losses.append(loss)
        if step % train_config.eval_every == 0 or state.step == train_config.max_steps:
            smoothed = _window_mean(losses, train_config.loss_window)
            log.append(step, "train", smoothed)
            logger.info(f"step {step}: smoothed loss {smoothed:.4f}")

    logger.info(f"✅ Prior-fitting finished after {state.step} steps")
    return PriorFitResult(params=state.params, losses=losses, log=log)


def evaluate_prior(params: ModelParams, prior_config: PriorConfig, n_tasks: int, seed: int,
                   batch_size: int = 512) -> Dict[str, float]:
    """Mean query accuracy against the majority-class rate on fresh prior tasks."""
    cfg = params.config
    prior = prior_config.fitted_to(cfg)
    accuracies, majorities, aucs = [], [], []
    for t in range(n_tasks):
        task_seed = derive_seed(seed, "probe", t)
        task = gen_prior_task(prior, task_seed)
        rng = np.random.default_rng(task_seed)
        order = rng.permutation(task.n_rows)
        n_qy = min(max(1, round(task.n_rows * float(rng.uniform(*prior.query_fraction)))), task.n_rows - 1)
        l_ctx = min(task.n_rows - n_qy, cfg.l_ctx_max)
        ctx, qry = order[:l_ctx], order[l_ctx:]
        stats = fit_feature_stats(task.features[ctx])
        probs = predict(params, encode_rows(task.features[ctx], stats, cfg), task.labels[ctx],
                        encode_rows(task.features[qry], stats, cfg), task.n_classes, batch_size)
        accuracies.append(accuracy(probs, task.labels[qry]))
        majorities.append(np.bincount(task.labels[qry]).max() / qry.size)
        aucs.append(score_auc(probs, task.labels[qry]))
    result = {
        "tasks": n_tasks,
        "accuracy": float(np.mean(accuracies)) if n_tasks else math.nan,
        "majority_rate": float(np.mean(majorities)) if n_tasks else math.nan,
        "auc": float(np.mean(aucs)) if n_tasks else math.nan,
    }
    logger.info(f"Prior probe over {n_tasks} tasks: accuracy {result['accuracy']:.3f}, "
                f"majority {result['majority_rate']:.3f}, auc {result['auc']:.3f}")
    return result


# ---------------------------------------------------------------------------
# Fine-tuning
# ---------------------------------------------------------------------------


@dataclass
class FinetuneData:
    """Embedded train/validation rows of one task and the retrieval index over train."""

    stats: FeatureStats
    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    n_classes: int
    index: RetrievalIndex

    @classmethod
    def prepare(cls, train: Dataset, val: Dataset, retrieval: RetrievalConfig) -> "FinetuneData":
        stats = fit_feature_stats(train.features, train.cat_mask, retrieval.embedding == "one_hot",
                                  retrieval.one_hot_max_width)
        train_x = embed_rows(train.features, stats)
        kind = "one_hot" if stats.one_hot else "raw"
        return cls(stats, train_x, train.labels, embed_rows(val.features, stats), val.labels,
                   train.n_classes, build_index(train_x, kind))

    @property
    def n_train(self) -> int:
        return self.train_x.shape[0]


@dataclass
class FinetuneResult:
    params: ModelParams
    initial_val_auc: float
    best_val_auc: float
    steps: int
    stopped_early: bool
    log: TrainingLog


def _sequence_lengths(config: TrainConfig, n_train: int, k: int) -> Tuple[int, int]:
    # every sequence holds an anchor, at least one context row and l_qy queries
    cap = (n_train - 1) // 2
    if cap < 1:
        raise DataError(f"training split of {n_train} rows is too small to fine-tune on")
    l_qy = max(1, config.n_queries // config.batch_size)
    if l_qy > cap:
        logger.debug(f"Queries per sequence reduced from {l_qy} to {cap} for {n_train} training rows")
        l_qy = cap
    l_ctx = config.context_length or max(1, k - l_qy)
    room = n_train - 1 - l_qy
    if l_ctx > room:
        logger.debug(f"Context length {l_ctx} reduced to {room} for {n_train} training rows")
        l_ctx = room
    return l_ctx, l_qy


def _step_batches(mode: str, data: FinetuneData, encoded_train: np.ndarray, config: TrainConfig,
                  l_ctx: int, l_qy: int, c_max: int, n_heads: int,
                  rng: np.random.Generator) -> List[Tuple[ContextBatch, np.ndarray]]:
    B = config.batch_size
    if mode == "finetune_local":
        shared = build_shared_context_batch(data.index, B, l_ctx, l_qy, rng)
        if config.check_batches:
            shared.validate(data.index)
        return [ContextBatch.from_ids(encoded_train, data.train_y, shared.context_ids, shared.query_ids,
                                      data.n_classes, c_max)]
    if mode == "finetune_random":
        draws = np.stack([rng.choice(data.n_train, size=l_ctx + l_qy, replace=False) for _ in range(B)])
        return [ContextBatch.from_ids(encoded_train, data.train_y, draws[:, :l_ctx], draws[:, l_ctx:],
                                      data.n_classes, c_max)]
    if mode == "finetune_exact":
        queries = rng.choice(data.n_train, size=min(B * l_qy, data.n_train), replace=False)
        per_block = max(1, settings.ATTENTION_BUDGET // (n_heads * (l_ctx + 1) ** 2))
        batches = []
        for start in range(0, queries.size, per_block):
            q = queries[start:start + per_block]
            contexts = np.sort(knn_query_batch(data.index, data.train_x[q], l_ctx, exclude_ids=q), axis=1)
            batches.append(ContextBatch.from_ids(encoded_train, data.train_y, contexts, q[:, None],
                                                 data.n_classes, c_max))
        return batches
    raise ContractViolation(f"{mode!r} is not a fine-tuning mode")


def mode_probs(params: ModelParams, data: FinetuneData, mode: str, k: int, query_x: np.ndarray,
               batch_size: int = 512, full_context_max: int = 1024, seed: int = 0) -> np.ndarray:
    """Random-context fine-tuning is judged with full context, the others with local contexts."""
    if mode == "finetune_random":
        ids = np.arange(data.n_train)
        if data.n_train > full_context_max:
            ids = np.sort(np.random.default_rng(seed).choice(data.n_train, full_context_max, replace=False))
        d_max = params.config.d_max
        return predict(params, pad_rows(data.train_x[ids], d_max), data.train_y[ids],
                       pad_rows(query_x, d_max), data.n_classes, batch_size)
    return predict_local(params, data.index, data.train_y, query_x, k, data.n_classes, batch_size)


def finetune(params: ModelParams, data: FinetuneData, train_config: TrainConfig, k_max: int,
             log: Optional[TrainingLog] = None, batch_size: int = 512, full_context_max: int = 1024) -> FinetuneResult:
    """Fine-tune all parameters, returning the snapshot with the best validation AUC."""
    mode = train_config.mode
    if mode == "prior_fit":
        raise ContractViolation("finetune needs a fine-tuning mode, not prior_fit")
    cfg = params.config
    log = log or TrainingLog()
    k = k_rule(data.n_train, k_max)
    state = TrainState.start(params.copy(), train_config)
    rng = np.random.default_rng(derive_seed(train_config.seed, "finetune"))
    eval_seed = derive_seed(train_config.seed, "validation")
    encoded_train = pad_rows(data.train_x, cfg.d_max)

    def evaluate() -> float:
        probs = mode_probs(state.params, data, mode, k, data.val_x, batch_size, full_context_max, eval_seed)
        auc = score_auc(probs, data.val_y)
        log.append(state.step, "val", log_loss(probs, data.val_y), auc)
        improved = state.record_evaluation(auc)
        logger.info(f"step {state.step}: val auc {auc:.4f}{' (best)' if improved else ''}")
        return auc

    initial = evaluate()
    if train_config.max_steps == 0:
        return FinetuneResult(state.best_params, initial, initial, 0, False, log)

    l_ctx, l_qy = _sequence_lengths(train_config, data.n_train, k)
    logger.info(f"Fine-tuning ({mode}) with k={k}, {train_config.batch_size} sequences of "
                f"{l_ctx} context + {l_qy} query rows")
    recent: List[float] = []
    stopped_early = False
    while state.step < train_config.max_steps:
        batches = _step_batches(mode, data, encoded_train, train_config, l_ctx, l_qy, cfg.c_max, cfg.n_heads, rng)
        loss = state.apply_step(batches)
        if loss is not None:
            recent.append(loss)
        if state.step % train_config.eval_every == 0 or state.step == train_config.max_steps:
            log.append(state.step, "train", _window_mean(recent, len(recent)))
            recent.clear()
            evaluate()
            if state.evaluations_since_best >= train_config.patience:
                stopped_early = True
                logger.info(f"Early stop at step {state.step}: no improvement in {train_config.patience} evaluations")
                break

    logger.info(f"✅ Fine-tuning done: val auc {initial:.4f} -> {state.best_val_auc:.4f} in {state.step} steps")
    return FinetuneResult(state.best_params, initial, state.best_val_auc, state.step, stopped_early, log)
