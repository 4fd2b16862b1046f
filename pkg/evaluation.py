"""
Metrics, aggregate statistics and dataset-level analyses.

AUC is the Mann-Whitney statistic (ties count one half); the multiclass
score is macro one-vs-rest over the classes present in the labels.
Aggregates across datasets are interquartile means with stratified
bootstrap confidence intervals.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.stats import rankdata

from artifacts import write_csv, write_json
from errors import ContractViolation, DataError, MetricError
from retrieval import RetrievalIndex, knn_query_batch

logger = logging.getLogger(__name__)

Statistic = Literal["iqm", "mean"]

RECORD_COLUMNS = ["dataset", "fold", "method", "metric", "value"]
BOUNDED_METRICS = {"auc", "accuracy", "f1"}


# ---------------------------------------------------------------------------
# Per-prediction metrics
# ---------------------------------------------------------------------------


def auc_binary(scores: np.ndarray, labels: np.ndarray) -> float:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    positive = np.asarray(labels).reshape(-1).astype(bool)
    if scores.shape != positive.shape:
        raise ContractViolation(f"{scores.size} scores for {positive.size} labels")
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs both classes present")
    ranks = rankdata(scores, method="average")
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_multiclass(probs: np.ndarray, labels: np.ndarray) -> float:
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    present = np.unique(labels)
    if present.size < 2:
        raise MetricError(f"AUC needs at least two classes, found {present.tolist()}")
    if probs.shape[1] == 2:
        return auc_binary(probs[:, 1], labels == 1)
    return float(np.mean([auc_binary(probs[:, c], labels == c) for c in present]))


def predicted_classes(probs: np.ndarray) -> np.ndarray:
    # argmax returns the first maximum, so ties go to the smaller class index
    return np.argmax(np.atleast_2d(probs), axis=1)


def accuracy(probs: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(predicted_classes(probs) == np.asarray(labels)))


def f1_macro(probs: np.ndarray, labels: np.ndarray) -> float:
    """Per-class F1 averaged over all classes; a class never predicted and absent scores 0."""
    probs = np.atleast_2d(probs)
    labels = np.asarray(labels, dtype=np.int64)
    predicted = predicted_classes(probs)
    scores = []
    for c in range(probs.shape[1]):
        tp = np.sum((predicted == c) & (labels == c))
        fp = np.sum((predicted == c) & (labels != c))
        fn = np.sum((predicted != c) & (labels == c))
        scores.append(0.0 if tp == 0 else 2.0 * tp / (2.0 * tp + fp + fn))
    return float(np.mean(scores))


def log_loss(probs: np.ndarray, labels: np.ndarray, floor: float = 1e-12) -> float:
    probs = np.atleast_2d(probs)
    picked = probs[np.arange(probs.shape[0]), np.asarray(labels, dtype=np.int64)]
    return float(-np.mean(np.log(np.maximum(picked, floor))))


def score_auc(probs: np.ndarray, labels: np.ndarray) -> float:
    """AUC, or accuracy when the labels hold a single class."""
    try:
        return auc_multiclass(probs, labels)
    except MetricError as e:
        logger.warning(f"{e}; falling back to accuracy")
        return accuracy(probs, labels)


def all_metrics(probs: np.ndarray, labels: np.ndarray) -> Dict[str, float]:
    return {"auc": score_auc(probs, labels), "accuracy": accuracy(probs, labels), "f1": f1_macro(probs, labels)}


def knn_baseline_predict(index: RetrievalIndex, train_labels: np.ndarray, queries: np.ndarray, k: int,
                         n_classes: int) -> np.ndarray:
    """Neighbour label frequencies among the k nearest training rows."""
    if k < 1:
        raise ContractViolation("kNN baseline needs k >= 1")
    neighbours = knn_query_batch(index, queries, k)
    neighbour_labels = np.asarray(train_labels, dtype=np.int64)[neighbours]
    counts = np.stack([np.bincount(row, minlength=n_classes) for row in neighbour_labels])
    return counts / float(k)


# ---------------------------------------------------------------------------
# Aggregates
# ---------------------------------------------------------------------------


def iqm(values: Sequence[float]) -> float:
    """Mean after dropping floor(n/4) values from each end."""
    values = np.sort(np.asarray(values, dtype=np.float64).reshape(-1))
    n = values.size
    if n == 0:
        raise ContractViolation("iqm of an empty vector")
    cut = n // 4
    return float(values[cut:n - cut].mean())


def _rowwise(statistic: Statistic, samples: np.ndarray) -> np.ndarray:
    if statistic == "mean":
        return samples.mean(axis=1)
    if statistic == "iqm":
        ordered = np.sort(samples, axis=1)
        cut = samples.shape[1] // 4
        return ordered[:, cut:samples.shape[1] - cut].mean(axis=1)
    raise ContractViolation(f"unknown statistic {statistic!r}")


def pooled_statistic(per_dataset_scores: Sequence[Sequence[float]], statistic: Statistic = "iqm") -> float:
    pooled = np.concatenate([np.asarray(s, dtype=np.float64).reshape(-1) for s in per_dataset_scores])
    return float(_rowwise(statistic, pooled[None, :])[0])


def stratified_bootstrap_ci(per_dataset_scores: Sequence[Sequence[float]], statistic: Statistic = "iqm",
                            n_resamples: int = 2000, alpha: float = 0.05, seed: int = 0) -> Tuple[float, float]:
    """Resample fold scores with replacement within each dataset, pool, take quantiles."""
    groups = [np.asarray(s, dtype=np.float64).reshape(-1) for s in per_dataset_scores]
    if not groups or any(g.size == 0 for g in groups):
        raise ContractViolation("bootstrap needs at least one dataset with at least one score")
    if not 0.0 < alpha < 1.0:
        raise ContractViolation(f"alpha must lie in (0, 1), got {alpha}")
    rng = np.random.default_rng(seed)
    samples = np.concatenate(
        [g[rng.integers(0, g.size, size=(n_resamples, g.size))] for g in groups], axis=1
    )
    low, high = np.quantile(_rowwise(statistic, samples), [alpha / 2.0, 1.0 - alpha / 2.0])
    return float(low), float(high)


@dataclass
class EvalReport:
    """Long-format per-fold records plus their IQM/mean/CI aggregates."""

    records: List[Dict[str, object]] = field(default_factory=list)

    def add(self, dataset: str, fold: int, method: str, metric: str, value: float) -> None:
        value = float(value)
        if metric in BOUNDED_METRICS and not 0.0 <= value <= 1.0:
            raise MetricError(f"{metric}={value} outside [0, 1] for {dataset}/{method}")
        self.records.append({"dataset": dataset, "fold": fold, "method": method, "metric": metric, "value": value})

    def extend(self, dataset: str, fold: int, method: str, metrics: Dict[str, float]) -> None:
        for metric, value in metrics.items():
            self.add(dataset, fold, method, metric, value)

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.records, columns=RECORD_COLUMNS)

    def per_dataset_scores(self, method: str, metric: str) -> Dict[str, np.ndarray]:
        frame = self.frame()
        rows = frame[(frame["method"] == method) & (frame["metric"] == metric)]
        return {name: group.sort_values("fold")["value"].to_numpy() for name, group in rows.groupby("dataset", sort=True)}

    def aggregates(self, n_resamples: int = 2000, alpha: float = 0.05, seed: int = 0) -> List[Dict[str, object]]:
        frame = self.frame()
        out = []
        for (method, metric), _ in frame.groupby(["method", "metric"], sort=True):
            scores = list(self.per_dataset_scores(method, metric).values())
            point = pooled_statistic(scores, "iqm")
            low, high = stratified_bootstrap_ci(scores, "iqm", n_resamples, alpha, seed)
            if not low <= point <= high:
                logger.debug(f"{method}/{metric}: bootstrap interval [{low:.6f}, {high:.6f}] "
                             f"widened to contain the pooled IQM {point:.6f}")
            out.append({
                "method": method,
                "metric": metric,
                "iqm": point,
                "mean": pooled_statistic(scores, "mean"),
                "ci_low": min(low, point),
                "ci_high": max(high, point),
                "n_datasets": len(scores),
            })
        return out

    def write_records(self, path: Union[str, Path]) -> Path:
        return write_csv(path, self.frame())

    def write_aggregates(self, path: Union[str, Path], n_resamples: int = 2000, alpha: float = 0.05,
                         seed: int = 0) -> Path:
        document = {"alpha": alpha, "bootstrap_resamples": n_resamples, "seed": seed,
                    "aggregates": self.aggregates(n_resamples, alpha, seed)}
        return write_json(path, document)

    @classmethod
    def read_records(cls, path: Union[str, Path]) -> "EvalReport":
        path = Path(path)
        if not path.is_file():
            raise DataError(f"records file not found: {path}")
        frame = pd.read_csv(path, dtype={"dataset": str, "method": str, "metric": str})
        if list(frame.columns) != RECORD_COLUMNS:
            raise DataError(f"{path}: expected columns {RECORD_COLUMNS}, found {list(frame.columns)}")
        return cls(records=frame.to_dict("records"))


# ---------------------------------------------------------------------------
# Dataset-level analyses
# ---------------------------------------------------------------------------


@dataclass
class ScoreTable:
    """Mean AUC per (dataset, method) plus dataset sizes."""

    auc: pd.DataFrame
    sizes: pd.Series

    def __post_init__(self):
        missing = self.auc.isna().any(axis=1)
        if missing.any():
            raise MetricError(f"score table has missing cells for datasets {list(self.auc.index[missing])}")
        absent = set(self.auc.index) - set(self.sizes.index)
        if absent:
            raise MetricError(f"no size recorded for datasets {sorted(absent)}")

    @classmethod
    def from_report(cls, report: EvalReport, sizes: Dict[str, int], methods: Optional[Sequence[str]] = None,
                    metric: str = "auc") -> "ScoreTable":
        frame = report.frame()
        frame = frame[frame["metric"] == metric]
        if methods is not None:
            frame = frame[frame["method"].isin(methods)]
        table = frame.pivot_table(index="dataset", columns="method", values="value", aggfunc="mean")
        complete = table.dropna()
        if len(complete) < len(table):
            logger.warning(f"Dropping {len(table) - len(complete)} datasets without scores for every method")
        return cls(complete.sort_index(), pd.Series(sizes).astype(np.int64))

    @property
    def methods(self) -> List[str]:
        return list(self.auc.columns)

    def relative_to(self, reference: str) -> pd.DataFrame:
        if reference not in self.auc.columns:
            raise ContractViolation(f"reference method {reference!r} not in {self.methods}")
        return self.auc.sub(self.auc[reference], axis=0)


def _bin_summary(table: ScoreTable, assignment: pd.Series, n_bins: int, reference: str,
                 bounds: List[Tuple[Optional[float], Optional[float]]], key: pd.Series) -> List[Dict[str, object]]:
    relative = table.relative_to(reference)
    bins = []
    for b in range(n_bins):
        members = sorted(assignment.index[assignment == b])
        bins.append({
            "bin": b,
            "low": bounds[b][0],
            "high": bounds[b][1],
            "datasets": members,
            "values": [float(key[d]) for d in members],
            "relative_auc": {m: (float(relative.loc[members, m].mean()) if members else None)
                             for m in table.methods},
        })
    return bins


def complexity_bins(table: ScoreTable, n_bins: int = 5, reference: str = "knn_baseline") -> List[Dict[str, object]]:
    """Quantile bins of per-dataset AUC spread (best minus worst method)."""
    n = len(table.auc)
    if n < n_bins:
        raise ContractViolation(f"{n} datasets cannot fill {n_bins} complexity bins")
    spread = table.auc.max(axis=1) - table.auc.min(axis=1)
    order = sorted(spread.index, key=lambda d: (spread[d], d))
    assignment = pd.Series({d: rank * n_bins // n for rank, d in enumerate(order)})
    bounds = []
    for b in range(n_bins):
        values = spread[assignment.index[assignment == b]]
        bounds.append((float(values.min()), float(values.max())))
    return _bin_summary(table, assignment, n_bins, reference, bounds, spread)


def size_bins(table: ScoreTable, edges: Sequence[int] = (2000,),
              reference: str = "knn_baseline") -> List[Dict[str, object]]:
    """Bins [edge_i, edge_{i+1}) over dataset row counts; a size equal to an edge goes up."""
    edges = sorted(edges)
    sizes = table.sizes[table.auc.index]
    assignment = pd.Series(np.searchsorted(edges, sizes.to_numpy(), side="right"), index=sizes.index)
    limits = [None, *edges, None]
    bounds = [(limits[b], limits[b + 1]) for b in range(len(edges) + 1)]
    return _bin_summary(table, assignment, len(edges) + 1, reference, bounds, sizes)
