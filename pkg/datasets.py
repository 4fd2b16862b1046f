import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from artifacts import write_csv
from config import ModelConfig
from errors import DataError

logger = logging.getLogger(__name__)

_MISSING_TOKENS = {"", "na", "nan", "n/a", "null", "none", "?"}


@dataclass
class Dataset:
    """Feature matrix, contiguous integer labels and the categorical-column mask."""

    name: str
    features: np.ndarray
    labels: np.ndarray
    cat_mask: np.ndarray
    n_classes: int
    provenance: str = ""
    feature_names: List[str] = field(default_factory=list)
    label_names: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.cat_mask = np.asarray(self.cat_mask, dtype=bool)
        if self.labels.shape != (self.features.shape[0],):
            raise DataError(f"{self.name}: {self.labels.shape[0]} labels for {self.features.shape[0]} rows")
        if self.cat_mask.shape != (self.features.shape[1],):
            raise DataError(f"{self.name}: categorical mask does not match {self.features.shape[1]} features")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise DataError(f"{self.name}: labels must lie in [0, {self.n_classes})")
        if not self.feature_names:
            self.feature_names = [f"x{j}" for j in range(self.features.shape[1])]

    @property
    def n_rows(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)

    def subset(self, ids: np.ndarray, suffix: str = "") -> "Dataset":
        ids = np.asarray(ids, dtype=np.int64)
        return replace(self, name=self.name + suffix, features=self.features[ids], labels=self.labels[ids])


def model_constraint_violation(ds: Dataset, config: ModelConfig, one_hot: bool = False,
                               one_hot_max_width: int = 100) -> Optional[str]:
    """Reason the dataset cannot be fed to the model, or None."""
    if ds.n_classes < 2 or np.count_nonzero(ds.class_counts()) < 2:
        return "fewer than two classes"
    if ds.n_classes > config.c_max:
        return f"{ds.n_classes} classes exceed C_max={config.c_max}"
    if not np.all(np.isfinite(ds.features)):
        return "contains missing or non-finite values"
    width = ds.n_features
    if one_hot and ds.cat_mask.any():
        expanded = sum(len(np.unique(ds.features[:, j])) if c else 1 for j, c in enumerate(ds.cat_mask))
        if expanded <= one_hot_max_width:
            width = expanded
    if width > config.d_max:
        return f"{width} encoded features exceed D_max={config.d_max}"
    return None


def _is_missing(cell: str) -> bool:
    return cell.strip().lower() in _MISSING_TOKENS


def ingest_csv(path: Union[str, Path], label_col: str, cat_cols: Sequence[str] = (),
               c_max: Optional[int] = None, name: Optional[str] = None) -> Dataset:
    """Read a UTF-8 CSV with a header row into a validated Dataset.

    Numeric cells must parse as finite reals; categorical and label values
    are mapped to integers by first appearance. Any missing or unparseable
    cell rejects the whole file (no imputation).
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"dataset file not found: {path}")
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except (UnicodeDecodeError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DataError(f"{path}: cannot parse CSV: {e}") from e

    columns = list(frame.columns)
    if label_col not in columns:
        raise DataError(f"{path}: label column {label_col!r} not in header {columns}")
    unknown = [c for c in cat_cols if c not in columns]
    if unknown:
        raise DataError(f"{path}: categorical columns {unknown} not in header")
    feature_cols = [c for c in columns if c != label_col]
    if not feature_cols:
        raise DataError(f"{path}: no feature columns")
    if frame.shape[0] == 0:
        raise DataError(f"{path}: no data rows")

    # line numbers count the header as line 1
    features = np.empty((frame.shape[0], len(feature_cols)))
    for j, col in enumerate(feature_cols):
        cells = frame[col].tolist()
        if col in cat_cols:
            codes: Dict[str, int] = {}
            for r, cell in enumerate(cells):
                if _is_missing(cell):
                    raise DataError(f"{path}: missing value at line {r + 2}, column {col!r}")
                features[r, j] = codes.setdefault(cell.strip(), len(codes))
            continue
        for r, cell in enumerate(cells):
            if _is_missing(cell):
                raise DataError(f"{path}: missing value at line {r + 2}, column {col!r}")
            try:
                value = float(cell)
            except ValueError:
                raise DataError(f"{path}: unparseable number {cell!r} at line {r + 2}, column {col!r}") from None
            if not math.isfinite(value):
                raise DataError(f"{path}: non-finite value {cell!r} at line {r + 2}, column {col!r}")
            features[r, j] = value

    label_codes: Dict[str, int] = {}
    labels = np.empty(frame.shape[0], dtype=np.int64)
    for r, cell in enumerate(frame[label_col].tolist()):
        if _is_missing(cell):
            raise DataError(f"{path}: missing label at line {r + 2}, column {label_col!r}")
        labels[r] = label_codes.setdefault(cell.strip(), len(label_codes))

    n_classes = len(label_codes)
    if n_classes < 2:
        raise DataError(f"{path}: label column {label_col!r} has a single class")
    if c_max is not None and n_classes > c_max:
        raise DataError(f"{path}: {n_classes} classes exceed the maximum of {c_max}")

    dataset = Dataset(
        name=name or path.stem,
        features=features,
        labels=labels,
        cat_mask=np.array([c in cat_cols for c in feature_cols]),
        n_classes=n_classes,
        provenance=f"csv:{path}",
        feature_names=feature_cols,
        label_names=list(label_codes),
    )
    logger.info(f"Ingested {dataset.name}: {dataset.n_rows} rows, {dataset.n_features} features, {n_classes} classes")
    return dataset


def write_dataset_csv(ds: Dataset, path: Union[str, Path], label_col: str = "label") -> Path:
    frame = pd.DataFrame(ds.features, columns=ds.feature_names)
    for j, is_cat in enumerate(ds.cat_mask):
        if is_cat:
            frame[ds.feature_names[j]] = frame[ds.feature_names[j]].astype(np.int64)
    frame[label_col] = ds.labels
    return write_csv(path, frame)
