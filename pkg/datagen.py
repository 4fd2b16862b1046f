"""
Synthetic tasks: the random-MLP prior used for prior-fitting, the
concentric-circles complexity benchmark, and stratified 80:10:10 splitting.

Every generator is a pure function of its config and seed.
"""

import hashlib
import logging
import math
from typing import Dict, Optional, Tuple, Union

import numpy as np

from config import PriorConfig
from datasets import Dataset
from errors import ContractViolation, DataError

logger = logging.getLogger(__name__)

SeedKey = Union[int, str]

_MAX_RESAMPLES = 100


def derive_seed(master: int, *keys: SeedKey) -> int:
    """Independent child seed for (master, *keys); strings are hashed, not salted."""
    entropy = [int(master) % 2 ** 64]
    for key in keys:
        if isinstance(key, str):
            key = int.from_bytes(hashlib.sha256(key.encode("utf-8")).digest()[:8], "little")
        entropy.append(int(key) % 2 ** 64)
    return int(np.random.SeedSequence(entropy).generate_state(1, dtype=np.uint32)[0])


def _draw(rng: np.random.Generator, bounds: Tuple[int, int]) -> int:
    return int(rng.integers(bounds[0], bounds[1] + 1))


def quantile_labels(values: np.ndarray, n_classes: int) -> np.ndarray:
    """Bin values into n_classes by empirical quantiles (rank-based, counts within 1)."""
    n = values.shape[0]
    ranks = np.empty(n, dtype=np.int64)
    ranks[np.argsort(values, kind="stable")] = np.arange(n)
    return ranks * n_classes // n


def gen_prior_task(config: PriorConfig, seed: int, n_samples: Optional[int] = None,
                   n_classes: Optional[int] = None) -> Dataset:
    """One classification task from a randomly initialized tanh MLP.

    Inputs are standard normal; one output unit plus Gaussian noise (scaled by
    the output's spread) is binned into classes by quantiles, and class ids
    are then randomly permuted.
    """
    for attempt in range(_MAX_RESAMPLES):
        task_seed = seed + attempt
        rng = np.random.default_rng(task_seed)
        n_features = _draw(rng, config.n_features)
        depth = _draw(rng, config.depth)
        width = _draw(rng, config.width)
        classes = n_classes if n_classes is not None else _draw(rng, config.n_classes)
        n = n_samples if n_samples is not None else _draw(rng, config.n_samples)
        if classes < 2 or n < classes:
            raise ContractViolation(f"cannot draw {classes} balanced classes from {n} rows")

        x = rng.standard_normal((n, n_features))
        h = x
        for _ in range(depth):
            fan_in = h.shape[1]
            w = rng.standard_normal((fan_in, width)) / math.sqrt(fan_in)
            b = rng.standard_normal(width)
            h = np.tanh(h @ w + b)
        out = h @ (rng.standard_normal(width) / math.sqrt(width))
        spread = out.std()
        if not np.isfinite(spread) or spread == 0.0:
            logger.debug(f"Degenerate prior output for seed {task_seed}; resampling")
            continue
        out = out + config.noise_std * spread * rng.standard_normal(n)
        labels = rng.permutation(classes)[quantile_labels(out, classes)]
        return Dataset(
            name=f"prior-{seed}",
            features=x,
            labels=labels,
            cat_mask=np.zeros(n_features, dtype=bool),
            n_classes=classes,
            provenance=f"prior:seed={task_seed}",
        )
    raise DataError(f"prior produced degenerate tasks for {_MAX_RESAMPLES} consecutive seeds from {seed}")


def gen_circles(n: int, pairs: int, noise_std: float = 0.01, seed: int = 0) -> Dataset:
    """2*pairs concentric rings with radii (j+1)/(2*pairs), ring j labelled j % 2."""
    if pairs < 1 or n < 4 * pairs:
        raise ContractViolation(f"circles need pairs >= 1 and n >= 4*pairs (n={n}, pairs={pairs})")
    rng = np.random.default_rng(seed)
    rings = 2 * pairs
    counts = np.full(rings, n // rings)
    counts[: n % rings] += 1
    points, labels = [], []
    for j, count in enumerate(counts):
        theta = rng.uniform(0.0, 2.0 * math.pi, size=count)
        radius = (j + 1) / rings + noise_std * rng.standard_normal(count)
        points.append(np.column_stack([radius * np.cos(theta), radius * np.sin(theta)]))
        labels.append(np.full(count, j % 2))
    order = rng.permutation(n)
    return Dataset(
        name=f"circles-p{pairs}-s{seed}",
        features=np.concatenate(points)[order],
        labels=np.concatenate(labels)[order],
        cat_mask=np.zeros(2, dtype=bool),
        n_classes=2,
        provenance=f"circles:n={n},pairs={pairs},noise={noise_std},seed={seed}",
    )


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_assignment(labels: np.ndarray, ratios: Tuple[float, float, float] = (0.8, 0.1, 0.1),
                     seed: int = 0) -> np.ndarray:
    """Stratified split ids (0=train, 1=val, 2=test) with every class in every split."""
    labels = np.asarray(labels)
    if len(ratios) != 3 or min(ratios) <= 0 or not math.isclose(sum(ratios), 1.0):
        raise ContractViolation(f"split ratios must be three positive numbers summing to 1, got {ratios}")
    n = labels.shape[0]
    classes, counts = np.unique(labels, return_counts=True)
    for c, count in zip(classes, counts):
        if count < 3:
            raise DataError(f"class {c} has {count} rows; every split needs at least one")

    alloc = np.zeros((classes.size, 3), dtype=np.int64)
    for s in (1, 2):
        exact = counts * ratios[s]
        alloc[:, s] = np.maximum(np.floor(exact).astype(np.int64), 1)
        target = _round_half_up(n * ratios[s])
        # largest fractional part first, ties to the smaller class
        order = np.lexsort((np.arange(classes.size), -(exact - np.floor(exact))))
        deficit = target - alloc[:, s].sum()
        while deficit > 0:
            moved = False
            for i in order:
                if deficit == 0:
                    break
                if counts[i] - alloc[i, 1:].sum() > 1:
                    alloc[i, s] += 1
                    deficit -= 1
                    moved = True
            if not moved:
                break
        for i in order[::-1]:
            if deficit >= 0:
                break
            if alloc[i, s] > 1:
                alloc[i, s] -= 1
                deficit += 1
    alloc[:, 0] = counts - alloc[:, 1:].sum(axis=1)

    rng = np.random.default_rng(seed)
    assignment = np.empty(n, dtype=np.int64)
    for i, c in enumerate(classes):
        members = rng.permutation(np.flatnonzero(labels == c))
        assignment[members[: alloc[i, 0]]] = 0
        assignment[members[alloc[i, 0]: alloc[i, 0] + alloc[i, 1]]] = 1
        assignment[members[alloc[i, 0] + alloc[i, 1]:]] = 2
    return assignment


def split_dataset(ds: Dataset, ratios: Tuple[float, float, float] = (0.8, 0.1, 0.1),
                  seed: int = 0) -> Tuple[Dataset, Dataset, Dataset]:
    assignment = split_assignment(ds.labels, ratios, seed)
    return tuple(ds.subset(np.flatnonzero(assignment == s), f":{part}")
                 for s, part in enumerate(("train", "val", "test")))


def _parse_spec_args(text: str) -> Dict[str, str]:
    args = {}
    for item in filter(None, (part.strip() for part in text.split(","))):
        if "=" not in item:
            raise DataError(f"generator argument {item!r} is not key=value")
        key, value = item.split("=", 1)
        args[key.strip()] = value.strip()
    return args


def generate_from_spec(spec: str, prior: Optional[PriorConfig] = None, default_seed: int = 0) -> Dataset:
    """Build a dataset from 'circles:n=1000,pairs=3,noise=0.01,seed=0' or 'prior:n=4000,classes=3,seed=1'."""
    kind, _, rest = spec.partition(":")
    try:
        args = _parse_spec_args(rest)
        seed = int(args.pop("seed", default_seed))
        if kind == "circles":
            ds = gen_circles(int(args.pop("n", 1000)), int(args.pop("pairs", 3)),
                             float(args.pop("noise", 0.01)), seed)
        elif kind == "prior":
            n = args.pop("n", None)
            classes = args.pop("classes", None)
            ds = gen_prior_task(prior or PriorConfig(), seed, None if n is None else int(n),
                                None if classes is None else int(classes))
        else:
            raise DataError(f"unknown generator {kind!r} (expected circles or prior)")
    except ValueError as e:
        raise DataError(f"bad generator spec {spec!r}: {e}") from e
    if args:
        raise DataError(f"unknown generator arguments {sorted(args)} in {spec!r}")
    ds.name = spec.replace(":", "-").replace(",", "-").replace("=", "")
    return ds
