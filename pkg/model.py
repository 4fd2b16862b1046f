"""
In-context tabular classifier.

A row token is the projection of its padded features plus a label embedding
(queries always take the "label absent" row). Pre-norm transformer blocks run
under a context/query mask: context rows attend to all context rows, query
rows attend to the context only. The head's softmax covers the first
``n_classes`` logits; the remaining logits are masked to -inf.
"""

import json
import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Tuple, Union

import numpy as np

from artifacts import atomic_write_bytes, bytes_sha256
from config import ModelConfig, settings
from errors import ContractViolation, DataError
from numerics import (
    ADD,
    AFFINE,
    ATTENTION,
    CROSS_ENTROPY,
    EMBEDDING,
    GELU,
    LAYER_NORM,
    SLICE,
    SOFTMAX,
    Tape,
    Var,
)
from retrieval import ONE_HOT_MAX_WIDTH, RetrievalIndex, knn_query_batch

logger = logging.getLogger(__name__)

STD_FLOOR = 1e-8

CHECKPOINT_MAGIC = b"LCPF"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# Row encoding
# ---------------------------------------------------------------------------


@dataclass
class FeatureStats:
    """Training-split statistics shared by the model encoding and retrieval."""

    mean: np.ndarray
    std: np.ndarray
    cat_mask: np.ndarray
    vocabularies: List[np.ndarray]
    one_hot: bool = False

    @property
    def width(self) -> int:
        """Embedding width after optional one-hot expansion"""
        if not self.one_hot:
            return int(self.mean.shape[0])
        return int(sum(len(v) if is_cat else 1 for v, is_cat in zip(self.vocabularies, self.cat_mask)))


def fit_feature_stats(train_raw: np.ndarray, cat_mask: Optional[np.ndarray] = None, one_hot: bool = False,
                      max_one_hot_width: int = ONE_HOT_MAX_WIDTH) -> FeatureStats:
    train_raw = np.asarray(train_raw, dtype=np.float64)
    n_features = train_raw.shape[1]
    cat_mask = np.zeros(n_features, dtype=bool) if cat_mask is None else np.asarray(cat_mask, dtype=bool)
    vocabularies = [np.unique(train_raw[:, j]) if cat_mask[j] else np.empty(0) for j in range(n_features)]
    stats = FeatureStats(
        mean=train_raw.mean(axis=0),
        std=np.maximum(train_raw.std(axis=0), STD_FLOOR),
        cat_mask=cat_mask,
        vocabularies=vocabularies,
        one_hot=one_hot and bool(cat_mask.any()),
    )
    if stats.one_hot and stats.width > max_one_hot_width:
        logger.warning(f"One-hot width {stats.width} exceeds {max_one_hot_width}; using raw standardized features")
        stats.one_hot = False
    return stats


def embed_rows(raw: np.ndarray, stats: FeatureStats) -> np.ndarray:
    """Standardized rows (one-hot blocks for categorical columns when enabled)."""
    raw = np.atleast_2d(np.asarray(raw, dtype=np.float64))
    z = (raw - stats.mean) / stats.std
    if not stats.one_hot:
        return z
    blocks = []
    for j, is_cat in enumerate(stats.cat_mask):
        if is_cat:
            # unseen categories map to an all-zeros block
            blocks.append((raw[:, j:j + 1] == stats.vocabularies[j][None, :]).astype(np.float64))
        else:
            blocks.append(z[:, j:j + 1])
    return np.hstack(blocks)


def pad_rows(embedded: np.ndarray, d_max: int) -> np.ndarray:
    """Zero-pad to d_max columns and rescale by d_max / width."""
    embedded = np.atleast_2d(embedded)
    width = embedded.shape[1]
    if width > d_max:
        raise DataError(f"{width} encoded features exceed the model maximum of {d_max}")
    out = np.zeros((embedded.shape[0], d_max))
    out[:, :width] = embedded * (d_max / width)
    return out


def encode_rows(raw: np.ndarray, stats: FeatureStats, config: ModelConfig) -> np.ndarray:
    return pad_rows(embed_rows(raw, stats), config.d_max)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


def parameter_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    d, f = config.d_model, config.d_ff
    shapes: Dict[str, Tuple[int, ...]] = {
        "encoder.feature.w": (config.d_max, d),
        "encoder.feature.b": (d,),
        "encoder.label": (config.c_max + 1, d),
    }
    for layer in range(config.n_layers):
        p = f"layers.{layer}."
        shapes.update({
            p + "ln1.gain": (d,), p + "ln1.shift": (d,),
            p + "attn.wq": (d, d), p + "attn.bq": (d,),
            p + "attn.wk": (d, d), p + "attn.bk": (d,),
            p + "attn.wv": (d, d), p + "attn.bv": (d,),
            p + "attn.wo": (d, d), p + "attn.bo": (d,),
            p + "ln2.gain": (d,), p + "ln2.shift": (d,),
            p + "ff.w1": (d, f), p + "ff.b1": (f,),
            p + "ff.w2": (f, d), p + "ff.b2": (d,),
        })
    shapes.update({
        "head.ln.gain": (d,), "head.ln.shift": (d,),
        "head.w": (d, config.c_max), "head.b": (config.c_max,),
    })
    return shapes


class ModelParams:
    """Named float64 tensors whose shapes are fixed by the ModelConfig"""

    def __init__(self, config: ModelConfig, tensors: Dict[str, np.ndarray]):
        expected = parameter_shapes(config)
        if set(tensors) != set(expected):
            missing = sorted(set(expected) - set(tensors))
            extra = sorted(set(tensors) - set(expected))
            raise ContractViolation(f"parameter names do not match config (missing={missing}, extra={extra})")
        self.config = config
        self.tensors: Dict[str, np.ndarray] = {}
        for name, shape in expected.items():
            value = np.asarray(tensors[name], dtype=np.float64)
            if value.shape != shape:
                raise ContractViolation(f"parameter {name} has shape {value.shape}, expected {shape}")
            self.tensors[name] = value

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    @property
    def size(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def replace(self, tensors: Dict[str, np.ndarray]) -> "ModelParams":
        return ModelParams(self.config, tensors)

    def to_bytes(self) -> bytes:
        config_blob = json.dumps(self.config.model_dump(), sort_keys=True).encode("utf-8")
        parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(config_blob)), config_blob,
                 struct.pack("<I", len(self.tensors))]
        for name, value in self.tensors.items():
            encoded = name.encode("utf-8")
            parts.append(struct.pack("<H", len(encoded)) + encoded)
            parts.append(struct.pack("<B", value.ndim) + struct.pack(f"<{value.ndim}Q", *value.shape))
            parts.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ModelParams":
        try:
            if blob[:4] != CHECKPOINT_MAGIC:
                raise DataError("not an LCPF checkpoint (bad magic)")
            version, config_len = struct.unpack_from("<II", blob, 4)
            if version != CHECKPOINT_VERSION:
                raise DataError(f"unsupported checkpoint version {version}")
            offset = 12
            config = ModelConfig.model_validate(json.loads(blob[offset:offset + config_len].decode("utf-8")))
            offset += config_len
            (count,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            tensors = {}
            for _ in range(count):
                (name_len,) = struct.unpack_from("<H", blob, offset)
                offset += 2
                name = blob[offset:offset + name_len].decode("utf-8")
                offset += name_len
                (rank,) = struct.unpack_from("<B", blob, offset)
                offset += 1
                shape = struct.unpack_from(f"<{rank}Q", blob, offset)
                offset += 8 * rank
                n_bytes = 8 * int(np.prod(shape, dtype=np.int64))
                if offset + n_bytes > len(blob):
                    raise DataError(f"checkpoint truncated inside tensor {name}")
                tensors[name] = np.frombuffer(blob, dtype="<f8", count=n_bytes // 8, offset=offset).reshape(shape).astype(np.float64)
                offset += n_bytes
            if offset != len(blob):
                raise DataError(f"{len(blob) - offset} trailing bytes after last tensor")
        except (struct.error, UnicodeDecodeError, ValueError) as e:
            raise DataError(f"corrupt checkpoint: {e}") from e
        return cls(config, tensors)


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Scaled-normal initialization: weights ~ N(0, 1/fan_in), biases 0, norm gains 1."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".gain"):
            tensors[name] = np.ones(shape)
        elif len(shape) == 1:
            tensors[name] = np.zeros(shape)
        elif name == "encoder.label":
            tensors[name] = rng.standard_normal(shape)
        else:
            tensors[name] = rng.standard_normal(shape) / math.sqrt(shape[0])
    return ModelParams(config, tensors)


def save_checkpoint(params: ModelParams, path: Union[str, Path]) -> str:
    blob = params.to_bytes()
    atomic_write_bytes(path, blob)
    digest = bytes_sha256(blob)
    logger.info(f"Saved checkpoint {path} ({params.size} parameters, sha256 {digest[:12]})")
    return digest


def load_checkpoint(path: Union[str, Path]) -> ModelParams:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    return ModelParams.from_bytes(path.read_bytes())


# ---------------------------------------------------------------------------
# Batches and the forward pass
# ---------------------------------------------------------------------------


def attention_mask(l_ctx: int, l_qy: int) -> np.ndarray:
    """mask[i, j]: row i may attend to row j; only context rows are attendable."""
    length = l_ctx + l_qy
    mask = np.zeros((length, length), dtype=bool)
    mask[:, :l_ctx] = True
    return mask


@dataclass
class ContextBatch:
    features: np.ndarray  # (B, L_ctx + L_qy, D_max)
    labels: np.ndarray  # (B, L_ctx + L_qy), sentinel at query positions
    l_ctx: int
    n_classes: int
    sentinel: int

    @property
    def batch_size(self) -> int:
        return self.features.shape[0]

    @property
    def l_qy(self) -> int:
        return self.features.shape[1] - self.l_ctx

    def validate(self) -> None:
        if self.l_ctx < 1:
            raise ContractViolation("a context batch needs at least one context row")
        if self.labels.shape != self.features.shape[:2]:
            raise ContractViolation(f"labels {self.labels.shape} do not match features {self.features.shape}")
        ctx = self.labels[:, :self.l_ctx]
        if ctx.size and (ctx.min() < 0 or ctx.max() >= self.n_classes):
            raise ContractViolation(f"context labels must lie in [0, {self.n_classes})")
        if not np.all(self.labels[:, self.l_ctx:] == self.sentinel):
            raise ContractViolation("query positions must carry the absent-label sentinel")

    @classmethod
    def from_ids(cls, encoded: np.ndarray, labels: np.ndarray, context_ids: np.ndarray, query_ids: np.ndarray,
                 n_classes: int, sentinel: int) -> Tuple["ContextBatch", np.ndarray]:
        """Gather rows into a batch; also returns the query targets (B, L_qy)."""
        context_ids = np.atleast_2d(context_ids)
        query_ids = np.atleast_2d(query_ids)
        ids = np.concatenate([context_ids, query_ids], axis=1)
        seq_labels = labels[ids].copy()
        seq_labels[:, context_ids.shape[1]:] = sentinel
        batch = cls(encoded[ids], seq_labels, context_ids.shape[1], n_classes, sentinel)
        return batch, labels[query_ids]


def forward(params: ModelParams, batch: ContextBatch, tape: Tape) -> Tuple[Var, Dict[str, Var]]:
    """Query-position class probabilities (B, L_qy, C_max) and the parameter vars."""
    cfg = params.config
    if batch.n_classes > cfg.c_max:
        raise ContractViolation(f"{batch.n_classes} classes exceed the model maximum of {cfg.c_max}")
    w = {name: tape.param(value) for name, value in params.items()}

    tokens = np.array(batch.labels, dtype=np.int64, copy=True)
    tokens[:, batch.l_ctx:] = cfg.c_max
    h = tape.apply(AFFINE, tape.constant(batch.features), w["encoder.feature.w"], w["encoder.feature.b"])
    h = tape.apply(ADD, h, tape.apply(EMBEDDING, w["encoder.label"], index=tokens))

    mask = attention_mask(batch.l_ctx, batch.l_qy)
    for layer in range(cfg.n_layers):
        p = f"layers.{layer}."
        a = tape.apply(LAYER_NORM, h, w[p + "ln1.gain"], w[p + "ln1.shift"])
        q = tape.apply(AFFINE, a, w[p + "attn.wq"], w[p + "attn.bq"])
        k = tape.apply(AFFINE, a, w[p + "attn.wk"], w[p + "attn.bk"])
        v = tape.apply(AFFINE, a, w[p + "attn.wv"], w[p + "attn.bv"])
        attended = tape.apply(ATTENTION, q, k, v, mask=mask, heads=cfg.n_heads)
        h = tape.apply(ADD, h, tape.apply(AFFINE, attended, w[p + "attn.wo"], w[p + "attn.bo"]))

        a = tape.apply(LAYER_NORM, h, w[p + "ln2.gain"], w[p + "ln2.shift"])
        hidden = tape.apply(GELU, tape.apply(AFFINE, a, w[p + "ff.w1"], w[p + "ff.b1"]))
        h = tape.apply(ADD, h, tape.apply(AFFINE, hidden, w[p + "ff.w2"], w[p + "ff.b2"]))

    hq = tape.apply(SLICE, h, start=batch.l_ctx)
    hq = tape.apply(LAYER_NORM, hq, w["head.ln.gain"], w["head.ln.shift"])
    logits = tape.apply(AFFINE, hq, w["head.w"], w["head.b"])
    return tape.apply(SOFTMAX, logits, n_active=batch.n_classes), w


def loss_and_grads(params: ModelParams, batch: ContextBatch, targets: np.ndarray) -> Tuple[float, Dict[str, np.ndarray]]:
    """Mean query cross-entropy and its gradient for every parameter."""
    tape = Tape()
    probs, w = forward(params, batch, tape)
    loss = tape.apply(CROSS_ENTROPY, probs, labels=np.asarray(targets).reshape(-1))
    tape.backward(loss)
    grads = {name: var.grad if var.grad is not None else np.zeros_like(var.value) for name, var in w.items()}
    return float(loss.value), grads


def batch_loss(params: ModelParams, batch: ContextBatch, targets: np.ndarray) -> float:
    probs, _ = forward(params, batch, Tape(record=False))
    return float(CROSS_ENTROPY.forward(probs.value, np.asarray(targets).reshape(-1))[0])


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------


def _infer(params: ModelParams, batch: ContextBatch) -> np.ndarray:
    probs, _ = forward(params, batch, Tape(record=False))
    return probs.value[..., :batch.n_classes]


def _map_blocks(fn: Callable[[slice], np.ndarray], n: int, block: int) -> List[np.ndarray]:
    """Apply fn to consecutive slices, fanning out over worker threads in order."""
    slices = [slice(start, min(start + block, n)) for start in range(0, n, block)]
    workers = min(settings.worker_count, len(slices))
    if workers <= 1:
        return [fn(s) for s in slices]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, slices))


def _check_context(params: ModelParams, context_x: np.ndarray, context_y: np.ndarray, n_classes: int) -> None:
    cfg = params.config
    if context_x.shape[0] == 0:
        raise ContractViolation("prediction needs a non-empty context")
    if context_y.shape[0] != context_x.shape[0]:
        raise ContractViolation("context features and labels differ in length")
    if not 1 <= n_classes <= cfg.c_max:
        raise ContractViolation(f"n_classes={n_classes} outside [1, {cfg.c_max}]")
    if context_y.min() < 0 or context_y.max() >= n_classes:
        raise ContractViolation(f"context labels must lie in [0, {n_classes})")
    if context_x.shape[0] > cfg.l_ctx_max:
        logger.debug(f"Context of {context_x.shape[0]} rows is longer than the prior-fit maximum {cfg.l_ctx_max}")


def predict(params: ModelParams, context_x: np.ndarray, context_y: np.ndarray, query_x: np.ndarray,
            n_classes: int, batch_size: int = 512) -> np.ndarray:
    """Posterior predictive for every query given one shared context (encoded rows)."""
    context_x = np.atleast_2d(np.asarray(context_x, dtype=np.float64))
    context_y = np.asarray(context_y, dtype=np.int64)
    query_x = np.atleast_2d(np.asarray(query_x, dtype=np.float64))
    _check_context(params, context_x, context_y, n_classes)
    cfg = params.config
    n_ctx = context_x.shape[0]
    fit = int(math.isqrt(max(1, settings.ATTENTION_BUDGET // cfg.n_heads))) - n_ctx
    block = max(1, min(batch_size, fit))

    def run(rows: slice) -> np.ndarray:
        queries = query_x[rows]
        features = np.concatenate([context_x, queries])[None]
        labels = np.concatenate([context_y, np.full(queries.shape[0], cfg.c_max)])[None]
        return _infer(params, ContextBatch(features, labels, n_ctx, n_classes, cfg.c_max))[0]

    if query_x.shape[0] == 0:
        return np.empty((0, n_classes))
    return np.concatenate(_map_blocks(run, query_x.shape[0], block))


def predict_local(params: ModelParams, index: RetrievalIndex, train_labels: np.ndarray, query_points: np.ndarray,
                  k: int, n_classes: int, batch_size: int = 512,
                  exclude_ids: Optional[np.ndarray] = None) -> np.ndarray:
    """Each query is predicted from its own k-nearest-neighbour context.

    ``query_points`` live in the index's embedding space; the neighbours are
    placed in ascending id order so that k = N reproduces ``predict`` on the
    full training set.
    """
    cfg = params.config
    train_labels = np.asarray(train_labels, dtype=np.int64)
    query_points = np.atleast_2d(np.asarray(query_points, dtype=np.float64))
    if not 1 <= k <= index.size:
        raise ContractViolation(f"k={k} outside [1, {index.size}]")
    _check_context(params, index.embeddings, train_labels, n_classes)
    if query_points.shape[0] == 0:
        return np.empty((0, n_classes))

    encoded_train = pad_rows(index.embeddings, cfg.d_max)
    encoded_queries = pad_rows(query_points, cfg.d_max)
    per_sequence = cfg.n_heads * (k + 1) ** 2
    block = max(1, min(batch_size, settings.ATTENTION_BUDGET // per_sequence))

    def run(rows: slice) -> np.ndarray:
        excl = None if exclude_ids is None else np.asarray(exclude_ids)[rows]
        neighbours = np.sort(knn_query_batch(index, query_points[rows], k, exclude_ids=excl), axis=1)
        features = np.concatenate([encoded_train[neighbours], encoded_queries[rows][:, None, :]], axis=1)
        labels = np.concatenate([train_labels[neighbours], np.full((neighbours.shape[0], 1), cfg.c_max)], axis=1)
        return _infer(params, ContextBatch(features, labels, k, n_classes, cfg.c_max))[:, 0, :]

    return np.concatenate(_map_blocks(run, query_points.shape[0], block))


def _active_width(*blocks: np.ndarray) -> int:
    used = np.zeros(blocks[0].shape[1], dtype=bool)
    for block in blocks:
        used |= np.any(block != 0.0, axis=0)
    nonzero = np.flatnonzero(used)
    return int(nonzero[-1]) + 1 if nonzero.size else blocks[0].shape[1]


def ensemble_member_probs(params: ModelParams, context_x: np.ndarray, context_y: np.ndarray, query_x: np.ndarray,
                          n_classes: int, columns: np.ndarray, classes: np.ndarray,
                          batch_size: int = 512) -> np.ndarray:
    """One ensemble member: permute feature columns, relabel classes, map probabilities back."""
    probs = predict(params, context_x[:, columns], classes[context_y], query_x[:, columns], n_classes, batch_size)
    return probs[:, classes]


def predict_ensemble(params: ModelParams, context_x: np.ndarray, context_y: np.ndarray, query_x: np.ndarray,
                     n_classes: int, n_members: int, seed, batch_size: int = 512) -> np.ndarray:
    """Mean prediction over random feature-column and class-index permutations.

    Member 0 uses the identity permutations. Only the non-padding feature
    columns are permuted.
    """
    if n_members < 1:
        raise ContractViolation("an ensemble needs at least one member")
    context_x = np.atleast_2d(np.asarray(context_x, dtype=np.float64))
    query_x = np.atleast_2d(np.asarray(query_x, dtype=np.float64))
    context_y = np.asarray(context_y, dtype=np.int64)
    rng = np.random.default_rng(seed)
    width = _active_width(context_x, query_x)
    total = np.zeros((query_x.shape[0], n_classes))
    for member in range(n_members):
        columns = np.arange(context_x.shape[1])
        classes = np.arange(n_classes)
        if member > 0:
            columns[:width] = rng.permutation(width)
            classes = rng.permutation(n_classes)
        total += ensemble_member_probs(params, context_x, context_y, query_x, n_classes, columns, classes, batch_size)
    return total / n_members


def chunk_partition(n: int, chunk_size: int, seed) -> List[np.ndarray]:
    """ceil(n / chunk_size) random, balanced chunks; ids sorted within each chunk."""
    if chunk_size < 1:
        raise ContractViolation("chunk_size must be at least 1")
    n_chunks = max(1, math.ceil(n / chunk_size))
    if n_chunks == 1:
        return [np.arange(n)]
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(part) for part in np.array_split(perm, n_chunks)]


def predict_chunked(params: ModelParams, context_x: np.ndarray, context_y: np.ndarray, query_x: np.ndarray,
                    n_classes: int, chunk_size: int, seed, batch_size: int = 512) -> np.ndarray:
    """Uniform average of predictions conditioned on each chunk of the training set."""
    context_x = np.atleast_2d(np.asarray(context_x, dtype=np.float64))
    context_y = np.asarray(context_y, dtype=np.int64)
    chunks = chunk_partition(context_x.shape[0], chunk_size, seed)
    total = None
    for ids in chunks:
        probs = predict(params, context_x[ids], context_y[ids], query_x, n_classes, batch_size)
        total = probs if total is None else total + probs
    return total / len(chunks)
