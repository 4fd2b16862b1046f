"""
Dense float64 kernels with hand-written backward passes, a recording tape,
AdamW and a central-difference gradient checker.

The kernel set is fixed: affine, add, gelu, layer_norm, masked_attention,
softmax_rows, cross_entropy, embedding and slice_positions. Each kernel has a
pure forward returning ``(output, saved)`` and a backward mapping the output
gradient and the saved intermediates to one gradient per input.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, NamedTuple, Optional, Tuple

import numpy as np

from errors import ContractViolation, NumericError

logger = logging.getLogger(__name__)

Tensor = np.ndarray

LN_EPS = 1e-5
PROB_FLOOR = 1e-12
_GELU_C = math.sqrt(2.0 / math.pi)


def as_tensor(x) -> Tensor:
    return np.asarray(x, dtype=np.float64)


def check_finite(name: str, x: Tensor) -> Tensor:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values produced by {name}")
    return x


# ---------------------------------------------------------------------------
# Kernel forwards / backwards
# ---------------------------------------------------------------------------


def _affine_fwd(x, w, b):
    if w.ndim != 2 or b.shape != (w.shape[1],) or x.shape[-1] != w.shape[0]:
        raise ContractViolation(f"affine shape mismatch: x{x.shape} w{w.shape} b{b.shape}")
    x2 = x.reshape(-1, w.shape[0])
    out = x2 @ w + b
    return out.reshape(*x.shape[:-1], w.shape[1]), x2


def _affine_bwd(g, x2, inputs):
    x, w, b = inputs
    g2 = g.reshape(-1, w.shape[1])
    return (g2 @ w.T).reshape(x.shape), x2.T @ g2, g2.sum(axis=0)


def _add_fwd(a, b):
    if a.shape != b.shape:
        raise ContractViolation(f"add shape mismatch: {a.shape} vs {b.shape}")
    return a + b, None


def _add_bwd(g, saved, inputs):
    return g, g


def _gelu_fwd(x):
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    return 0.5 * x * (1.0 + t), t


def _gelu_bwd(g, t, inputs):
    (x,) = inputs
    dinner = _GELU_C * (1.0 + 3.0 * 0.044715 * x ** 2)
    return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)


def _layer_norm_fwd(x, gain, shift):
    d = x.shape[-1]
    if d < 2 or gain.shape != (d,) or shift.shape != (d,):
        raise ContractViolation(f"layer_norm shape mismatch: x{x.shape} gain{gain.shape} shift{shift.shape}")
    centered = x - x.mean(axis=-1, keepdims=True)
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = centered * inv
    return xhat * gain + shift, (xhat, inv)


def _layer_norm_bwd(g, saved, inputs):
    xhat, inv = saved
    _, gain, _ = inputs
    d = xhat.shape[-1]
    dgain = (g * xhat).reshape(-1, d).sum(axis=0)
    dshift = g.reshape(-1, d).sum(axis=0)
    dxhat = g * gain
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dgain, dshift


def _split_heads(x, heads):
    *lead, length, d = x.shape
    return np.swapaxes(x.reshape(*lead, length, heads, d // heads), -2, -3)


def _merge_heads(x):
    x = np.swapaxes(x, -2, -3)
    *lead, length, heads, dh = x.shape
    return x.reshape(*lead, length, heads * dh)


def _attention_fwd(q, k, v, mask, heads):
    if q.shape != k.shape or q.shape != v.shape:
        raise ContractViolation(f"attention q/k/v shapes differ: {q.shape} {k.shape} {v.shape}")
    length, d = q.shape[-2:]
    if heads < 1 or d % heads != 0:
        raise ContractViolation(f"width {d} is not divisible by {heads} heads")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (length, length):
        raise ContractViolation(f"mask shape {mask.shape} does not match length {length}")
    if not mask.any(axis=1).all():
        raise ContractViolation("attention mask has a row with no allowed target")
    scale = 1.0 / math.sqrt(d // heads)
    qh, kh, vh = _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)
    scores = (qh @ np.swapaxes(kh, -1, -2)) * scale
    scores = np.where(mask, scores, -np.inf)
    weights = np.exp(scores - scores.max(axis=-1, keepdims=True))
    weights /= weights.sum(axis=-1, keepdims=True)
    out = _merge_heads(weights @ vh)
    return out, (qh, kh, vh, weights, scale)


def _attention_bwd(g, saved, inputs):
    qh, kh, vh, weights, scale = saved
    gh = _split_heads(g, qh.shape[-3])
    dweights = gh @ np.swapaxes(vh, -1, -2)
    dv = np.swapaxes(weights, -1, -2) @ gh
    dscores = weights * (dweights - (dweights * weights).sum(axis=-1, keepdims=True))
    dq = (dscores @ kh) * scale
    dk = (np.swapaxes(dscores, -1, -2) @ qh) * scale
    return _merge_heads(dq), _merge_heads(dk), _merge_heads(dv)


def _softmax_fwd(x, n_active=None):
    if n_active is not None:
        if not 1 <= n_active <= x.shape[-1]:
            raise ContractViolation(f"n_active={n_active} outside [1, {x.shape[-1]}]")
        x = x.copy()
        x[..., n_active:] = -np.inf
    probs = np.exp(x - x.max(axis=-1, keepdims=True))
    probs /= probs.sum(axis=-1, keepdims=True)
    return probs, probs


def _softmax_bwd(g, probs, inputs):
    return (probs * (g - (g * probs).sum(axis=-1, keepdims=True)),)


def _cross_entropy_fwd(probs, labels):
    c = probs.shape[-1]
    p2 = probs.reshape(-1, c)
    labels = np.asarray(labels).reshape(-1)
    if labels.shape[0] != p2.shape[0]:
        raise ContractViolation(f"{labels.shape[0]} labels for {p2.shape[0]} probability rows")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ContractViolation(f"label outside [0, {c})")
    picked = p2[np.arange(p2.shape[0]), labels]
    clamped = np.maximum(picked, PROB_FLOOR)
    loss = np.asarray(-np.log(clamped).mean())
    return loss, (labels, picked)


def _cross_entropy_bwd(g, saved, inputs):
    labels, picked = saved
    (probs,) = inputs
    c = probs.shape[-1]
    n = labels.shape[0]
    grad = np.zeros((n, c))
    live = picked > PROB_FLOOR
    rows = np.arange(n)[live]
    grad[rows, labels[live]] = -float(g) / (n * picked[live])
    return (grad.reshape(probs.shape),)


def _embedding_fwd(table, index):
    index = np.asarray(index)
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise ContractViolation(f"embedding index outside [0, {table.shape[0]})")
    return table[index], index


def _embedding_bwd(g, index, inputs):
    (table,) = inputs
    dtable = np.zeros_like(table)
    np.add.at(dtable, index.reshape(-1), g.reshape(-1, table.shape[1]))
    return (dtable,)


def _slice_fwd(x, start, stop=None):
    return x[:, start:stop], None


def _slice_bwd(g, saved, inputs, start, stop=None):
    (x,) = inputs
    dx = np.zeros_like(x)
    dx[:, start:stop] = g
    return (dx,)


class Kernel(NamedTuple):
    name: str
    forward: Callable[..., Tuple[Tensor, Any]]
    backward: Callable[..., Tuple[Optional[Tensor], ...]]


AFFINE = Kernel("affine", _affine_fwd, _affine_bwd)
ADD = Kernel("add", _add_fwd, _add_bwd)
GELU = Kernel("gelu", _gelu_fwd, _gelu_bwd)
LAYER_NORM = Kernel("layer_norm", _layer_norm_fwd, _layer_norm_bwd)
ATTENTION = Kernel("masked_attention", _attention_fwd, _attention_bwd)
SOFTMAX = Kernel("softmax_rows", _softmax_fwd, _softmax_bwd)
CROSS_ENTROPY = Kernel("cross_entropy", _cross_entropy_fwd, _cross_entropy_bwd)
EMBEDDING = Kernel("embedding", _embedding_fwd, _embedding_bwd)
SLICE = Kernel("slice_positions", _slice_fwd, _slice_bwd)

# Options that parameterize a backward pass as well as the forward
_BACKWARD_OPTIONS = {"slice_positions": ("start", "stop")}


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class Var:
    value: Tensor
    requires_grad: bool = False
    grad: Optional[Tensor] = None

    def accumulate(self, g: Tensor) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g


@dataclass
class _Node:
    kernel: Kernel
    inputs: Tuple[Var, ...]
    output: Var
    saved: Any
    options: Dict[str, Any] = field(default_factory=dict)


class Tape:
    """Records kernel applications of one forward pass; single-writer."""

    def __init__(self, record: bool = True):
        self.record = record
        self.nodes: List[_Node] = []

    def param(self, value) -> Var:
        return Var(as_tensor(value), requires_grad=self.record)

    def constant(self, value) -> Var:
        return Var(as_tensor(value))

    def apply(self, kernel: Kernel, *inputs: Var, **options) -> Var:
        out, saved = kernel.forward(*(v.value for v in inputs), **options)
        check_finite(kernel.name, out)
        output = Var(out, requires_grad=any(v.requires_grad for v in inputs))
        if self.record and output.requires_grad:
            self.nodes.append(_Node(kernel, inputs, output, saved, options))
        return output

    def backward(self, output: Var, grad: Optional[Tensor] = None) -> None:
        """Accumulate gradients into every recorded input, latest node first."""
        output.accumulate(np.ones_like(output.value) if grad is None else grad)
        for node in reversed(self.nodes):
            if node.output.grad is None:
                continue
            extra = {k: node.options[k] for k in _BACKWARD_OPTIONS.get(node.kernel.name, ()) if k in node.options}
            values = tuple(v.value for v in node.inputs)
            grads = node.kernel.backward(node.output.grad, node.saved, values, **extra)
            for var, g in zip(node.inputs, grads):
                if var.requires_grad and g is not None:
                    var.accumulate(g)
        self.nodes.clear()


# ---------------------------------------------------------------------------
# Plain forward entry points
# ---------------------------------------------------------------------------


def affine(x, w, b) -> Tensor:
    return check_finite("affine", _affine_fwd(as_tensor(x), as_tensor(w), as_tensor(b))[0])


def gelu(x) -> Tensor:
    return _gelu_fwd(as_tensor(x))[0]


def layer_norm(x, gain, shift) -> Tensor:
    return check_finite("layer_norm", _layer_norm_fwd(as_tensor(x), as_tensor(gain), as_tensor(shift))[0])


def masked_attention(q, k, v, mask, heads: int) -> Tensor:
    return check_finite("masked_attention", _attention_fwd(as_tensor(q), as_tensor(k), as_tensor(v), mask, heads)[0])


def softmax_rows(x, n_active: Optional[int] = None) -> Tensor:
    x = check_finite("softmax_rows input", as_tensor(x))
    return _softmax_fwd(x, n_active)[0]


def cross_entropy(probs, labels) -> float:
    return float(_cross_entropy_fwd(as_tensor(probs), labels)[0])


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------


@dataclass
class AdamWState:
    lr: float
    weight_decay: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    exp_avg: Dict[str, Tensor] = field(default_factory=dict)
    exp_avg_sq: Dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def create(cls, params: Dict[str, Tensor], lr: float, weight_decay: float, **kwargs) -> "AdamWState":
        if lr <= 0.0:
            raise ContractViolation(f"Invalid lr: {lr}")
        state = cls(lr=lr, weight_decay=weight_decay, **kwargs)
        for name, value in params.items():
            state.exp_avg[name] = np.zeros_like(value, dtype=np.float64)
            state.exp_avg_sq[name] = np.zeros_like(value, dtype=np.float64)
        return state


def adamw_step(state: AdamWState, params: Dict[str, Tensor], grads: Dict[str, Tensor]) -> Dict[str, Tensor]:
    """One bias-corrected Adam step plus decoupled weight decay; returns new params."""
    for name, g in grads.items():
        if name not in params or g.shape != params[name].shape:
            raise ContractViolation(f"gradient for {name!r} does not match a parameter")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name!r}; step aborted")

    state.step += 1
    t = state.step
    bias_c1 = 1.0 - state.beta1 ** t
    bias_c2 = 1.0 - state.beta2 ** t
    updated = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            updated[name] = p
            continue
        m = state.exp_avg[name] = state.beta1 * state.exp_avg[name] + (1.0 - state.beta1) * g
        v = state.exp_avg_sq[name] = state.beta2 * state.exp_avg_sq[name] + (1.0 - state.beta2) * g * g
        m_hat = m / bias_c1
        v_hat = v / bias_c2
        updated[name] = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps) - state.lr * state.weight_decay * p
    return updated


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def grad_check(f: Callable[[Tensor], Tuple[float, Tensor]], x, h: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    ``f`` returns ``(value, analytic_gradient)`` at its argument.
    """
    x = as_tensor(x)
    _, analytic = f(x.copy())
    analytic = as_tensor(analytic).reshape(x.shape)
    worst = 0.0
    flat = x.reshape(-1)
    for i in range(flat.size):
        plus = flat.copy()
        minus = flat.copy()
        plus[i] += h
        minus[i] -= h
        numeric = (float(f(plus.reshape(x.shape))[0]) - float(f(minus.reshape(x.shape))[0])) / (2.0 * h)
        a = float(analytic.reshape(-1)[i])
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
