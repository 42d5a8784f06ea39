"""
Dense reverse-mode automatic differentiation engine and Adam optimizer.

Graphs are define-by-run: every forward pass records its nodes on a fresh
Graph, and backward walks that node list in exact reverse creation order.
All tensors hold float64 numpy arrays.
"""

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

import config
from errors import NonFiniteError, SequenceError, ShapeError

logger = logging.getLogger(__name__)


class Tensor:
    """Dense float64 array with an optional gradient requirement."""

    __slots__ = ("data", "requires_grad", "name", "_node")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self._node: Optional[int] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", self.shape)
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False, name=self.name)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"


@dataclass
class Node:
    """One recorded op application."""

    kind: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    cache: Dict
    attrs: Dict


# ---------------------------------------------------------------------------
# Op kernels: forward(*arrays, **attrs) -> (out, cache);
# backward(grad_out, cache, arrays, attrs) -> tuple of input grads (None = no grad)
# ---------------------------------------------------------------------------

def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to an operand's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_or_raise(kind: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(kind, a.shape, b.shape) from None


def _matmul_fwd(a, b, transpose_b=False):
    bb = np.swapaxes(b, -1, -2) if transpose_b else b
    if a.ndim < 2 or bb.ndim < 2 or a.shape[-1] != bb.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    if bb.ndim > 2 and (bb.ndim != a.ndim or bb.shape[:-2] != a.shape[:-2]):
        raise ShapeError("matmul", a.shape, b.shape)
    return a @ bb, {"bb": bb}


def _matmul_bwd(g, cache, arrays, attrs):
    a, b = arrays
    bb = cache["bb"]
    ga = g @ np.swapaxes(bb, -1, -2)
    if bb.ndim == 2 and a.ndim > 2:
        gbb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
    else:
        gbb = np.swapaxes(a, -1, -2) @ g
    gb = np.swapaxes(gbb, -1, -2) if attrs.get("transpose_b") else gbb
    return ga, gb


def _add_fwd(a, b):
    _broadcast_or_raise("add", a, b)
    return a + b, {}


def _add_bwd(g, cache, arrays, attrs):
    a, b = arrays
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _mul_fwd(a, b):
    _broadcast_or_raise("mul", a, b)
    return a * b, {}


def _mul_bwd(g, cache, arrays, attrs):
    a, b = arrays
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _softmax_fwd(x):
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)
    return s, {"s": s}


def _softmax_bwd(g, cache, arrays, attrs):
    s = cache["s"]
    return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)


def _log_fwd(x):
    clamped = np.maximum(x, config.PROB_CLAMP)
    return np.log(clamped), {"clamped": clamped}


def _log_bwd(g, cache, arrays, attrs):
    (x,) = arrays
    return (np.where(x > config.PROB_CLAMP, g / cache["clamped"], 0.0),)


def _exp_fwd(x):
    out = np.exp(x)
    return out, {"out": out}


def _exp_bwd(g, cache, arrays, attrs):
    return (g * cache["out"],)


def _embedding_fwd(weight, ids=None):
    ids = np.asarray(ids)
    if weight.ndim != 2:
        raise ShapeError("embedding-gather", weight.shape, ids.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise SequenceError(f"token id outside vocabulary of size {weight.shape[0]}")
    return weight[ids], {}


def _embedding_bwd(g, cache, arrays, attrs):
    (weight,) = arrays
    gw = np.zeros_like(weight)
    np.add.at(gw, np.asarray(attrs["ids"]), g)
    return (gw,)


def _layer_norm_fwd(x, gain, bias, eps=config.LAYER_NORM_EPS):
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError("layer-norm", x.shape, gain.shape, bias.shape)
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv_std
    return xhat * gain + bias, {"xhat": xhat, "inv_std": inv_std}


def _layer_norm_bwd(g, cache, arrays, attrs):
    x, gain, bias = arrays
    xhat, inv_std = cache["xhat"], cache["inv_std"]
    n = x.shape[-1]
    lead = tuple(range(x.ndim - 1))
    ggain = (g * xhat).sum(axis=lead)
    gbias = g.sum(axis=lead)
    dxhat = g * gain
    gx = (inv_std / n) * (
        n * dxhat
        - dxhat.sum(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
    )
    return gx, ggain, gbias


_GELU_C = np.sqrt(2.0 / np.pi)


def _gelu_fwd(x):
    u = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(u)
    return 0.5 * x * (1.0 + t), {"t": t}


def _gelu_bwd(g, cache, arrays, attrs):
    (x,) = arrays
    t = cache["t"]
    du = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
    return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * du),)


def _cross_entropy_fwd(logits, targets=None):
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError("cross-entropy-from-logits", logits.shape, targets.shape)
    vocab = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise SequenceError(f"target id outside vocabulary of size {vocab}")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1))
    picked = np.take_along_axis(shifted, targets[..., None], axis=-1)[..., 0]
    probs = np.exp(shifted - lse[..., None])
    return lse - picked, {"probs": probs}


def _cross_entropy_bwd(g, cache, arrays, attrs):
    grad = cache["probs"].copy()
    targets = np.asarray(attrs["targets"])
    np.put_along_axis(
        grad, targets[..., None],
        np.take_along_axis(grad, targets[..., None], axis=-1) - 1.0, axis=-1,
    )
    return (grad * g[..., None],)


def _reduce_bwd(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape).copy()


def _sum_fwd(x, axis=None, keepdims=False):
    return np.asarray(x.sum(axis=axis, keepdims=keepdims)), {}


def _sum_bwd(g, cache, arrays, attrs):
    (x,) = arrays
    return (_reduce_bwd(g, x.shape, attrs.get("axis"), attrs.get("keepdims", False)),)


def _mean_fwd(x, axis=None, keepdims=False):
    return np.asarray(x.mean(axis=axis, keepdims=keepdims)), {}


def _mean_bwd(g, cache, arrays, attrs):
    (x,) = arrays
    axis = attrs.get("axis")
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return (_reduce_bwd(g, x.shape, axis, attrs.get("keepdims", False)) / count,)


def _index_fwd(x, key=None):
    try:
        return np.array(x[key]), {}
    except IndexError:
        raise ShapeError("slice", x.shape) from None


def _is_basic_key(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(p, (int, np.integer, slice, type(None), type(Ellipsis))) for p in parts)


def _index_bwd(g, cache, arrays, attrs):
    (x,) = arrays
    key = attrs["key"]
    gx = np.zeros_like(x)
    if _is_basic_key(key):
        gx[key] += g
    else:
        # advanced indices may repeat, so scatter-add
        np.add.at(gx, key, g)
    return (gx,)


def _concat_fwd(*xs, axis=-1):
    try:
        out = np.concatenate(xs, axis=axis)
    except ValueError:
        raise ShapeError("concat", *[x.shape for x in xs]) from None
    return out, {}


def _concat_bwd(g, cache, arrays, attrs):
    axis = attrs.get("axis", -1)
    bounds = np.cumsum([x.shape[axis] for x in arrays])[:-1]
    return tuple(np.split(g, bounds, axis=axis))


def _clip_fwd(x, lo=None, hi=None):
    return np.clip(x, lo, hi), {}


def _clip_bwd(g, cache, arrays, attrs):
    (x,) = arrays
    inside = (x >= attrs["lo"]) & (x <= attrs["hi"])
    return (g * inside,)


def _minimum_fwd(a, b):
    if a.shape != b.shape:
        raise ShapeError("minimum", a.shape, b.shape)
    return np.minimum(a, b), {}


def _minimum_bwd(g, cache, arrays, attrs):
    a, b = arrays
    take_a = a <= b
    return g * take_a, g * ~take_a


OPS: Dict[str, Tuple[Callable, Callable]] = {
    "matmul": (_matmul_fwd, _matmul_bwd),
    "add": (_add_fwd, _add_bwd),
    "mul": (_mul_fwd, _mul_bwd),
    "softmax": (_softmax_fwd, _softmax_bwd),
    "log": (_log_fwd, _log_bwd),
    "exp": (_exp_fwd, _exp_bwd),
    "embedding": (_embedding_fwd, _embedding_bwd),
    "layer_norm": (_layer_norm_fwd, _layer_norm_bwd),
    "gelu": (_gelu_fwd, _gelu_bwd),
    "cross_entropy": (_cross_entropy_fwd, _cross_entropy_bwd),
    "sum": (_sum_fwd, _sum_bwd),
    "mean": (_mean_fwd, _mean_bwd),
    "slice": (_index_fwd, _index_bwd),
    "concat": (_concat_fwd, _concat_bwd),
    "clip": (_clip_fwd, _clip_bwd),
    "minimum": (_minimum_fwd, _minimum_bwd),
}


class Graph:
    """Define-by-run computation graph; node order is creation order."""

    def __init__(self):
        self.nodes: List[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def apply(self, kind: str, *inputs: Tensor, **attrs) -> Tensor:
        """
        Run one op forward and record it.

        Args:
            kind: Op kind, a key of OPS
            inputs: Input tensors
            attrs: Non-differentiable op attributes (axis, ids, targets, ...)

        Returns:
            Output tensor, owned by this graph
        """
        if kind not in OPS:
            raise ValueError(f"Unknown op kind: {kind}")
        forward, _ = OPS[kind]
        out_data, cache = forward(*[t.data for t in inputs], **attrs)
        if not np.all(np.isfinite(out_data)):
            raise NonFiniteError(f"{kind} produced a non-finite output")
        out = Tensor(out_data, requires_grad=any(t.requires_grad for t in inputs))
        out.data.flags.writeable = False
        out._node = len(self.nodes)
        self.nodes.append(Node(kind, tuple(inputs), out, cache, attrs))
        return out

    def owns(self, tensor: Tensor) -> bool:
        return (
            tensor._node is not None
            and tensor._node < len(self.nodes)
            and self.nodes[tensor._node].output is tensor
        )

    # Thin named wrappers keep model code readable.
    def matmul(self, a: Tensor, b: Tensor, transpose_b: bool = False) -> Tensor:
        return self.apply("matmul", a, b, transpose_b=transpose_b)

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        return self.apply("add", a, b)

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        return self.apply("mul", a, b)

    def scale(self, a: Tensor, factor: float) -> Tensor:
        return self.apply("mul", a, Tensor(factor))

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        return self.apply("add", a, self.scale(b, -1.0))

    def softmax(self, x: Tensor) -> Tensor:
        return self.apply("softmax", x)

    def log(self, x: Tensor) -> Tensor:
        return self.apply("log", x)

    def exp(self, x: Tensor) -> Tensor:
        return self.apply("exp", x)

    def embedding(self, weight: Tensor, ids: np.ndarray) -> Tensor:
        return self.apply("embedding", weight, ids=np.asarray(ids, dtype=np.int64))

    def layer_norm(self, x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
        return self.apply("layer_norm", x, gain, bias)

    def gelu(self, x: Tensor) -> Tensor:
        return self.apply("gelu", x)

    def cross_entropy(self, logits: Tensor, targets: np.ndarray) -> Tensor:
        return self.apply("cross_entropy", logits, targets=np.asarray(targets, dtype=np.int64))

    def sum(self, x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
        return self.apply("sum", x, axis=axis, keepdims=keepdims)

    def mean(self, x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
        return self.apply("mean", x, axis=axis, keepdims=keepdims)

    def slice(self, x: Tensor, key) -> Tensor:
        return self.apply("slice", x, key=key)

    def concat(self, xs: Sequence[Tensor], axis: int = -1) -> Tensor:
        return self.apply("concat", *xs, axis=axis)

    def clip(self, x: Tensor, lo: float, hi: float) -> Tensor:
        return self.apply("clip", x, lo=lo, hi=hi)

    def minimum(self, a: Tensor, b: Tensor) -> Tensor:
        return self.apply("minimum", a, b)


def forward_op(graph: Graph, kind: str, *inputs: Tensor, **attrs) -> Tensor:
    """Apply op `kind` to `inputs` on `graph`."""
    return graph.apply(kind, *inputs, **attrs)


def backward(
    graph: Graph,
    root: Tensor,
    wrt: Optional[Iterable[Tensor]] = None,
) -> Dict[Tensor, np.ndarray]:
    """
    Reverse-mode sweep from a scalar root.

    Args:
        graph: Graph that produced root
        root: Scalar output tensor
        wrt: Extra leaves that must appear in the result (zero if unreached)

    Returns:
        Mapping from every requires_grad leaf to d(root)/d(leaf)
    """
    if root.size != 1:
        raise ShapeError("backward", root.shape)

    grads: Dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    leaves: Dict[int, Tensor] = {}

    for node in reversed(graph.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        _, backward_fn = OPS[node.kind]
        input_grads = backward_fn(g, node.cache, [t.data for t in node.inputs], node.attrs)
        for tensor, tg in zip(node.inputs, input_grads):
            if tg is None or not tensor.requires_grad:
                continue
            if not graph.owns(tensor):
                leaves[id(tensor)] = tensor
            key = id(tensor)
            grads[key] = grads[key] + tg if key in grads else np.array(tg, dtype=np.float64)

    result: Dict[Tensor, np.ndarray] = {}
    for key, tensor in leaves.items():
        result[tensor] = grads.get(key, np.zeros_like(tensor.data))
    if root.requires_grad and not graph.owns(root):
        result[root] = np.ones_like(root.data)
    for tensor in wrt or ():
        if tensor not in result:
            result[tensor] = np.zeros_like(tensor.data)
    return result


class ParameterStore:
    """Ordered name -> Tensor mapping of trainable parameters."""

    def __init__(self):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"Duplicate parameter name: {name}")
        tensor = Tensor(data, requires_grad=True, name=name)
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def tensors(self) -> List[Tensor]:
        return list(self._params.values())

    def num_parameters(self) -> int:
        return sum(t.size for t in self._params.values())

    def grads_by_name(self, grads: Mapping[Tensor, np.ndarray]) -> Dict[str, np.ndarray]:
        return {
            name: grads.get(t, np.zeros_like(t.data)) for name, t in self._params.items()
        }

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, t.data.copy()) for name, t in self._params.items())

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        unexpected = set(state) - set(self._params)
        if missing or unexpected:
            raise ValueError(
                f"State mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}"
            )
        for name, tensor in self._params.items():
            data = np.asarray(state[name], dtype=np.float64)
            if data.shape != tensor.shape:
                raise ShapeError(f"load {name}", tensor.shape, data.shape)
            tensor.data = data.copy()


@dataclass
class AdamState:
    """Per-parameter moments and hyperparameters for bias-corrected Adam."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: ParameterStore,
    grads: Mapping[str, np.ndarray],
    state: AdamState,
) -> None:
    """
    Apply one bias-corrected Adam update to every parameter.

    Parameters without an entry in grads are treated as having zero gradient.
    Parameter arrays are replaced, never mutated, so detached copies stay valid.
    """
    for name, tensor in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != tensor.shape:
            raise ShapeError(f"adam {name}", tensor.shape, g.shape)
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name}")

    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1 ** state.step
    bias2 = 1.0 - b2 ** state.step

    for name, tensor in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(tensor.data)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(tensor.data)
            v = np.zeros_like(tensor.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name] = m
        state.v[name] = v
        m_hat = m / bias1
        v_hat = v / bias2
        tensor.data = tensor.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


def clip_grad_norm(grads: Dict[str, np.ndarray], max_norm: Optional[float]) -> float:
    """Scale grads in place so their global L2 norm is at most max_norm; returns the pre-clip norm."""
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm is not None and total > max_norm > 0:
        factor = max_norm / (total + 1e-12)
        for name in grads:
            grads[name] = grads[name] * factor
    return total


def warmup_cosine_lr(step: int, base_lr: float, warmup_steps: int, total_steps: int,
                     min_ratio: float = 0.1) -> float:
    """
    Learning rate for a 1-based step: linear warmup to base_lr over
    warmup_steps, then cosine decay to min_ratio * base_lr at total_steps.
    """
    if warmup_steps > 0 and step <= warmup_steps:
        return base_lr * step / warmup_steps
    span = max(1, total_steps - warmup_steps)
    progress = min(1.0, (step - warmup_steps) / span)
    floor = base_lr * min_ratio
    return floor + 0.5 * (base_lr - floor) * (1.0 + math.cos(math.pi * progress))


def relative_error(analytic: float, numeric: float, atol: float = config.GRAD_CHECK_ATOL) -> float:
    """|a-n| / max(1e-8, |a|+|n|); differences below atol count as agreement."""
    diff = abs(analytic - numeric)
    if diff < atol:
        return 0.0
    return diff / max(1e-8, abs(analytic) + abs(numeric))


def gradient_check(
    fn: Callable[[Graph], Tensor],
    tensors: Sequence[Tensor],
    h: float = 1e-5,
    max_checks_per_tensor: Optional[int] = None,
    seed: int = 0,
) -> float:
    """
    Compare backward() against central finite differences.

    Args:
        fn: Builds a scalar on the given graph from the current tensor values
        tensors: Leaves to check (must require grad)
        h: Finite-difference step
        max_checks_per_tensor: Sample at most this many elements per tensor
        seed: Seed for element sampling

    Returns:
        Maximum relative error over the checked elements
    """
    graph = Graph()
    root = fn(graph)
    analytic = backward(graph, root, wrt=tensors)
    rng = np.random.default_rng(seed)
    worst = 0.0

    for tensor in tensors:
        indices = list(np.ndindex(*tensor.shape)) if tensor.shape else [()]
        if max_checks_per_tensor is not None and len(indices) > max_checks_per_tensor:
            picks = rng.choice(len(indices), size=max_checks_per_tensor, replace=False)
            indices = [indices[i] for i in sorted(picks)]
        original = tensor.data
        for idx in indices:
            plus = original.copy()
            plus[idx] += h
            tensor.data = plus
            f_plus = fn(Graph()).item()
            minus = original.copy()
            minus[idx] -= h
            tensor.data = minus
            f_minus = fn(Graph()).item()
            tensor.data = original
            numeric = (f_plus - f_minus) / (2.0 * h)
            worst = max(worst, relative_error(float(analytic[tensor][idx]), numeric))
    return worst
