"""Dense float64 tensors with reverse-mode automatic differentiation.

Define-by-run: each operation runs eagerly on numpy arrays and records its
parents plus a backward rule on the output, so the computation graph is
rebuilt per batch. That keeps things correct when the live layer set of a
model changes between pruning steps. Everything is 64-bit; at desk scale
speed is not binding and the tight dtype keeps gradient checks sharp.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


class TensorError(Exception):
    """Base class for tensor-graph failures."""


class ShapeMismatchError(TensorError):
    def __init__(self, op: str, detail: str):
        super().__init__(f"{op}: {detail}")
        self.op = op


class NonFiniteError(TensorError):
    def __init__(self, op: str, node_id: int, detail: str = ""):
        msg = f"non-finite values in output of '{op}' (node {node_id})"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)
        self.op = op
        self.node_id = node_id


_node_ids = itertools.count()

_grad_enabled = True


class no_grad:
    """Context manager that skips backward bookkeeping; evaluation paths use
    it so inference forwards stay cheap."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """float64 array plus the bookkeeping needed for backprop.

    `parents` and `_backward` make every Tensor a node in an implicit
    acyclic graph; node ids increase in creation (topological) order.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "_backward", "node_id")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf", parents=(),
                 check_finite: bool = True):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.op = op
        self.parents = tuple(parents)
        self._backward = None
        self.node_id = next(_node_ids)
        # sum() is one cheap pass; any nan/inf in arr makes it non-finite
        if check_finite and not np.isfinite(arr.sum()):
            raise NonFiniteError(op, self.node_id)

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def grad_or_zero(self) -> np.ndarray:
        """Gradient array; zeros when the tensor was unused in the last backward."""
        if self.grad is None:
            return np.zeros_like(self.data)
        return self.grad

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        backward(self)


def _result(data, op, parents, backward_fn, check_finite=False):
    """Wrap an op output. Finite values are only re-checked where an op can
    actually introduce nan/inf from finite inputs (division by a zero
    normalizer); purely arithmetic ops inherit finiteness from their
    (already checked) inputs."""
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, op=op, parents=parents if needs else (),
                 check_finite=check_finite)
    if needs:
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` over the axes numpy broadcast when producing it from `shape`."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _accumulate(t: Tensor, g: np.ndarray):
    # grads are never mutated in place, so holding a view of out.grad is safe
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


# ---------------------------------------------------------------------------
# ops


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeMismatchError("add", f"cannot broadcast {a.data.shape} with {b.data.shape}")

    def bw(out):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(out.grad, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(out.grad, b.data.shape))

    return _result(data, "add", (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeMismatchError("mul", f"cannot broadcast {a.data.shape} with {b.data.shape}")

    def bw(out):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(out.grad * b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(out.grad * a.data, b.data.shape))

    return _result(data, "mul", (a, b), bw)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    data = a.data * s

    def bw(out):
        if a.requires_grad:
            _accumulate(a, out.grad * s)

    return _result(data, "scale", (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeMismatchError("matmul", f"operands must be >= 2-D, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeMismatchError(
            "matmul", f"inner dims differ: {a.data.shape} @ {b.data.shape}"
        )
    try:
        data = a.data @ b.data
    except ValueError:
        raise ShapeMismatchError("matmul", f"batch dims incompatible: {a.data.shape} @ {b.data.shape}")

    def bw(out):
        g = out.grad
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            _accumulate(a, _unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            _accumulate(b, _unbroadcast(gb, b.data.shape))

    return _result(data, "matmul", (a, b), bw)


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def bw(out):
        if a.requires_grad:
            _accumulate(a, out.grad.reshape(a.data.shape))

    return _result(data, "reshape", (a,), bw)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    data = np.ascontiguousarray(a.data.transpose(axes))
    inverse = tuple(np.argsort(axes))

    def bw(out):
        if a.requires_grad:
            _accumulate(a, out.grad.transpose(inverse))

    return _result(data, "transpose", (a,), bw)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis. Rows are stochastic: non-negative, sum 1."""
    x = a.data
    data = x - x.max(axis=-1, keepdims=True)
    np.exp(data, out=data)
    data /= data.sum(axis=-1, keepdims=True)

    def bw(out):
        if a.requires_grad:
            y, g = data, out.grad
            dot = (g * y).sum(axis=-1, keepdims=True)
            _accumulate(a, y * (g - dot))

    # an all-masked row yields 0/0 here, so the finite check stays on
    return _result(data, "softmax", (a,), bw, check_finite=True)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the affine (gamma, beta)."""
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeMismatchError("layernorm", f"affine params must be ({d},), got {gamma.data.shape}, {beta.data.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc
    xhat *= inv
    data = xhat * gamma.data
    data += beta.data

    def bw(out):
        g = out.grad
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            _accumulate(beta, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gg = g * gamma.data
            m1 = gg.mean(axis=-1, keepdims=True)
            m2 = (gg * xhat).mean(axis=-1, keepdims=True)
            _accumulate(x, (gg - m1 - xhat * m2) * inv)

    return _result(data, "layernorm", (x, gamma, beta), bw)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU via the tanh approximation used by the BERT family."""
    v = x.data
    v2 = v * v
    inner = v2 * v
    inner *= 0.044715
    inner += v
    inner *= _GELU_C
    t = np.tanh(inner, out=inner)
    data = 1.0 + t
    data *= v
    data *= 0.5

    def bw(out):
        if x.requires_grad:
            dinner = _GELU_C * (1.0 + 3 * 0.044715 * v2)
            dv = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner
            _accumulate(x, out.grad * dv)

    return _result(data, "gelu", (x,), bw)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: out[..., :] = table[ids[...], :]."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ShapeMismatchError(
            "embedding", f"id out of range [0, {table.data.shape[0]}): min={ids.min()}, max={ids.max()}"
        )
    data = table.data[ids]

    def bw(out):
        if table.requires_grad:
            g = np.zeros_like(table.data)
            np.add.at(g, ids.reshape(-1), out.grad.reshape(-1, table.data.shape[1]))
            _accumulate(table, g)

    return _result(data, "embedding", (table,), bw)


def token_at(x: Tensor, pos: int) -> Tensor:
    """Select position `pos` along axis 1 of a (batch, seq, dim) tensor."""
    if x.data.ndim != 3:
        raise ShapeMismatchError("token_at", f"expected 3-D input, got {x.data.shape}")
    data = np.ascontiguousarray(x.data[:, pos, :])

    def bw(out):
        if x.requires_grad:
            g = np.zeros_like(x.data)
            g[:, pos, :] = out.grad
            _accumulate(x, g)

    return _result(data, "token_at", (x,), bw)


def sum_all(a: Tensor) -> Tensor:
    data = a.data.sum()

    def bw(out):
        if a.requires_grad:
            _accumulate(a, np.full_like(a.data, float(out.grad)))

    return _result(data, "sum", (a,), bw)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    data = a.data.sum() / n

    def bw(out):
        if a.requires_grad:
            _accumulate(a, np.full_like(a.data, float(out.grad) / n))

    return _result(data, "mean", (a,), bw)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross entropy of integer labels against `logits` (batch, classes)."""
    labels = np.asarray(labels)
    if logits.data.ndim != 2:
        raise ShapeMismatchError("cross_entropy", f"logits must be 2-D, got {logits.data.shape}")
    n, c = logits.data.shape
    if labels.shape != (n,):
        raise ShapeMismatchError("cross_entropy", f"labels shape {labels.shape} != ({n},)")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ShapeMismatchError("cross_entropy", f"label out of range [0, {c})")
    logp = _log_softmax(logits.data)
    data = -logp[np.arange(n), labels].mean()

    def bw(out):
        if logits.requires_grad:
            p = np.exp(logp)
            p[np.arange(n), labels] -= 1.0
            _accumulate(logits, out.grad * p / n)

    return _result(data, "cross_entropy", (logits,), bw, check_finite=True)


def kl_divergence(teacher_logits: Tensor, student_logits: Tensor, temperature: float = 1.0) -> Tensor:
    """Mean over the batch of KL(softmax(t/T) || softmax(s/T)).

    The teacher side is treated as a constant: gradients flow to the student
    logits only.
    """
    if teacher_logits.data.shape != student_logits.data.shape:
        raise ShapeMismatchError(
            "kl_divergence",
            f"logit shapes differ: {teacher_logits.data.shape} vs {student_logits.data.shape}",
        )
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    n = teacher_logits.data.shape[0]
    logp = _log_softmax(teacher_logits.data / temperature)
    logq = _log_softmax(student_logits.data / temperature)
    p = np.exp(logp)
    data = (p * (logp - logq)).sum(axis=-1).mean()

    def bw(out):
        if student_logits.requires_grad:
            q = np.exp(logq)
            _accumulate(student_logits, out.grad * (q - p) / (n * temperature))

    return _result(data, "kl_divergence", (teacher_logits, student_logits), bw, check_finite=True)


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor):
    """Reverse-mode sweep from a scalar loss.

    Gradients accumulate into `.grad` of every requires_grad tensor reached
    from `loss`; unreached parameters keep grad None (read as zeros via
    `grad_or_zero`).
    """
    if loss.data.size != 1:
        raise TensorError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise TensorError("backward: loss does not require grad (no forward pass recorded)")

    topo: list[Tensor] = []
    visited = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        # nodes on requires_grad branches the loss never reached keep grad None
        if node._backward is not None and node.grad is not None:
            node._backward(node)


def zero_grads(params) -> None:
    for p in (params.values() if isinstance(params, dict) else params):
        p.zero_grad()


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Standard Adam with bias correction over a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr < 0:
            raise ValueError(f"lr must be >= 0, got {lr}")
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in self.params.items():
            g = p.grad_or_zero()
            if not np.all(np.isfinite(g)):
                raise NonFiniteError("adam_step", p.node_id, f"gradient of parameter '{name}'")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            mhat = m / bc1
            vhat = v / bc2
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self):
        zero_grads(self.params)
