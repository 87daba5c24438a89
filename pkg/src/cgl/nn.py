"""Small dense-tensor core: reverse-mode autodiff, dense blocks, losses, Adam.

Everything is float64 numpy. Graph nodes are ``Tensor`` objects that remember
their parents and a closure mapping the upstream gradient to parent gradients.
``backward`` returns gradients in a dict instead of accumulating them on the
leaves, so several threads can differentiate through shared parameters at once.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, DataError, NumericalError, UsageError

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
ACTIVATIONS = ("relu", "identity")


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        return mul(self, 1.0 / float(scalar))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return total(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        s = float(b)
        return _node(a.data * s, (a,), lambda g: (g * s,))

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _node(a.data @ b.data, (a, b), backward)


def total(a: Tensor) -> Tensor:
    return _node(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def add_all(terms: Sequence[Tensor]) -> Tensor:
    """Sum of equally shaped tensors as one graph node."""
    if not terms:
        raise UsageError("add_all needs at least one tensor")
    data = terms[0].data.copy()
    for t in terms[1:]:
        data = data + t.data
    return _node(data, tuple(terms), lambda g: tuple(g for _ in terms))


# ------------------------------------------------------------------ relu masks

_mask_log = threading.local()


class record_relu_masks:
    """Collect every relu on/off pattern computed in this thread.

    Used by ``finite_difference_check`` to skip coordinates whose perturbation
    moves a pre-activation across zero, where the function is not differentiable.
    """

    def __enter__(self):
        self.masks = []
        self._previous = getattr(_mask_log, "masks", None)
        _mask_log.masks = self.masks
        return self

    def __exit__(self, *exc):
        _mask_log.masks = self._previous
        return False


def _log_mask(mask):
    masks = getattr(_mask_log, "masks", None)
    if masks is not None:
        masks.append(mask.copy())


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    _log_mask(mask)
    return _node(x.data * mask, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------- dense blocks


class DenseBlock:
    """``act(x @ weight + bias)``; weight is stored fan_in x fan_out."""

    def __init__(self, weight, bias, activation="relu", name="dense"):
        weight = np.asarray(weight, dtype=np.float64)
        bias = np.asarray(bias, dtype=np.float64)
        if weight.ndim != 2:
            raise ConfigurationError(f"{name}: weight must be 2-D, got shape {weight.shape}")
        if bias.shape != (weight.shape[1],):
            raise ConfigurationError(
                f"{name}: bias shape {bias.shape} does not match fan_out {weight.shape[1]}"
            )
        if activation not in ACTIVATIONS:
            raise ConfigurationError(f"{name}: unknown activation {activation!r}")
        self.weight = Tensor(weight, requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(bias, requires_grad=True, name=f"{name}.bias")
        self.activation = activation
        self.name = name

    @classmethod
    def init(cls, rng: np.random.Generator, fan_in, fan_out, activation="relu", name="dense"):
        bound = np.sqrt(6.0 / fan_in)
        weight = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        return cls(weight, np.zeros(fan_out), activation, name)

    @property
    def fan_in(self):
        return self.weight.shape[0]

    @property
    def fan_out(self):
        return self.weight.shape[1]

    def parameters(self):
        return [self.weight, self.bias]

    def n_params(self):
        return self.weight.data.size + self.bias.data.size

    def __repr__(self):
        return f"DenseBlock({self.fan_in}->{self.fan_out}, {self.activation}, name={self.name!r})"


def dense_forward(x, block: DenseBlock, track=True) -> Tensor:
    """One fused graph node for ``act(x @ W + b)``.

    With ``track=False`` the result is a constant (no graph), which is how
    detached teacher logits are produced.
    """
    x = _as_tensor(x)
    if x.data.ndim != 2 or x.shape[1] != block.fan_in:
        raise ConfigurationError(
            f"{block.name}: input shape {x.shape} incompatible with fan_in {block.fan_in}"
        )
    W, b = block.weight, block.bias
    pre = x.data @ W.data + b.data
    if block.activation == "relu":
        mask = pre > 0
        _log_mask(mask)
        out = pre * mask
    else:
        mask = None
        out = pre
    if not track:
        return Tensor(out)

    def backward(g):
        gp = g * mask if mask is not None else g
        gx = gp @ W.data.T if x.requires_grad else None
        return gx, x.data.T @ gp, gp.sum(axis=0)

    return _node(out, (x, W, b), backward)


# ------------------------------------------------------------ softmax & losses


def _softmax_array(z: np.ndarray, T: float) -> np.ndarray:
    u = z / T
    u = u - u.max(axis=-1, keepdims=True)
    e = np.exp(u)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax_array(z: np.ndarray, T: float) -> np.ndarray:
    u = z / T
    u = u - u.max(axis=-1, keepdims=True)
    return u - np.log(np.exp(u).sum(axis=-1, keepdims=True))


def _check_temperature(T):
    if not T > 0:
        raise ConfigurationError(f"temperature must be > 0, got {T}")


def softmax(logits, T=1.0) -> Tensor:
    _check_temperature(T)
    z = _as_tensor(logits)
    s = _softmax_array(z.data, T)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)) / T,)

    return _node(s, (z,), backward)


def log_softmax(logits, T=1.0) -> Tensor:
    _check_temperature(T)
    z = _as_tensor(logits)
    ls = _log_softmax_array(z.data, T)

    def backward(g):
        return ((g - np.exp(ls) * g.sum(axis=-1, keepdims=True)) / T,)

    return _node(ls, (z,), backward)


def _reduce_scale(reduction, batch):
    if reduction == "sum":
        return 1.0
    if reduction == "mean":
        return 1.0 / batch
    raise ConfigurationError(f"loss_reduction must be 'sum' or 'mean', got {reduction!r}")


def _check_labels(labels, n_rows, n_classes):
    labels = np.asarray(labels)
    if labels.shape != (n_rows,):
        raise DataError(f"expected {n_rows} labels, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise DataError("labels must be integers")
    bad = (labels < 0) | (labels >= n_classes)
    if bad.any():
        i = int(np.argmax(bad))
        raise DataError(f"label {labels[i]} at position {i} outside [0, {n_classes - 1}]")
    return labels


def cross_entropy(probs, labels, reduction="sum") -> Tensor:
    """Negative log-probability of the true class, summed over the batch."""
    p = _as_tensor(probs)
    B, C = p.shape
    labels = _check_labels(labels, B, C)
    scale = _reduce_scale(reduction, B)
    rows = np.arange(B)
    picked = np.maximum(p.data[rows, labels], PROB_FLOOR)
    value = -np.log(picked).sum() * scale

    def backward(g):
        gp = np.zeros_like(p.data)
        gp[rows, labels] = -g * scale / picked
        return (gp,)

    return _node(np.asarray(value), (p,), backward)


def kl_divergence(teacher_probs, student_probs, reduction="sum") -> Tensor:
    """KL(teacher || student) summed over samples and classes.

    Teacher entries equal to zero contribute nothing; student probabilities are
    floored at ``PROB_FLOOR``.
    """
    t, s = _as_tensor(teacher_probs), _as_tensor(student_probs)
    if t.shape != s.shape:
        raise ConfigurationError(f"teacher shape {t.shape} != student shape {s.shape}")
    scale = _reduce_scale(reduction, t.shape[0])
    pos = t.data > 0
    if np.any(pos & (s.data < PROB_FLOOR)):
        logger.warning("student probability below %g where teacher > 0; clamping", PROB_FLOOR)
    s_safe = np.maximum(s.data, PROB_FLOOR)
    log_t = np.log(np.where(pos, t.data, 1.0))
    log_s = np.log(s_safe)
    value = np.where(pos, t.data * (log_t - log_s), 0.0).sum() * scale

    def backward(g):
        gt = np.where(pos, log_t - log_s + 1.0, np.log(PROB_FLOOR) - log_s + 1.0) * g * scale
        gs = -t.data / s_safe * g * scale
        return gt, gs

    return _node(np.asarray(value), (t, s), backward)


def softmax_cross_entropy(logits, labels, reduction="sum") -> Tensor:
    """``cross_entropy(softmax(logits), labels)`` computed through log-softmax."""
    z = _as_tensor(logits)
    B, C = z.shape
    labels = _check_labels(labels, B, C)
    scale = _reduce_scale(reduction, B)
    ls = _log_softmax_array(z.data, 1.0)
    rows = np.arange(B)
    value = -ls[rows, labels].sum() * scale

    def backward(g):
        gz = np.exp(ls)
        gz[rows, labels] -= 1.0
        return (gz * (g * scale),)

    return _node(np.asarray(value), (z,), backward)


def distill_kl(teacher_logits, student_logits, T, reduction="sum") -> Tensor:
    """KL between temperature-softened teacher and student distributions.

    Equal to ``kl_divergence(softmax(zt, T), softmax(zs, T))`` but computed from
    log-softmax, so no probability floor is needed.
    """
    _check_temperature(T)
    zt, zs = _as_tensor(teacher_logits), _as_tensor(student_logits)
    if zt.shape != zs.shape:
        raise ConfigurationError(f"teacher shape {zt.shape} != student shape {zs.shape}")
    scale = _reduce_scale(reduction, zt.shape[0])
    lt = _log_softmax_array(zt.data, T)
    lsm = _log_softmax_array(zs.data, T)
    pt = np.exp(lt)
    diff = lt - lsm
    per_row = (pt * diff).sum(axis=-1, keepdims=True)
    value = per_row.sum() * scale

    def backward(g):
        c = g * scale / T
        g_teacher = pt * (diff - per_row) * c if zt.requires_grad else None
        g_student = (np.exp(lsm) - pt) * c
        return g_teacher, g_student

    return _node(np.asarray(value), (zt, zs), backward)


# -------------------------------------------------------------------- backward


def backward(loss: Tensor, grad=None) -> dict:
    """Reverse-mode sweep from ``loss``.

    Returns ``{leaf_tensor: gradient}`` for every leaf with ``requires_grad``
    reachable from ``loss``. Leaves are not mutated.
    """
    if not isinstance(loss, Tensor):
        raise UsageError(f"backward expects a Tensor, got {type(loss).__name__}")
    if not loss.requires_grad:
        raise UsageError("backward called on a tensor with no recorded graph; run a forward pass first")
    if grad is None:
        if loss.data.size != 1:
            raise UsageError(f"backward needs an explicit gradient for non-scalar shape {loss.shape}")
        grad = np.ones_like(loss.data)

    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    grads = {id(loss): np.asarray(grad, dtype=np.float64)}
    leaves = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            leaves[node] = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return leaves


def sum_gradients(parts: Sequence[dict]) -> dict:
    """Add per-student gradient dicts in the given order."""
    out: dict = {}
    for part in parts:
        for leaf, g in part.items():
            out[leaf] = out[leaf] + g if leaf in out else g
    return out


# ------------------------------------------------------------------------ Adam


@dataclass
class AdamState:
    first_moment: list
    second_moment: list
    step_count: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray], **hyper):
        return cls(
            [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0, **hyper
        )


def adam_step(params, grads, state: AdamState, names=None):
    """One bias-corrected Adam update. Pure: returns new arrays and a new state."""
    if not state.lr > 0:
        raise ConfigurationError(f"learning rate must be > 0, got {state.lr}")
    if not (len(params) == len(grads) == len(state.first_moment) == len(state.second_moment)):
        raise ConfigurationError("params, grads and moments must have equal length")
    names = names or [f"param[{i}]" for i in range(len(params))]
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_params, new_m, new_v = [], [], []
    for name, p, g, m, v in zip(names, params, grads, state.first_moment, state.second_moment):
        if p.shape != g.shape or p.shape != m.shape:
            raise ConfigurationError(f"{name}: shape mismatch param {p.shape} grad {g.shape} moment {m.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in {name} at Adam step {t}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        new_params.append(p - state.lr * update)
        new_m.append(m)
        new_v.append(v)
    new_state = AdamState(new_m, new_v, t, state.lr, b1, b2, state.epsilon)
    return new_params, new_state


# ----------------------------------------------------------- gradient checking


@dataclass
class GradCheck:
    max_rel_error: float
    n_checked: int
    n_skipped: int = 0
    worst: tuple = field(default=())

    def __float__(self):
        return self.max_rel_error


def finite_difference_check(scalar_fn: Callable[[], Tensor], params: Sequence[Tensor], eps=1e-5) -> GradCheck:
    """Compare autodiff gradients with central differences, coordinate by coordinate.

    ``scalar_fn`` must rebuild the graph from the current parameter values.
    Coordinates where either perturbation flips a relu gate are skipped.
    The returned error for each coordinate is
    ``|g_a - g_fd| / max(1e-8, |g_a| + |g_fd|)``.
    """
    if not 0 < eps <= 1e-2:
        raise ConfigurationError(f"eps must lie in (0, 1e-2], got {eps}")
    with record_relu_masks() as rec:
        loss = scalar_fn()
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise UsageError("finite_difference_check needs a function returning a scalar Tensor")
    base_masks = rec.masks
    analytic = backward(loss)

    worst_err, worst_at = 0.0, ()
    checked = skipped = 0
    for p in params:
        p.data = np.ascontiguousarray(p.data)
        g_a = analytic.get(p, np.zeros_like(p.data))
        flat = p.data.reshape(-1)
        g_flat = g_a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            values = []
            same_gates = True
            for shift in (eps, -eps):
                flat[i] = orig + shift
                with record_relu_masks() as r:
                    values.append(scalar_fn().item())
                if same_gates:
                    same_gates = len(r.masks) == len(base_masks) and all(
                        np.array_equal(a, b) for a, b in zip(r.masks, base_masks)
                    )
            flat[i] = orig
            if not same_gates:
                skipped += 1
                continue
            g_fd = (values[0] - values[1]) / (2 * eps)
            err = abs(g_flat[i] - g_fd) / max(1e-8, abs(g_flat[i]) + abs(g_fd))
            checked += 1
            if err > worst_err:
                worst_err, worst_at = err, (p.name, i, float(g_flat[i]), g_fd)
    return GradCheck(worst_err, checked, skipped, worst_at)
