"""
Reverse-mode automatic differentiation over numpy arrays.

Every op builds its forward value with numpy and, when a Tape is recording on
the current thread and one of its inputs needs a gradient, records a closure
that maps the output gradient to input gradients. Outside a tape the same ops
run forward-only, which is what inference uses.

Usage:
    with Tape() as tape:
        loss = model_loss(...)
    tape.backward(loss)       # accumulates into Tensor.grad of every parameter
    optimizer.step()
"""

import logging
import threading
from collections import OrderedDict

import numpy as np

logger = logging.getLogger(__name__)

DTYPE = np.float64

# Additive stand-in for -inf in masked logits; exp() of it is exactly 0.
MASK_VALUE = -1e9

_state = threading.local()


class NonFiniteError(ValueError):
    """An op produced NaN or Inf."""


def _active_tape():
    return getattr(_state, "tape", None)


class Tape:
    """
    Records differentiable ops for one forward pass on one thread.

    A tape can be consumed by exactly one backward call.
    """

    def __init__(self):
        self.nodes = []
        self.consumed = False

    def __enter__(self):
        if _active_tape() is not None:
            raise RuntimeError("a tape is already recording on this thread")
        _state.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _state.tape = None
        return False

    def record(self, node):
        self.nodes.append(node)

    def backward(self, loss):
        """
        Accumulate d(loss)/d(param) into `.grad` of every leaf that requires it.

        Args:
            loss (Tensor): scalar produced on this tape.
        """
        if self.consumed:
            raise RuntimeError("backward called twice without a new forward pass")
        if loss.data.size != 1:
            raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
        if loss._tape is not self:
            raise ValueError("loss was not produced on this tape")

        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._backward is None:
                    # leaf parameter
                    parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
                elif id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg
        self.nodes = []
        self.consumed = True


class Tensor:
    """A dense float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_tape")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._backward = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def backward(self):
        if self._tape is None:
            raise RuntimeError("tensor was not produced on a recording tape")
        self._tape.backward(self)

    def __repr__(self):
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward, op):
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = False
    out._parents = ()
    out._backward = None
    out._tape = None
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out._tape = tape
        tape.record(out)
    return out


def _check_leading_broadcast(a_shape, b_shape, op):
    short, long_ = (a_shape, b_shape) if len(a_shape) <= len(b_shape) else (b_shape, a_shape)
    if long_[len(long_) - len(short):] != short:
        raise ValueError(f"{op}: shapes {a_shape} and {b_shape} differ beyond the leading batch dimensions")
    return long_


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    return g.reshape((-1,) + tuple(shape)).sum(axis=0)


# --- elementwise ---

def add(a, b):
    _check_leading_broadcast(a.shape, b.shape, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    _check_leading_broadcast(a.shape, b.shape, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    _check_leading_broadcast(a.shape, b.shape, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward, "mul")


def scale(a, c):
    c = float(c)

    def backward(g):
        return (g * c,)

    return _result(a.data * c, (a,), backward, "scale")


def exp(a):
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return _result(out, (a,), backward, "exp")


def log(a):
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)

    def backward(g):
        return (g / a.data,)

    return _result(out, (a,), backward, "log")


def relu(a):
    positive = a.data > 0

    def backward(g):
        return (g * positive,)

    return _result(np.where(positive, a.data, 0.0), (a,), backward, "relu")


def sigmoid(a):
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ez = np.exp(a.data[~pos])
    out[~pos] = ez / (1.0 + ez)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _result(out, (a,), backward, "sigmoid")


def masked_fill(a, mask, value=MASK_VALUE):
    """Replace entries where `mask` (numpy bool, broadcastable to a) is True."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    keep = ~mask

    def backward(g):
        return (g * keep,)

    return _result(np.where(mask, value, a.data), (a,), backward, "masked_fill")


def dropout(a, rate, rng, training):
    if not training or rate <= 0.0:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return mul(a, Tensor(keep))


# --- reductions and normalizations ---

def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out, dtype=DTYPE), (a,), backward, "sum")


def mean(a, axis=None, keepdims=False):
    count = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def masked_mean(a, mask):
    """
    Mean over axis 1 of a (B, T, d) tensor counting only rows where mask (B, T) is True.
    """
    mask = np.asarray(mask, dtype=bool)
    counts = mask.sum(axis=1)
    if np.any(counts == 0):
        raise ValueError("masked_mean: a batch row has no unmasked position")
    weights = mask / counts[:, None]
    out = np.einsum("bt,btd->bd", weights, a.data)

    def backward(g):
        return (weights[:, :, None] * g[:, None, :],)

    return _result(out, (a,), backward, "masked_mean")


def softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), backward, "softmax")


def log_softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _result(out, (a,), backward, "log_softmax")


def layer_norm(x, gamma, beta, eps=1e-5):
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        d = x.shape[-1]
        gx_hat = g * gamma.data
        gx = inv / d * (d * gx_hat - gx_hat.sum(axis=-1, keepdims=True)
                        - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True))
        lead = g.reshape(-1, d)
        return gx, (lead * xhat.reshape(-1, d)).sum(axis=0), lead.sum(axis=0)

    return _result(out, (x, gamma, beta), backward, "layer_norm")


def l2_normalize(a, axis=-1, eps=1e-12):
    norm = np.sqrt((a.data ** 2).sum(axis=axis, keepdims=True))
    norm = np.maximum(norm, eps)
    out = a.data / norm

    def backward(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return _result(out, (a,), backward, "l2_normalize")


def cosine_similarity(a, b):
    """Pairwise cosine similarity between rows of a (P, d) and b (Q, d) -> (P, Q)."""
    return matmul(l2_normalize(a), transpose(l2_normalize(b), (1, 0)))


# --- linear algebra and shape ---

def matmul(a, b):
    """
    Batched matrix product.

    Both operands share their leading batch dimensions, or b is a plain
    (n, p) matrix applied to every leading batch entry of a.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs at least 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    shared_weight = b.ndim == 2 and a.ndim > 2
    if not shared_weight and a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul: batch dimensions differ, {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if shared_weight:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return _result(out, (a, b), backward, "matmul")


def reshape(a, shape):
    def backward(g):
        return (g.reshape(a.shape),)

    return _result(a.data.reshape(shape), (a,), backward, "reshape")


def transpose(a, axes):
    inverse = np.argsort(axes)

    def backward(g):
        return (np.transpose(g, inverse),)

    return _result(np.transpose(a.data, axes).copy(), (a,), backward, "transpose")


def concat(tensors, axis=0):
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward, "concat")


def getitem(a, index):
    out = np.array(a.data[index], dtype=DTYPE)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(out, (a,), backward, "getitem")


def embedding_lookup(table, ids):
    """Gather rows of a (M, d) table for an integer id array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError(f"embedding_lookup: ids out of range [0, {table.shape[0]})")
    out = table.data[ids]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (full,)

    return _result(out, (table,), backward, "embedding_lookup")


# --- parameters and optimization ---

class ParamStore:
    """Named parameters with their Adam moment buffers."""

    def __init__(self):
        self.params = OrderedDict()
        self.m = {}
        self.v = {}
        self.step = 0

    def add(self, name, values):
        if name in self.params:
            raise ValueError(f"duplicate parameter {name}")
        tensor = Tensor(values, requires_grad=True, name=name)
        self.params[name] = tensor
        self.m[name] = np.zeros_like(tensor.data)
        self.v[name] = np.zeros_like(tensor.data)
        return tensor

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params.values())

    def __len__(self):
        return len(self.params)

    def items(self):
        return self.params.items()

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def n_parameters(self):
        return int(np.sum([p.data.size for p in self.params.values()]))


class Adam:
    """Adam with decoupled weight decay applied at the step."""

    def __init__(self, store, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.store = store
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay

    def step(self):
        store = self.store
        store.step += 1
        t = store.step
        correction1 = 1.0 - self.beta1 ** t
        correction2 = 1.0 - self.beta2 ** t
        for name, p in store.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = store.m[name]
            v = store.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / correction1) / (np.sqrt(v / correction2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data -= self.lr * update
        store.zero_grad()


# --- gradient checking ---

def numerical_grad(f, param, coords, eps=1e-5):
    """Central differences of scalar f() with respect to flat coordinates of param."""
    flat = param.data.reshape(-1)
    out = np.empty(len(coords), dtype=DTYPE)
    for n, c in enumerate(coords):
        original = flat[c]
        flat[c] = original + eps
        plus = f().item()
        flat[c] = original - eps
        minus = f().item()
        flat[c] = original
        out[n] = (plus - minus) / (2.0 * eps)
    return out


def grad_check(f, params, eps=1e-5, max_coords=200, seed=0, analytic=None, floor=1e-8):
    """
    Compare reverse-mode gradients of f() against central differences.

    Args:
        f: zero-argument callable returning a scalar Tensor built from params.
        params: iterable of parameter Tensors (a ParamStore works).
        eps: finite-difference step.
        max_coords: coordinates sampled per parameter when it is larger.
        seed: seed for the coordinate sample.
        analytic: optional precomputed gradients (same order as params).
        floor: lower bound of the relative-error denominator.

    Returns:
        float: max |g_a - g_n| / max(floor, |g_a| + |g_n|) over checked coordinates.
    """
    params = list(params)
    if analytic is None:
        for p in params:
            p.grad = None
        with Tape() as tape:
            loss = f()
        tape.backward(loss)
        analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, g in zip(params, analytic):
        size = p.data.size
        if size <= max_coords:
            coords = np.arange(size)
        else:
            coords = np.sort(rng.choice(size, size=max_coords, replace=False))
        numeric = numerical_grad(f, p, coords, eps)
        exact = np.asarray(g).reshape(-1)[coords]
        err = np.abs(exact - numeric) / np.maximum(floor, np.abs(exact) + np.abs(numeric))
        if err.size:
            worst = max(worst, float(err.max()))
            logger.debug("grad_check %s: max rel err %.3e", p.name, err.max())
    return worst
