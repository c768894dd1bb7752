"""
Dense float64 arrays with a record-then-reverse gradient tape.

Every kernel computes its forward value with numpy and, when a ComputeGraph is
recording on the current thread and one of its inputs requires a gradient,
appends a node holding the exact vector-Jacobian product of that kernel.
backward() walks the recorded nodes in reverse recording order, which is a
valid topological order because a node can only consume arrays that already
exist.

Graphs are thread-local: one thread records into one graph at a time, so
independent models may train side by side in separate threads.
"""
import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Mapping, Optional, Tuple

import numpy as np

from caformer.errors import ContractError, DimensionError, NumericError, ReproducibilityError

EPS = 1e-5

_state = threading.local()


def active_graph():
    return getattr(_state, "graph", None)


class NdArray:
    """
    Description:
        Row-major float64 array with optional gradient tracking.

    Invariants:
        data is finite everywhere (construction raises NumericError otherwise);
        grad, when set, has the same shape as data.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        data = np.asarray(data, dtype=np.float64)
        if not np.isfinite(data).all():
            raise NumericError("non-finite value in %s" % (name or "array"))
        self.data = data
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ContractError("item() of an array with shape %s" % (self.shape,))
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        label = " %s" % self.name if self.name else ""
        return "NdArray%s(shape=%s, requires_grad=%s)" % (label, self.shape, self.requires_grad)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return divide_scalar(self, other)
        return divide(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_array(value):
    return value if isinstance(value, NdArray) else NdArray(value)


class _Node:
    __slots__ = ("kernel", "output", "inputs", "vjp")

    def __init__(self, kernel, output, inputs, vjp):
        self.kernel = kernel
        self.output = output
        self.inputs = inputs
        self.vjp = vjp


class ComputeGraph:
    """
    Ordered tape of primitive applications plus the named leaf parameters whose
    gradients backward() reports.
    """

    def __init__(self, params: Optional[Mapping[str, NdArray]] = None):
        self.nodes = []
        self.params = {}
        for name, array in (params or {}).items():
            self.watch(name, array)

    def watch(self, name, array):
        array.requires_grad = True
        self.params[name] = array
        return array

    @contextmanager
    def recording(self):
        previous = active_graph()
        _state.graph = self
        try:
            yield self
        finally:
            _state.graph = previous

    def record(self, kernel, output, inputs, vjp):
        self.nodes.append(_Node(kernel, output, inputs, vjp))

    def backward(self, loss):
        return backward(self, loss)


def _result(kernel, value, inputs, vjp):
    if not np.isfinite(value).all():
        raise NumericError("%s produced a non-finite value" % kernel)
    out = NdArray.__new__(NdArray)
    out.data = np.asarray(value, dtype=np.float64)
    out.requires_grad = False
    out.grad = None
    out.name = None
    graph = active_graph()
    if graph is not None and any(x.requires_grad for x in inputs):
        out.requires_grad = True
        graph.record(kernel, out, inputs, vjp)
    return out


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(kernel, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(kernel, a.shape, b.shape) from None


# elementwise


def add(a, b):
    a, b = as_array(a), as_array(b)
    _broadcast_shape("add", a, b)
    return _result("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def subtract(a, b):
    a, b = as_array(a), as_array(b)
    _broadcast_shape("subtract", a, b)
    return _result("subtract", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def multiply(a, b):
    a, b = as_array(a), as_array(b)
    _broadcast_shape("multiply", a, b)
    return _result("multiply", a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def divide(a, b):
    a, b = as_array(a), as_array(b)
    _broadcast_shape("divide", a, b)
    if np.any(b.data == 0.0):
        raise NumericError("divide: zero in denominator")
    return _result("divide", a.data / b.data, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def scale(x, factor):
    x = as_array(x)
    factor = float(factor)
    return _result("scale", x.data * factor, (x,), lambda g: (g * factor,))


def divide_scalar(x, divisor):
    divisor = float(divisor)
    if divisor == 0.0:
        raise NumericError("divide_scalar: division by zero")
    return scale(x, 1.0 / divisor)


def relu(x):
    x = as_array(x)
    active = x.data > 0.0
    return _result("relu", np.where(active, x.data, 0.0), (x,), lambda g: (g * active,))


def absolute(x):
    x = as_array(x)
    sign = np.sign(x.data)
    return _result("absolute", np.abs(x.data), (x,), lambda g: (g * sign,))


def masked_fill(x, mask, value=0.0):
    x = as_array(x)
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim > x.ndim or mask.shape != x.shape[x.ndim - mask.ndim:]:
        raise DimensionError("masked_fill", x.shape, mask.shape)
    return _result("masked_fill", np.where(mask, float(value), x.data), (x,),
                   lambda g: (np.where(mask, 0.0, g),))


# shape


def reshape(x, shape):
    x = as_array(x)
    shape = tuple(shape)
    try:
        value = x.data.reshape(shape)
    except ValueError:
        raise DimensionError("reshape", x.shape, shape) from None
    original = x.shape
    return _result("reshape", value, (x,), lambda g: (g.reshape(original),))


def flatten(x, start_axis=0):
    x = as_array(x)
    start_axis = start_axis % max(x.ndim, 1)
    return reshape(x, x.shape[:start_axis] + (-1,))


def swapaxes(x, axis1, axis2):
    x = as_array(x)
    return _result("swapaxes", np.swapaxes(x.data, axis1, axis2), (x,),
                   lambda g: (np.swapaxes(g, axis1, axis2),))


def concat(arrays, axis=-1):
    arrays = [as_array(a) for a in arrays]
    if axis != -1:
        raise ContractError("concat is defined along the last axis only")
    head = arrays[0].shape[:-1]
    for a in arrays[1:]:
        if a.shape[:-1] != head:
            raise DimensionError("concat", arrays[0].shape, a.shape)
    bounds = np.cumsum([a.shape[-1] for a in arrays])[:-1]
    return _result("concat", np.concatenate([a.data for a in arrays], axis=-1), tuple(arrays),
                   lambda g: tuple(np.split(g, bounds, axis=-1)))


# linear algebra


def matmul(a, b):
    """Batched matrix product; leading axes must agree exactly."""
    a, b = as_array(a), as_array(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError("matmul", a.shape, b.shape)
    return _result("matmul", a.data @ b.data, (a, b),
                   lambda g: (g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g))


def affine(x, weight, bias=None):
    """Fully-connected map over the last axis: x @ weight + bias."""
    x, weight = as_array(x), as_array(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise DimensionError("affine", x.shape, weight.shape)
    inputs = (x, weight)
    value = x.data @ weight.data
    if bias is not None:
        bias = as_array(bias)
        if bias.shape != (weight.shape[1],):
            raise DimensionError("affine", weight.shape, bias.shape)
        value = value + bias.data
        inputs = inputs + (bias,)

    def vjp(g):
        flat_x = x.data.reshape(-1, weight.shape[0])
        flat_g = g.reshape(-1, weight.shape[1])
        grads = (g @ weight.data.T, flat_x.T @ flat_g)
        if bias is not None:
            grads = grads + (flat_g.sum(axis=0),)
        return grads

    return _result("affine", value, inputs, vjp)


# reductions and normalizations over the last axis


def softmax(x):
    x = as_array(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    return _result("softmax", y, (x,),
                   lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def log_softmax(x):
    x = as_array(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y = shifted - log_norm
    probs = np.exp(y)
    return _result("log_softmax", y, (x,),
                   lambda g: (g - probs * g.sum(axis=-1, keepdims=True),))


def row_normalize(x):
    """L1 renormalization of non-negative rows (the "Norm" applied after softmax)."""
    x = as_array(x)
    total = x.data.sum(axis=-1, keepdims=True)
    if np.any(total <= 0.0):
        raise NumericError("row_normalize: row without positive mass")
    y = x.data / total
    return _result("row_normalize", y, (x,),
                   lambda g: ((g - (g * y).sum(axis=-1, keepdims=True)) / total,))


def mean_last(x):
    x = as_array(x)
    n = x.shape[-1]
    shape = x.shape
    return _result("mean_last", x.data.mean(axis=-1), (x,),
                   lambda g: (np.broadcast_to(g[..., None] / n, shape).copy(),))


def standardize(x, eps=EPS):
    """Layer-style standardization over the last axis, (x - mean) / sqrt(var + eps)."""
    x = as_array(x)
    centred = x.data - x.data.mean(axis=-1, keepdims=True)
    scale_ = np.sqrt((centred * centred).mean(axis=-1, keepdims=True) + eps)
    y = centred / scale_

    def vjp(g):
        return ((g - g.mean(axis=-1, keepdims=True) - y * (g * y).mean(axis=-1, keepdims=True)) / scale_,)

    return _result("standardize", y, (x,), vjp)


def sum_all(x):
    x = as_array(x)
    shape = x.shape
    return _result("sum_all", np.asarray(x.data.sum()), (x,),
                   lambda g: (np.full(shape, float(g)),))


def mean_all(x):
    x = as_array(x)
    if x.size == 0:
        raise ContractError("mean_all of an empty array")
    return divide_scalar(sum_all(x), x.size)


def backward(graph: ComputeGraph, loss: NdArray):
    """
    Reverse-mode sweep over graph for the scalar loss.

    Returns a mapping parameter name -> gradient and stores the same buffers in
    each leaf's .grad; parameters the loss does not depend on get zeros. The
    sweep keeps its own accumulator, so repeating it gives identical results.
    """
    if loss.size != 1:
        raise ContractError("backward needs a scalar loss, got shape %s" % (loss.shape,))
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for source, contribution in zip(node.inputs, node.vjp(g)):
            if contribution is None or not source.requires_grad:
                continue
            key = id(source)
            grads[key] = grads[key] + contribution if key in grads else contribution
    gradients = {}
    for name, param in graph.params.items():
        g = grads.get(id(param))
        param.grad = np.zeros_like(param.data) if g is None else np.array(g, dtype=np.float64).reshape(param.shape)
        gradients[name] = param.grad
    return gradients


@dataclass
class GradCheckReport:
    max_rel_error: float
    parameter: Optional[str]
    index: Optional[Tuple[int, ...]]
    checked: int

    def to_dict(self):
        return {"max_rel_error": self.max_rel_error, "parameter": self.parameter,
                "index": list(self.index) if self.index is not None else None, "checked": self.checked}


def relative_error(a, b):
    return abs(a - b) / max(1e-8, abs(a), abs(b))


def grad_check(f: Callable[[Mapping[str, NdArray]], NdArray], params: Mapping[str, NdArray], fd_step=1e-5):
    """
    Compare the tape gradient of every parameter entry of f against central
    finite differences with step fd_step.
    """
    if not 0.0 < fd_step <= 1e-2:
        raise ContractError("fd_step must lie in (0, 1e-2], got %r" % fd_step)
    graph = ComputeGraph(params)
    with graph.recording():
        loss = f(params)
    analytic = backward(graph, loss)
    base = loss.item()
    if f(params).item() != base:
        raise ReproducibilityError("f returned different values for identical parameters")

    worst = GradCheckReport(0.0, None, None, 0)
    for name, param in params.items():
        original = param.data
        for index in np.ndindex(*original.shape):
            bumped = original.copy()
            bumped[index] += fd_step
            param.data = bumped
            plus = f(params).item()
            bumped = original.copy()
            bumped[index] -= fd_step
            param.data = bumped
            minus = f(params).item()
            param.data = original
            numeric = (plus - minus) / (2.0 * fd_step)
            err = relative_error(float(analytic[name][index]), numeric)
            worst.checked += 1
            if err > worst.max_rel_error:
                worst.max_rel_error = err
                worst.parameter = name
                worst.index = tuple(int(i) for i in index)
    return worst


def uniform_init(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)
