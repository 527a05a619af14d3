"""Dense tensors with a reverse-mode differentiation tape

The Tensor class wraps a numpy array in (batch, feature, height, width) layout.
Operations on tensors are plain functions of this module (the arithmetic
operators are overloaded for convenience). Whenever a Tape is active and any
input requires a gradient, the operation is recorded on the tape together with
a closure that maps the output gradient to input gradients.

Typical usage::

    with Tape() as tape:
        loss = some_function(params)
    grads = tape.backward(loss)

The tape is rebuilt for every forward pass, no graph is cached between passes.
"""

import contextlib
import threading
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import special


class ShapeError(ValueError):
    """Shapes of operands do not fulfill the contract of an operation"""


class NumericError(ArithmeticError):
    """An operation produced non-finite values while checked mode was enabled"""

    def __init__(self, op: str):
        super().__init__(f"Operation '{op}' produced non-finite values")
        self.op = op


class TapeError(RuntimeError):
    """Invalid use of the differentiation tape"""


class _Options:
    """Engine wide settings shared by all threads"""

    def __init__(self) -> None:
        self.dtype: type = np.float32
        self.checked: bool = False


_options = _Options()
_local = threading.local()  # the active tape is confined to one thread


def default_dtype() -> type:
    """Floating point type used for newly created tensors"""
    return _options.dtype


def set_checked(flag: bool) -> None:
    """Enable or disable finiteness checks of all operation results"""
    _options.checked = bool(flag)


def is_checked() -> bool:
    """Return if checked mode is enabled"""
    return _options.checked


@contextlib.contextmanager
def precision(bits: int) -> Iterator[None]:
    """Temporarily switch the default floating point precision

    64 bit is needed for finite difference gradient checks

    :param bits: either 32 or 64
    :raises ValueError: for other values
    """
    if bits not in (32, 64):
        raise ValueError(f"Precision must be 32 or 64 bit, got {bits}")
    previous = _options.dtype
    _options.dtype = np.float64 if bits == 64 else np.float32
    try:
        yield
    finally:
        _options.dtype = previous


@contextlib.contextmanager
def checked(flag: bool = True) -> Iterator[None]:
    """Context manager version of set_checked()"""
    previous = _options.checked
    _options.checked = flag
    try:
        yield
    finally:
        _options.checked = previous


class Tensor:
    """Numeric array that can participate in the differentiation tape

    :param data: numpy array holding the values
    :param requires_grad: if gradients should be tracked for this tensor
    :param node: index of the producing node on a tape, None for leaves
    """

    # make numpy defer to the reflected operators, e.g. ndarray * Tensor
    __array_priority__ = 1000

    def __init__(
        self,
        data: Union[np.ndarray, float, Sequence],
        requires_grad: bool = False,
        dtype: Optional[type] = None,
    ) -> None:
        arr = np.asarray(data, dtype=dtype or _options.dtype)
        if arr.ndim > 4:
            raise ShapeError(f"Tensors have at most 4 dimensions, got shape {arr.shape}")
        if any(n == 0 for n in arr.shape):
            raise ShapeError(f"All dimensions must be positive, got shape {arr.shape}")
        self.data: np.ndarray = arr
        self.requires_grad: bool = requires_grad
        self.node: Optional[Tuple[int, int]] = None  # (tape id, node index)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        """Return the underlying array (not a copy)"""
        return self.data

    def item(self) -> float:
        """Return the value of a single element tensor as float"""
        if self.data.size != 1:
            raise ShapeError(f"Tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # arithmetic operators forward to the module functions
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)


Operand = Union[Tensor, np.ndarray, float, int]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class _Node:
    """Single recorded operation"""

    __slots__ = ("op", "output", "inputs", "backward")

    def __init__(self, op: str, output: Tensor, inputs: Sequence[Tensor], backward: BackwardFn):
        self.op = op
        self.output = output
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of operations for reverse-mode differentiation

    Nodes are appended in evaluation order, so every node's inputs precede it.
    A tape can be differentiated once, afterwards it has to be reset.

    :param nodes: recorded operations in topological order
    :param gradients: gradients of the leaves after backward()
    """

    _counter = 0
    _counter_lock = threading.Lock()

    def __init__(self) -> None:
        with Tape._counter_lock:
            Tape._counter += 1
            self.id: int = Tape._counter
        self.nodes: List[_Node] = []
        self.gradients: Dict[Tensor, np.ndarray] = {}
        self.used: bool = False
        self._previous: Optional["Tape"] = None

    def __enter__(self) -> "Tape":
        self._previous = getattr(_local, "tape", None)
        _local.tape = self
        return self

    def __exit__(self, *args) -> None:
        _local.tape = self._previous

    def reset(self) -> None:
        """Drop all recorded nodes and gradients"""
        self.nodes = []
        self.gradients = {}
        self.used = False

    def record(self, op: str, output: Tensor, inputs: Sequence[Tensor], backward: BackwardFn) -> None:
        """Append an operation to the tape"""
        output.node = (self.id, len(self.nodes))
        self.nodes.append(_Node(op, output, inputs, backward))

    def backward(self, root: Tensor) -> Dict[Tensor, np.ndarray]:
        """Accumulate d root / d leaf for all leaves that root depends on

        Leaves are tensors that require gradients but were not produced by an
        operation on this tape (e.g. parameters or inputs).

        :param root: single element tensor that was computed on this tape
        :return gradients: dictionary leaf -> gradient array of the leaf's shape
        :raises TapeError: if root is not scalar, not on the tape or the tape is stale
        """
        if self.used:
            raise TapeError("Tape was already differentiated, reset it before reuse")
        if root.data.size != 1:
            raise TapeError(f"backward() needs a scalar root, got shape {root.shape}")
        if root.node is None or root.node[0] != self.id:
            raise TapeError("Root tensor was not computed on this tape")
        self.used = True

        grads: Dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        leaves: Dict[int, Tensor] = {}
        for node in reversed(self.nodes[: root.node[1] + 1]):
            g_out = grads.pop(id(node.output), None)
            if g_out is None:
                continue
            for inp, g_in in zip(node.inputs, node.backward(g_out)):
                if g_in is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + g_in
                else:
                    grads[key] = g_in
                if inp.node is None or inp.node[0] != self.id:
                    leaves[key] = inp
        self.gradients = {
            leaf: np.asarray(grads[key], dtype=leaf.dtype).reshape(leaf.shape)
            for key, leaf in leaves.items()
        }
        return self.gradients


def active_tape() -> Optional[Tape]:
    """Return the tape of the current thread or None"""
    return getattr(_local, "tape", None)


@contextlib.contextmanager
def suspended() -> Iterator[None]:
    """Evaluate without recording on the active tape"""
    previous = getattr(_local, "tape", None)
    _local.tape = None
    try:
        yield
    finally:
        _local.tape = previous


def as_tensor(x: Operand) -> Tensor:
    """Wrap arrays and numbers as constant tensors"""
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _result(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    """Create the output tensor of an operation and record it if needed"""
    if _options.checked and not np.all(np.isfinite(data)):
        raise NumericError(op)
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(op, out, inputs, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back to the shape of the operand"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


# elementwise arithmetic


def add(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _result(
        "div",
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def neg(x: Operand) -> Tensor:
    x = as_tensor(x)
    return _result("neg", -x.data, (x,), lambda g: (-g,))


def exp(x: Operand) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _result("exp", out, (x,), lambda g: (g * out,))


def log(x: Operand) -> Tensor:
    x = as_tensor(x)
    return _result("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def tanh(x: Operand) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _result("tanh", out, (x,), lambda g: (g * (1 - out * out),))


def sigmoid(x: Operand) -> Tensor:
    x = as_tensor(x)
    out = special.expit(x.data)
    return _result("sigmoid", out, (x,), lambda g: (g * out * (1 - out),))


def softplus(x: Operand) -> Tensor:
    """log(1 + exp(x)) evaluated without overflow"""
    x = as_tensor(x)
    out = np.logaddexp(0, x.data).astype(x.dtype, copy=False)
    return _result("softplus", out, (x,), lambda g: (g * special.expit(x.data),))


def lrelu(x: Operand, slope: float = 0.1) -> Tensor:
    """Leaky ReLU: x for x >= 0, slope * x otherwise

    :raises ValueError: if slope is not within (0, 1)
    """
    if not 0 < slope < 1:
        raise ValueError(f"Leaky ReLU slope must be in (0, 1), got {slope}")
    x = as_tensor(x)
    positive = x.data >= 0
    out = np.where(positive, x.data, slope * x.data).astype(x.dtype, copy=False)
    return _result("lrelu", out, (x,), lambda g: (np.where(positive, g, slope * g),))


def clip(x: Operand, low: Optional[float] = None, high: Optional[float] = None) -> Tensor:
    """Clamp values, the gradient is passed only where the value was inside"""
    x = as_tensor(x)
    out = np.clip(x.data, low, high)
    inside = np.ones(x.shape, dtype=bool)
    if low is not None:
        inside &= x.data >= low
    if high is not None:
        inside &= x.data <= high
    return _result("clip", out, (x,), lambda g: (np.where(inside, g, 0),))


def stop_gradient(x: Operand) -> Tensor:
    """Return a constant copy that cuts the gradient flow"""
    return Tensor(as_tensor(x).data)


# reductions and shape manipulation


def sum(x: Operand, axis: Union[None, int, Tuple[int, ...]] = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result("sum", np.asarray(out), (x,), backward)


def mean(x: Operand, axis: Union[None, int, Tuple[int, ...]] = None) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis), 1.0 / float(count))


def sum_per_example(x: Operand) -> Tensor:
    """Sum over all but the first (batch) axis"""
    x = as_tensor(x)
    return sum(x, tuple(range(1, x.ndim))) if x.ndim > 1 else x


def reshape(x: Operand, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    return _result("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def logsumexp(x: Operand, axis: int = -1) -> Tensor:
    """log(sum(exp(x))) over one axis via the max-shifted scipy implementation"""
    x = as_tensor(x)
    out = special.logsumexp(x.data, axis=axis).astype(x.dtype, copy=False)

    def backward(g):
        weights = np.exp(x.data - np.expand_dims(out, axis))
        return (np.expand_dims(g, axis) * weights,)

    return _result("logsumexp", np.asarray(out), (x,), backward)


def concat_features(parts: Sequence[Operand]) -> Tensor:
    """Concatenate tensors along the feature axis (axis 1)

    :raises ShapeError: if batch or spatial dimensions differ
    """
    tensors = [as_tensor(p) for p in parts]
    if not tensors:
        raise ShapeError("Nothing to concatenate")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeError(f"Cannot concatenate shapes {ref} and {t.shape} along features")
    if len(tensors) == 1:
        return tensors[0]
    sizes = [t.shape[1] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return [g[:, bounds[i] : bounds[i + 1]] for i in range(len(tensors))]

    return _result("concat", np.concatenate([t.data for t in tensors], axis=1), tensors, backward)


def take_features(x: Operand, start: int, stop: int) -> Tensor:
    """Select the feature slice [start, stop)"""
    x = as_tensor(x)

    def backward(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return _result("take", x.data[:, start:stop], (x,), backward)


def pad2d(x: Operand, top: int, bottom: int, left: int, right: int) -> Tensor:
    """Zero-pad the two spatial axes"""
    x = as_tensor(x)
    h, w = x.shape[2:]
    out = np.pad(x.data, ((0, 0), (0, 0), (top, bottom), (left, right)))
    return _result("pad2d", out, (x,), lambda g: (g[:, :, top : top + h, left : left + w],))


def dilate2(x: Operand) -> Tensor:
    """Insert a zero between neighbouring pixels, (h, w) -> (2h-1, 2w-1)"""
    x = as_tensor(x)
    b, c, h, w = x.shape
    out = np.zeros((b, c, 2 * h - 1, 2 * w - 1), dtype=x.dtype)
    out[:, :, ::2, ::2] = x.data
    return _result("dilate2", out, (x,), lambda g: (g[:, :, ::2, ::2],))


# affine maps


def linear(x: Operand, weight: Operand, bias: Operand) -> Tensor:
    """Affine map x @ weight.T + bias for x of shape (batch, n)

    :raises ShapeError: if the inner dimensions disagree
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T + bias.data
    return _result(
        "linear",
        out,
        (x, weight, bias),
        lambda g: (g @ weight.data, g.T @ x.data, g.sum(axis=0)),
    )


def conv2d(x: Operand, kernel: Operand, bias: Operand, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x (b, c_in, h, w) with kernel (c_out, c_in, k, k)

    The sliding windows are built with numpy's sliding_window_view, the
    contraction is done with tensordot in both directions.

    :raises ShapeError: on channel mismatch or a non-square kernel
    """
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d needs rank 4 input and kernel, got {x.shape} and {kernel.shape}")
    c_out, c_in, k, k2 = kernel.shape
    if k != k2:
        raise ShapeError(f"Only square kernels are supported, got {k}x{k2}")
    if x.shape[1] != c_in:
        raise ShapeError(f"Input has {x.shape[1]} channels but kernel expects {c_in}")
    if bias.shape != (c_out,):
        raise ShapeError(f"Bias shape {bias.shape} does not match {c_out} output channels")
    h, w = x.shape[2:]
    padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # (b, c_in, ho, wo, k, k)
    h_out, w_out = windows.shape[2:4]
    out = np.tensordot(windows, kernel.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = out + bias.data[None, :, None, None]

    def backward(g):
        g_kernel = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        g_bias = g.sum(axis=(0, 2, 3))
        g_padded = np.zeros_like(padded)
        for i in range(k):
            for j in range(k):
                contrib = np.tensordot(g, kernel.data[:, :, i, j], axes=([1], [0]))
                g_padded[:, :, i : i + stride * h_out : stride, j : j + stride * w_out : stride] += (
                    contrib.transpose(0, 3, 1, 2)
                )
        return g_padded[:, :, padding : padding + h, padding : padding + w], g_kernel, g_bias

    return _result("conv2d", np.ascontiguousarray(out), (x, kernel, bias), backward)


def conv2d_same(x: Operand, kernel: Operand, bias: Operand) -> Tensor:
    """Shape-preserving convolution with zero padding (k-1)/2

    :raises ShapeError: for even kernel sizes or channel mismatch
    """
    kernel = as_tensor(kernel)
    k = kernel.shape[-1]
    if k % 2 == 0:
        raise ShapeError(f"Shape-preserving convolution needs an odd kernel size, got {k}")
    return conv2d(x, kernel, bias, stride=1, padding=(k - 1) // 2)


def strided_resample(x: Operand, direction: str, kernel: Operand, bias: Operand, factor: int = 2) -> Tensor:
    """Change the spatial resolution by a factor of two with a strided convolution

    down: stride-2 convolution with padding 1, halves height and width
    up: transposed stride-2 convolution (zero insertion, asymmetric padding,
    valid convolution), doubles height and width

    :param direction: 'up' or 'down'
    :raises ShapeError: for odd spatial dimensions on 'down'
    :raises ValueError: for unknown directions or factors
    """
    if factor != 2:
        raise ValueError(f"Only a resampling factor of 2 is supported, got {factor}")
    x, kernel = as_tensor(x), as_tensor(kernel)
    k = kernel.shape[-1]
    if direction == "down":
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise ShapeError(f"Spatial dimensions {x.shape[2:]} are not divisible by 2")
        return conv2d(x, kernel, bias, stride=2, padding=(k - 1) // 2)
    if direction == "up":
        before = (k - 1) // 2
        after = k - 1 - before + 1
        return conv2d(pad2d(dilate2(x), before, after, before, after), kernel, bias)
    raise ValueError(f"Unknown resampling direction '{direction}'")
