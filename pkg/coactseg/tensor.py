"""
Dense float64 tensors with define-by-run reverse-mode differentiation.

Every differentiable operation returns a new Tensor holding its parents and a
backward closure. ``backward`` orders the recorded graph on a Tape and runs the
closures in reverse.
"""

import contextlib
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from coactseg.utils import ShapeError, as_triple

Scalar = Union[int, float]

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (inference, evaluation)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def _accumulate(tensor: "Tensor", grad: np.ndarray) -> None:
    if not tensor.requires_grad:
        return
    if tensor.grad is None:
        tensor.grad = np.array(grad, dtype=np.float64, copy=True)
    else:
        tensor.grad = tensor.grad + grad


class Tensor:
    """A float64 array that can take part in gradient computations."""

    def __init__(self, values, requires_grad: bool = False,
                 _parents: Tuple["Tensor", ...] = (), _op: str = ""):
        self.values = np.array(values, dtype=np.float64)
        if self.values.ndim == 0:
            self.values = self.values.reshape(1)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._backward: Optional[Callable[[], None]] = None
        self._op = _op

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op or 'leaf'}, requires_grad={self.requires_grad})"

    # arithmetic -------------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        return add(self, other)

    def __radd__(self, other) -> "Tensor":
        return add(self, other)

    def __sub__(self, other) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other) -> "Tensor":
        return add(neg(self), other)

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other) -> "Tensor":
        return mul(self, other)

    def __truediv__(self, other) -> "Tensor":
        return div(self, other)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def mean(self) -> "Tensor":
        return mean(self)

    def backward(self) -> None:
        backward(self)


def _make(values: np.ndarray, parents: Sequence[Tensor], op: str,
          backward_rule: Callable[["Tensor"], Callable[[], None]]) -> Tensor:
    tracked = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(values, requires_grad=tracked, _parents=tuple(parents) if tracked else (), _op=op)
    if tracked:
        out._backward = backward_rule(out)
    return out


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# elementwise suite ----------------------------------------------------------

def add(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    if not isinstance(b, Tensor):
        scalar = float(b)

        def rule_scalar(out):
            return lambda: _accumulate(a, out.grad)
        return _make(a.values + scalar, (a,), "add", rule_scalar)

    _check_same(a, b, "add")

    def rule(out):
        def _backward():
            _accumulate(a, out.grad)
            _accumulate(b, out.grad)
        return _backward
    return _make(a.values + b.values, (a, b), "add", rule)


def neg(a: Tensor) -> Tensor:
    def rule(out):
        return lambda: _accumulate(a, -out.grad)
    return _make(-a.values, (a,), "neg", rule)


def sub(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    _check_same(a, b, "sub")

    def rule(out):
        def _backward():
            _accumulate(a, out.grad)
            _accumulate(b, -out.grad)
        return _backward
    return _make(a.values - b.values, (a, b), "sub", rule)


def mul(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    if not isinstance(b, Tensor):
        return scalar_mul(a, b)
    _check_same(a, b, "mul")

    def rule(out):
        def _backward():
            _accumulate(a, out.grad * b.values)
            _accumulate(b, out.grad * a.values)
        return _backward
    return _make(a.values * b.values, (a, b), "mul", rule)


def scalar_mul(a: Tensor, factor: Scalar) -> Tensor:
    factor = float(factor)

    def rule(out):
        return lambda: _accumulate(a, out.grad * factor)
    return _make(a.values * factor, (a,), "scalar_mul", rule)


def div(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    if not isinstance(b, Tensor):
        return scalar_mul(a, 1.0 / float(b))
    _check_same(a, b, "div")

    def rule(out):
        def _backward():
            _accumulate(a, out.grad / b.values)
            _accumulate(b, -out.grad * a.values / (b.values * b.values))
        return _backward
    return _make(a.values / b.values, (a, b), "div", rule)


def square(a: Tensor) -> Tensor:
    def rule(out):
        return lambda: _accumulate(a, 2.0 * a.values * out.grad)
    return _make(a.values * a.values, (a,), "square", rule)


def sigmoid(a: Tensor) -> Tensor:
    # split by sign so large |x| never overflows exp
    x = a.values
    values = np.empty_like(x)
    positive = x >= 0
    values[positive] = 1.0 / (1.0 + np.exp(-x[positive]))
    exp_x = np.exp(x[~positive])
    values[~positive] = exp_x / (1.0 + exp_x)

    def rule(out):
        return lambda: _accumulate(a, out.grad * out.values * (1.0 - out.values))
    return _make(values, (a,), "sigmoid", rule)


def prelu(x: Tensor, slope: Union[Tensor, Scalar]) -> Tensor:
    """
    Parametric ReLU.

    ``slope`` is a python scalar, a one-element tensor, or a per-channel tensor
    of shape (C,) applied along axis 1 of ``x``.
    """
    if not isinstance(slope, Tensor):
        slope = Tensor([float(slope)])
    if slope.size == 1:
        slope_b = slope.values.reshape((1,) * x.ndim)
        reduce_axes = None
    else:
        if x.ndim < 2 or x.shape[1] != slope.size:
            raise ShapeError(f"prelu: slope of size {slope.size} does not match channels of {x.shape}")
        slope_b = slope.values.reshape((1, slope.size) + (1,) * (x.ndim - 2))
        reduce_axes = tuple(i for i in range(x.ndim) if i != 1)

    positive = x.values > 0
    values = np.where(positive, x.values, slope_b * x.values)

    def rule(out):
        def _backward():
            _accumulate(x, out.grad * np.where(positive, 1.0, slope_b))
            negative_part = np.where(positive, 0.0, x.values) * out.grad
            if reduce_axes is None:
                _accumulate(slope, np.array([negative_part.sum()]))
            else:
                _accumulate(slope, negative_part.sum(axis=reduce_axes))
        return _backward
    return _make(values, (x, slope), "prelu", rule)


def sum_all(a: Tensor) -> Tensor:
    def rule(out):
        return lambda: _accumulate(a, np.broadcast_to(out.grad.reshape(()), a.shape))
    return _make(np.array([a.values.sum()]), (a,), "sum", rule)


def mean(a: Tensor) -> Tensor:
    count = a.size

    def rule(out):
        return lambda: _accumulate(a, np.broadcast_to(out.grad.reshape(()) / count, a.shape))
    return _make(np.array([a.values.sum() / count]), (a,), "mean", rule)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    reference = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(reference) or any(
                t.shape[i] != reference[i] for i in range(len(reference)) if i != axis):
            raise ShapeError(f"concat: shape {t.shape} incompatible with {reference} on axis {axis}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])
    values = np.concatenate([t.values for t in tensors], axis=axis)

    def rule(out):
        def _backward():
            for t, start, stop in zip(tensors, bounds[:-1], bounds[1:]):
                index = [slice(None)] * out.ndim
                index[axis] = slice(int(start), int(stop))
                _accumulate(t, out.grad[tuple(index)])
        return _backward
    return _make(values, tuple(tensors), "concat", rule)


def slice_(a: Tensor, index) -> Tensor:
    """Basic (slice/int) indexing with a scatter backward."""
    values = np.array(a.values[index], copy=True)

    def rule(out):
        def _backward():
            grad = np.zeros_like(a.values)
            grad[index] = out.grad.reshape(grad[index].shape)
            _accumulate(a, grad)
        return _backward
    return _make(values, (a,), "slice", rule)


def pad(a: Tensor, widths: Sequence[Tuple[int, int]]) -> Tensor:
    """Zero padding; ``widths`` follows ``numpy.pad``."""
    widths = [tuple(int(w) for w in pair) for pair in widths]
    if len(widths) != a.ndim:
        raise ShapeError(f"pad: {len(widths)} width pairs for a {a.ndim}-d tensor")
    values = np.pad(a.values, widths)
    index = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))

    def rule(out):
        return lambda: _accumulate(a, out.grad[index])
    return _make(values, (a,), "pad", rule)


# convolutions ---------------------------------------------------------------

def _output_extent(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv3d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride=1, padding=0) -> Tensor:
    """
    3D cross-correlation.

    Args:
        x: Input of shape (N, C, D, H, W)
        weight: Kernel of shape (K, C, kd, kh, kw)
        bias: Optional bias of shape (K,)
        stride: Int or triple, each >= 1
        padding: Int or triple of zero padding

    Returns:
        Tensor of shape (N, K, D', H', W')
    """
    stride = as_triple(stride, "stride")
    padding = as_triple(padding, "padding")
    if x.ndim != 5 or weight.ndim != 5:
        raise ShapeError(f"conv3d expects 5-d input and weight, got {x.shape} and {weight.shape}")
    n, c, *spatial = x.shape
    k, wc, *kernel = weight.shape
    if wc != c:
        raise ShapeError(f"conv3d: input has {c} channels but weight expects {wc}")
    if bias is not None and bias.shape != (k,):
        raise ShapeError(f"conv3d: bias shape {bias.shape} does not match {k} output channels")
    if min(stride) < 1:
        raise ShapeError(f"conv3d: stride must be >= 1, got {stride}")
    for axis in range(3):
        if kernel[axis] > spatial[axis] + 2 * padding[axis]:
            raise ShapeError(
                f"conv3d: kernel extent {kernel[axis]} exceeds padded input extent "
                f"{spatial[axis] + 2 * padding[axis]} on spatial axis {axis}")
    out_extent = tuple(_output_extent(spatial[i], kernel[i], stride[i], padding[i]) for i in range(3))

    xp = np.pad(x.values, ((0, 0), (0, 0)) + tuple((p, p) for p in padding))
    windows = _kernel_windows(kernel, stride, out_extent)

    acc = np.zeros((k, n) + out_extent)
    for offset, window in windows:
        acc += np.tensordot(weight.values[(slice(None), slice(None)) + offset],
                            xp[(slice(None), slice(None)) + window], axes=([1], [1]))
    values = np.ascontiguousarray(acc.transpose(1, 0, 2, 3, 4))
    if bias is not None:
        values += bias.values.reshape(1, k, 1, 1, 1)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def rule(out):
        def _backward():
            grad_t = out.grad.transpose(1, 0, 2, 3, 4)
            if weight.requires_grad:
                grad_w = np.zeros_like(weight.values)
                for offset, window in windows:
                    grad_w[(slice(None), slice(None)) + offset] = np.tensordot(
                        grad_t, xp[(slice(None), slice(None)) + window],
                        axes=([1, 2, 3, 4], [0, 2, 3, 4]))
                _accumulate(weight, grad_w)
            if bias is not None:
                _accumulate(bias, out.grad.sum(axis=(0, 2, 3, 4)))
            if x.requires_grad:
                grad_xp = np.zeros_like(xp)
                for offset, window in windows:
                    grad_xp[(slice(None), slice(None)) + window] += np.tensordot(
                        weight.values[(slice(None), slice(None)) + offset],
                        grad_t, axes=([0], [0])).transpose(1, 0, 2, 3, 4)
                crop = tuple(slice(p, p + s) for p, s in zip(padding, spatial))
                _accumulate(x, grad_xp[(slice(None), slice(None)) + crop])
        return _backward
    return _make(values, parents, "conv3d", rule)


def conv3d_transposed(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
                      stride=1, padding=0) -> Tensor:
    """
    Transposed 3D convolution (the input-gradient of conv3d).

    Args:
        x: Input of shape (N, C, D, H, W)
        weight: Kernel of shape (C, K, kd, kh, kw)
        bias: Optional bias of shape (K,)
        stride: Int or triple, each >= 1
        padding: Int or triple, cropped from the full output

    Returns:
        Tensor of shape (N, K, (D-1)*s - 2p + kd, ...)
    """
    stride = as_triple(stride, "stride")
    padding = as_triple(padding, "padding")
    if x.ndim != 5 or weight.ndim != 5:
        raise ShapeError(
            f"conv3d_transposed expects 5-d input and weight, got {x.shape} and {weight.shape}")
    n, c, *spatial = x.shape
    wc, k, *kernel = weight.shape
    if wc != c:
        raise ShapeError(f"conv3d_transposed: input has {c} channels but weight expects {wc}")
    if bias is not None and bias.shape != (k,):
        raise ShapeError(f"conv3d_transposed: bias shape {bias.shape} does not match {k} channels")
    if min(stride) < 1:
        raise ShapeError(f"conv3d_transposed: stride must be >= 1, got {stride}")
    full_extent = tuple((spatial[i] - 1) * stride[i] + kernel[i] for i in range(3))
    out_extent = tuple(full_extent[i] - 2 * padding[i] for i in range(3))
    if min(out_extent) < 1:
        raise ShapeError(f"conv3d_transposed: padding {padding} leaves an empty output")

    windows = _kernel_windows(kernel, stride, tuple(spatial))
    full = np.zeros((n, k) + full_extent)
    for offset, window in windows:
        full[(slice(None), slice(None)) + window] += np.tensordot(
            weight.values[(slice(None), slice(None)) + offset], x.values,
            axes=([0], [1])).transpose(1, 0, 2, 3, 4)
    crop = (slice(None), slice(None)) + tuple(
        slice(p, p + e) for p, e in zip(padding, out_extent))
    values = np.ascontiguousarray(full[crop])
    if bias is not None:
        values += bias.values.reshape(1, k, 1, 1, 1)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def rule(out):
        def _backward():
            grad_full = np.zeros((n, k) + full_extent)
            grad_full[crop] = out.grad
            if x.requires_grad:
                grad_x = np.zeros_like(x.values)
                for offset, window in windows:
                    grad_x += np.tensordot(
                        weight.values[(slice(None), slice(None)) + offset],
                        grad_full[(slice(None), slice(None)) + window],
                        axes=([1], [1])).transpose(1, 0, 2, 3, 4)
                _accumulate(x, grad_x)
            if weight.requires_grad:
                grad_w = np.zeros_like(weight.values)
                for offset, window in windows:
                    grad_w[(slice(None), slice(None)) + offset] = np.tensordot(
                        x.values, grad_full[(slice(None), slice(None)) + window],
                        axes=([0, 2, 3, 4], [0, 2, 3, 4]))
                _accumulate(weight, grad_w)
            if bias is not None:
                _accumulate(bias, out.grad.sum(axis=(0, 2, 3, 4)))
        return _backward
    return _make(values, parents, "conv3d_transposed", rule)


def _kernel_windows(kernel, stride, extent):
    """Pair each kernel offset with the strided input window it touches."""
    windows = []
    for a in range(kernel[0]):
        for b in range(kernel[1]):
            for e in range(kernel[2]):
                window = tuple(
                    slice(o, o + s * (m - 1) + 1, s)
                    for o, s, m in zip((a, b, e), stride, extent))
                windows.append(((a, b, e), window))
    return windows


def conv3d_reference(x: np.ndarray, weight: np.ndarray, bias: Optional[np.ndarray] = None,
                     stride=1, padding=0) -> np.ndarray:
    """Direct-loop conv3d used to cross-check the vectorized path."""
    stride = as_triple(stride, "stride")
    padding = as_triple(padding, "padding")
    n, c, *spatial = x.shape
    k, _, *kernel = weight.shape
    xp = np.pad(x, ((0, 0), (0, 0)) + tuple((p, p) for p in padding))
    out_extent = [_output_extent(spatial[i], kernel[i], stride[i], padding[i]) for i in range(3)]
    out = np.zeros([n, k] + out_extent)
    for b in range(n):
        for o in range(k):
            for z in range(out_extent[0]):
                for y in range(out_extent[1]):
                    for w in range(out_extent[2]):
                        zs, ys, ws = z * stride[0], y * stride[1], w * stride[2]
                        block = xp[b, :, zs:zs + kernel[0], ys:ys + kernel[1], ws:ws + kernel[2]]
                        out[b, o, z, y, w] = np.sum(block * weight[o])
            if bias is not None:
                out[b, o] += bias[o]
    return out


# reverse pass ---------------------------------------------------------------

class Tape:
    """Topologically ordered operations leading to a root tensor."""

    def __init__(self, nodes: List[Tensor]):
        self.nodes = nodes

    def __len__(self) -> int:
        return len(self.nodes)

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
        order: List[Tensor] = []
        visited = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order)

    def run_backward(self, root: Tensor) -> None:
        root.grad = np.ones_like(root.values)
        for node in reversed(self.nodes):
            if node._backward is not None and node.grad is not None:
                node._backward()
        # release interior gradients; leaves keep theirs
        for node in self.nodes:
            if node._parents:
                node.grad = None


def backward(loss: Tensor) -> None:
    """Populate ``grad`` of every requires_grad leaf reachable from ``loss``."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    Tape.record(loss).run_backward(loss)


# errors below this are not retried with a smaller step
KINK_RETRY_ERROR = 1e-6


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-4,
               n_coords: Optional[int] = None,
               rng: Optional[np.random.Generator] = None, shrink_steps: int = 0) -> float:
    """
    Compare analytic gradients with central finite differences.

    A coordinate whose difference straddles a kink (PReLU at zero) disagrees
    with the one-sided analytic gradient at any step wider than its distance
    to the kink. With ``shrink_steps`` such coordinates are retried at eps/10,
    eps/100, ... and keep the smallest error; a wrong gradient does not shrink.

    Args:
        f: Deterministic scalar-valued function of ``x``
        x: Leaf tensor with requires_grad set
        eps: Finite-difference step
        n_coords: Optional number of randomly chosen coordinates to check
        rng: Generator used when ``n_coords`` is given
        shrink_steps: Retries with a ten times smaller step for disagreeing coordinates

    Returns:
        max |analytic - numeric| / max(1, |analytic|, |numeric|)
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    if shrink_steps < 0:
        raise ValueError(f"shrink_steps must be non-negative, got {shrink_steps}")
    x.requires_grad = True
    x.zero_grad()
    backward(f(x))
    analytic = np.zeros(x.size) if x.grad is None else x.grad.reshape(-1).copy()
    x.zero_grad()

    coords = np.arange(x.size)
    if n_coords is not None and n_coords < x.size:
        rng = rng if rng is not None else np.random.default_rng(0)
        coords = np.sort(rng.choice(x.size, size=n_coords, replace=False))

    flat = x.values.reshape(-1)
    worst = 0.0
    with no_grad():
        for i in coords:
            error = _coordinate_error(f, x, flat, i, analytic[i], eps)
            step = eps
            for _ in range(shrink_steps):
                if error <= KINK_RETRY_ERROR:
                    break
                step /= 10.0
                error = min(error, _coordinate_error(f, x, flat, i, analytic[i], step))
            worst = max(worst, error)
    return worst


def _coordinate_error(f, x, flat, i, analytic, eps):
    original = flat[i]
    flat[i] = original + eps
    upper = f(x).item()
    flat[i] = original - eps
    lower = f(x).item()
    flat[i] = original
    numeric = (upper - lower) / (2.0 * eps)
    return abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
