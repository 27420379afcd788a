"""Reverse-mode automatic differentiation over dense float64 tensors.

Implements exactly the operation set the volumetric U-Net and its loss need:
3D same-padded cross-correlation, 2x2x2 max-pooling, stride-2 transposed
convolution, channel concatenation, elementwise algebra, sigmoid/relu and
summation. The tape is recorded as closures on each output tensor; calling
``backward()`` on a scalar visits the graph once in reverse topological order.

Everything is float64 and all reductions run through BLAS with fixed operand
order, so repeated runs of the same graph produce bit-identical gradients.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NotScalar, OddSpatialDim, ShapeMismatch

_state = threading.local()  # grad mode is per-thread: one tape per thread


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference / finite differences)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """A float64 n-d array participating in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "_prev", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._prev: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- graph bookkeeping ---------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Populate ``grad`` on every requires_grad tensor reachable from this scalar.

        Repeated calls without clearing gradients accumulate.
        """
        if self.data.shape != ():
            raise NotScalar(f"backward() needs a scalar, got shape {self.data.shape}")
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for child in node._prev:
                if id(child) not in visited:
                    stack.append((child, False))
        # compute this pass on clean buffers, then fold earlier gradients back
        # in so repeated calls accumulate per-tensor totals
        prior: list[tuple[Tensor, np.ndarray]] = []
        for node in order:
            if node.grad is not None:
                prior.append((node, node.grad))
                node.grad = None
        self._accumulate(np.ones((), dtype=np.float64))
        for node in reversed(order):
            if node._backward is not None:
                node._backward()
        for node, g in prior:
            if node.grad is None:
                node.grad = g
            else:
                node.grad += g

    # -- elementwise / scalar algebra -----------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            _check_same_shape(self, other, "add")
            out = _node(self.data + other.data, (self, other))
            if out._prev:
                def _bw():
                    if self.requires_grad:
                        self._accumulate(out.grad)
                    if other.requires_grad:
                        other._accumulate(out.grad)
                out._backward = _bw
            return out
        c = float(other)
        out = _node(self.data + c, (self,))
        if out._prev:
            def _bw():
                self._accumulate(out.grad)
            out._backward = _bw
        return out

    __radd__ = __add__

    def __neg__(self):
        out = _node(-self.data, (self,))
        if out._prev:
            def _bw():
                self._accumulate(-out.grad)
            out._backward = _bw
        return out

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return self + (-other)
        return self + (-float(other))

    def __rsub__(self, other):
        return (-self) + float(other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            _check_same_shape(self, other, "mul")
            out = _node(self.data * other.data, (self, other))
            if out._prev:
                def _bw():
                    if self.requires_grad:
                        self._accumulate(out.grad * other.data)
                    if other.requires_grad:
                        other._accumulate(out.grad * self.data)
                out._backward = _bw
            return out
        c = float(other)
        out = _node(self.data * c, (self,))
        if out._prev:
            def _bw():
                self._accumulate(out.grad * c)
            out._backward = _bw
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, Tensor):
            return self * (1.0 / float(other))
        _check_same_shape(self, other, "div")
        out = _node(self.data / other.data, (self, other))
        if out._prev:
            def _bw():
                if self.requires_grad:
                    self._accumulate(out.grad / other.data)
                if other.requires_grad:
                    other._accumulate(-out.grad * self.data / (other.data * other.data))
            out._backward = _bw
        return out

    def relu(self):
        out = _node(np.maximum(self.data, 0.0), (self,))
        if out._prev:
            mask = self.data > 0.0  # subgradient 0 at 0
            def _bw():
                self._accumulate(out.grad * mask)
            out._backward = _bw
        return out

    def sigmoid(self):
        s = _stable_sigmoid(self.data)
        out = _node(s, (self,))
        if out._prev:
            def _bw():
                self._accumulate(out.grad * s * (1.0 - s))
            out._backward = _bw
        return out

    def sum(self):
        out = _node(self.data.sum(), (self,))
        if out._prev:
            def _bw():
                self._accumulate(np.full(self.data.shape, float(out.grad)))
            out._backward = _bw
        return out


def _node(data: np.ndarray, inputs: tuple[Tensor, ...]) -> Tensor:
    out = Tensor(data)
    if _grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._prev = inputs
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeMismatch(f"{op}: shapes {a.data.shape} vs {b.data.shape}")


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(t: Tensor) -> Tensor:
    return t.relu()


def sigmoid(t: Tensor) -> Tensor:
    return t.sigmoid()


# ---------------------------------------------------------------------------
# structured 3D ops

def _corr3d(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Same-padded cross-correlation of (ci, X, Y, Z) with (co, ci, kx, ky, kz)."""
    kx, ky, kz = kernel.shape[2:]
    px, py, pz = kx // 2, ky // 2, kz // 2
    xp = np.pad(x, ((0, 0), (px, px), (py, py), (pz, pz)))
    win = sliding_window_view(xp, (kx, ky, kz), axis=(1, 2, 3))
    out = np.tensordot(win, kernel, axes=([0, 4, 5, 6], [1, 2, 3, 4]))
    return np.ascontiguousarray(out.transpose(3, 0, 1, 2))


def conv3d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Zero same-padded 3D cross-correlation with per-output-channel bias.

    x: (c_in, X, Y, Z); kernel: (c_out, c_in, k, k, k) with odd k; bias: (c_out,).
    Output spatial dims equal input spatial dims.
    """
    xd, kd, bd = x.data, kernel.data, bias.data
    if xd.ndim != 4 or kd.ndim != 5:
        raise ShapeMismatch(f"conv3d: input ndim {xd.ndim}, kernel ndim {kd.ndim}")
    if kd.shape[1] != xd.shape[0]:
        raise ShapeMismatch(f"conv3d: kernel c_in {kd.shape[1]} != input channels {xd.shape[0]}")
    if bd.shape != (kd.shape[0],):
        raise ShapeMismatch(f"conv3d: bias shape {bd.shape}, expected ({kd.shape[0]},)")
    if any(k % 2 == 0 for k in kd.shape[2:]):
        raise ShapeMismatch(f"conv3d: kernel dims {kd.shape[2:]} must be odd")
    out_data = _corr3d(xd, kd) + bd[:, None, None, None]
    out = _node(out_data, (x, kernel, bias))
    if out._prev:
        def _bw():
            g = out.grad
            if x.requires_grad:
                # full correlation of g with the flipped, channel-swapped kernel
                kt = np.ascontiguousarray(np.flip(kd, axis=(2, 3, 4)).transpose(1, 0, 2, 3, 4))
                x._accumulate(_corr3d(g, kt))
            if kernel.requires_grad:
                kx, ky, kz = kd.shape[2:]
                xp = np.pad(xd, ((0, 0), (kx // 2, kx // 2), (ky // 2, ky // 2), (kz // 2, kz // 2)))
                win = sliding_window_view(xp, (kx, ky, kz), axis=(1, 2, 3))
                kernel._accumulate(np.tensordot(g, win, axes=([1, 2, 3], [1, 2, 3])))
            if bias.requires_grad:
                bias._accumulate(g.sum(axis=(1, 2, 3)))
        out._backward = _bw
    return out


def maxpool3d(x: Tensor) -> Tensor:
    """Non-overlapping 2x2x2 max-pool; ties route the gradient to the first voxel
    of the block in row-major order."""
    c, X, Y, Z = x.data.shape
    if X % 2 or Y % 2 or Z % 2:
        raise OddSpatialDim(f"maxpool3d: spatial dims {(X, Y, Z)} must be even")
    blocks = (
        x.data.reshape(c, X // 2, 2, Y // 2, 2, Z // 2, 2)
        .transpose(0, 1, 3, 5, 2, 4, 6)
        .reshape(c, X // 2, Y // 2, Z // 2, 8)
    )
    arg = blocks.argmax(axis=-1)
    out_data = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    out = _node(out_data, (x,))
    if out._prev:
        def _bw():
            scatter = np.zeros(blocks.shape)
            np.put_along_axis(scatter, arg[..., None], out.grad[..., None], axis=-1)
            gx = (
                scatter.reshape(c, X // 2, Y // 2, Z // 2, 2, 2, 2)
                .transpose(0, 1, 4, 2, 5, 3, 6)
                .reshape(c, X, Y, Z)
            )
            x._accumulate(gx)
        out._backward = _bw
    return out


def upconv3d(x: Tensor, kernel: Tensor) -> Tensor:
    """Transposed convolution with kernel = stride = 2 (no overlap-add).

    x: (c_in, X, Y, Z); kernel: (c_in, c_out, 2, 2, 2) -> (c_out, 2X, 2Y, 2Z).
    Each output voxel receives exactly one kernel tap.
    """
    xd, kd = x.data, kernel.data
    if xd.ndim != 4 or kd.ndim != 5:
        raise ShapeMismatch(f"upconv3d: input ndim {xd.ndim}, kernel ndim {kd.ndim}")
    if kd.shape[0] != xd.shape[0]:
        raise ShapeMismatch(f"upconv3d: kernel c_in {kd.shape[0]} != input channels {xd.shape[0]}")
    if kd.shape[2:] != (2, 2, 2):
        raise ShapeMismatch(f"upconv3d: kernel spatial dims {kd.shape[2:]} must be (2, 2, 2)")
    ci, X, Y, Z = xd.shape
    co = kd.shape[1]
    t = np.tensordot(kd, xd, axes=([0], [0]))  # (co, 2, 2, 2, X, Y, Z)
    out_data = np.ascontiguousarray(
        t.transpose(0, 4, 1, 5, 2, 6, 3).reshape(co, 2 * X, 2 * Y, 2 * Z)
    )
    out = _node(out_data, (x, kernel))
    if out._prev:
        def _bw():
            gr = (
                out.grad.reshape(co, X, 2, Y, 2, Z, 2)
                .transpose(0, 2, 4, 6, 1, 3, 5)
                .reshape(co, 2, 2, 2, X, Y, Z)
            )
            if x.requires_grad:
                x._accumulate(np.tensordot(kd, gr, axes=([1, 2, 3, 4], [0, 1, 2, 3])))
            if kernel.requires_grad:
                kernel._accumulate(np.tensordot(xd, gr, axes=([1, 2, 3], [4, 5, 6])))
        out._backward = _bw
    return out


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack two (c, X, Y, Z) tensors along the channel axis, a first."""
    if a.data.ndim != 4 or b.data.ndim != 4 or a.data.shape[1:] != b.data.shape[1:]:
        raise ShapeMismatch(f"concat_channels: shapes {a.data.shape} vs {b.data.shape}")
    ca = a.data.shape[0]
    out = _node(np.concatenate([a.data, b.data], axis=0), (a, b))
    if out._prev:
        def _bw():
            if a.requires_grad:
                a._accumulate(out.grad[:ca])
            if b.requires_grad:
                b._accumulate(out.grad[ca:])
        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# parameter sets

class ParamSet:
    """Named map of trainable tensors; iteration is sorted by name."""

    def __init__(self, params: dict[str, Tensor]):
        for name, t in params.items():
            if not isinstance(t, Tensor) or not t.requires_grad:
                raise ValueError(f"parameter {name!r} must be a Tensor with requires_grad")
        self._params = dict(sorted(params.items()))

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __len__(self) -> int:
        return len(self._params)

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def n_scalars(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def state_arrays(self, dtype=np.float32) -> dict[str, np.ndarray]:
        return {name: t.data.astype(dtype) for name, t in self._params.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, t in self._params.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ShapeMismatch(f"parameter {name!r}: stored shape {arr.shape} != {t.data.shape}")
            t.data = arr.copy()


# ---------------------------------------------------------------------------
# finite-difference checking

@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    passed: bool
    worst: tuple[int, int] | None = None  # (input index, flat coordinate)


def grad_check(
    f,
    inputs: list[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f(*inputs)`` to central differences.

    The per-coordinate error is |analytic - numeric| / max(1, |analytic|, |numeric|),
    so near-zero gradients are compared absolutely. ``max_coords`` limits the
    number of coordinates probed per input (sampled with ``rng``); by default
    every coordinate is checked. Reports only; never raises on failure.
    """
    for t in inputs:
        t.grad = None
    out = f(*inputs)
    out.backward()
    grads = [None if t.grad is None else t.grad.copy() for t in inputs]
    max_rel = 0.0
    n_checked = 0
    worst = None
    for idx, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            if rng is None:
                rng = np.random.default_rng(0)
            coords = rng.choice(flat.size, size=max_coords, replace=False)
            coords.sort()
        g = grads[idx].reshape(-1)
        with no_grad():
            for c in coords:
                orig = flat[c]
                flat[c] = orig + h
                fp = f(*inputs).item()
                flat[c] = orig - h
                fm = f(*inputs).item()
                flat[c] = orig
                numeric = (fp - fm) / (2.0 * h)
                analytic = g[c]
                rel = abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
                n_checked += 1
                if rel > max_rel:
                    max_rel = rel
                    worst = (idx, int(c))
    return GradCheckReport(max_rel_error=max_rel, n_checked=n_checked, passed=max_rel < tol, worst=worst)
