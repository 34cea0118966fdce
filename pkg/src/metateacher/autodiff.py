"""Tape-based automatic differentiation over dense numpy arrays.

The engine records a forward computation as a flat, topologically ordered
tape of primitive ops and derives three objects from it:

* ``grad``  - reverse-mode gradient of a scalar node,
* ``jvp``   - forward-mode directional derivative (tangent propagation),
* ``vjp``   - reverse-mode pullback of an output cotangent,

plus ``finite_diff_check``, an independent central-difference oracle used
to validate every analytic path.

The primitive set is closed: conv2d (1x1 or 3x3, stride 1, zero "same"
padding), 2x2 max-pool with stride 2, relu, sigmoid, nearest-neighbor
resize, channel concatenation, elementwise add/sub/mul, scalar scale and
mean over an axis set. No broadcasting: elementwise ops require identical
shapes. Reductions rely on numpy's deterministic accumulation, so results
are bit-reproducible for a fixed platform and library version.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

import numpy as np


class AutodiffError(Exception):
    """Base class for engine failures."""


class ShapeError(AutodiffError):
    """Operands with incompatible shapes, layouts or dtypes."""


class NonFiniteError(AutodiffError):
    """A NaN or Inf surfaced where a finite value is required."""


_DTYPE_OF = {"single": np.dtype(np.float32), "double": np.dtype(np.float64)}
_PRECISION_OF = {np.dtype(np.float32): "single", np.dtype(np.float64): "double"}


def dtype_for(precision: str) -> np.dtype:
    try:
        return _DTYPE_OF[precision]
    except KeyError:
        raise ValueError(f"unknown precision {precision!r}; expected 'single' or 'double'")


@dataclass(frozen=True)
class Tensor:
    """Immutable dense n-dimensional array in single or double precision.

    Takes ownership of the wrapped array: it is made contiguous and
    marked read-only. Finiteness is an invariant surfaced by
    ``check_finite`` rather than scanned on every construction.
    """

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = self.data
        if not isinstance(arr, np.ndarray):
            arr = np.asarray(arr)
        if arr.dtype not in _PRECISION_OF:
            raise ShapeError(f"unsupported dtype {arr.dtype}; use float32 or float64")
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def precision(self) -> str:
        return _PRECISION_OF[self.data.dtype]

    @property
    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)

    def check_finite(self) -> "Tensor":
        if not np.isfinite(self.data).all():
            raise NonFiniteError("tensor contains NaN or Inf")
        return self

    def astype(self, precision: str) -> "Tensor":
        dt = dtype_for(precision)
        if dt == self.data.dtype:
            return self
        return Tensor(self.data.astype(dt))

    @classmethod
    def zeros(cls, shape: Sequence[int], precision: str = "single") -> "Tensor":
        return cls(np.zeros(tuple(shape), dtype=dtype_for(precision)))


@dataclass(frozen=True)
class WeightBundle:
    """A network's parameters as one flat vector with named per-layer views.

    ``views`` maps a parameter name to ``(offset, shape)``; the views must
    tile the flat vector exactly, in offset order, with no overlap or gap.
    """

    flat: Tensor
    views: dict[str, tuple[int, tuple[int, ...]]]

    def __post_init__(self) -> None:
        if self.flat.data.ndim != 1:
            raise ShapeError("WeightBundle.flat must be rank 1")
        cursor = 0
        for name, (offset, shape) in self.views.items():
            if offset != cursor:
                raise ShapeError(f"view {name!r} at offset {offset}, expected {cursor}")
            cursor += int(np.prod(shape, dtype=np.int64)) if shape else 1
        if cursor != self.flat.size:
            raise ShapeError(f"views cover {cursor} entries, flat has {self.flat.size}")

    @property
    def size(self) -> int:
        return self.flat.size

    @property
    def precision(self) -> str:
        return self.flat.precision

    def view(self, name: str) -> np.ndarray:
        offset, shape = self.views[name]
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        return self.flat.data[offset:offset + n].reshape(shape)

    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(name, shape) for name, (_, shape) in self.views.items()]

    def with_flat(self, data: np.ndarray) -> "WeightBundle":
        if data.shape != (self.size,):
            raise ShapeError("replacement flat vector has wrong length")
        return WeightBundle(Tensor(data), self.views)

    def copy(self) -> "WeightBundle":
        return self.with_flat(self.flat.data.copy())

    def astype(self, precision: str) -> "WeightBundle":
        return WeightBundle(self.flat.astype(precision), self.views)

    def same_layout(self, other: "WeightBundle") -> bool:
        return self.views == other.views

    @classmethod
    def from_layout(cls, layout: Iterable[tuple[str, tuple[int, ...]]],
                    precision: str = "single") -> "WeightBundle":
        views: dict[str, tuple[int, tuple[int, ...]]] = {}
        cursor = 0
        for name, shape in layout:
            if name in views:
                raise ShapeError(f"duplicate parameter name {name!r}")
            views[name] = (cursor, tuple(shape))
            cursor += int(np.prod(shape, dtype=np.int64)) if shape else 1
        return cls(Tensor(np.zeros(cursor, dtype=dtype_for(precision))), views)


def _owned(value: np.ndarray, dtype: np.dtype) -> np.ndarray:
    """Rank-preserving cast to a contiguous array of the tape's dtype."""
    arr = np.asarray(value, dtype=dtype)
    if not arr.flags.c_contiguous:
        arr = np.ascontiguousarray(arr)
    return arr


class Node:
    __slots__ = ("op", "inputs", "attrs", "value", "aux")

    def __init__(self, op: str, inputs: tuple[int, ...], attrs: dict[str, Any],
                 value: np.ndarray, aux: Any = None):
        self.op = op
        self.inputs = inputs
        self.attrs = attrs
        self.value = value
        self.aux = aux


@dataclass(frozen=True)
class Var:
    """Handle to one node of a tape."""

    tape: "Tape"
    index: int

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.index].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape


class Tape:
    """Recorded computation graph; append-only, replayable, differentiable."""

    def __init__(self, dtype: np.dtype):
        self.dtype = np.dtype(dtype)
        self.nodes: list[Node] = []
        self.param_index: dict[str, int] = {}
        self.outputs: list[Var] = []

    def _push(self, node: Node) -> Var:
        self.nodes.append(node)
        return Var(self, len(self.nodes) - 1)

    def param(self, name: str, value: np.ndarray) -> Var:
        if name in self.param_index:
            raise AutodiffError(f"parameter {name!r} already on tape")
        var = self._push(Node("param", (), {"name": name}, _owned(value, self.dtype)))
        self.param_index[name] = var.index
        return var

    def const(self, value: np.ndarray) -> Var:
        return self._push(Node("const", (), {}, _owned(value, self.dtype)))

    def replay(self) -> list[np.ndarray]:
        """Recompute every node from the leaves; returns fresh output arrays."""
        values: list[np.ndarray] = []
        for node in self.nodes:
            if node.op in ("param", "const"):
                values.append(node.value)
            else:
                out, _ = OPS[node.op].forward([values[i] for i in node.inputs], node.attrs)
                values.append(out)
        if not self.outputs:
            raise AutodiffError("tape has no recorded outputs")
        return [values[v.index] for v in self.outputs]


@dataclass(frozen=True)
class OpDef:
    forward: Callable[[list[np.ndarray], dict[str, Any]], tuple[np.ndarray, Any]]
    backward: Callable[[Node, np.ndarray, list[np.ndarray]], list[np.ndarray | None]]
    tangent: Callable[[Node, list[np.ndarray], list[np.ndarray | None]], np.ndarray | None]


OPS: dict[str, OpDef] = {}


def _register(name: str, forward, backward, tangent) -> None:
    OPS[name] = OpDef(forward, backward, tangent)


# ---------------------------------------------------------------------------
# primitive kernels


def _im2col(x: np.ndarray, k: int, pad: int) -> np.ndarray:
    """(B,C,H,W) -> contiguous (B*H*W, C*k*k) patch matrix, zero 'same' padding."""
    b, c, h, w = x.shape
    if pad:
        xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
        xp[:, :, pad:pad + h, pad:pad + w] = x
    else:
        xp = x
    s0, s1, s2, s3 = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp, shape=(b, c, h, w, k, k), strides=(s0, s1, s2, s3, s2, s3))
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5))
    return cols.reshape(b * h * w, c * k * k)


def _col2im(dcols: np.ndarray, x_shape: tuple[int, ...], k: int, pad: int) -> np.ndarray:
    b, c, h, w = x_shape
    d6 = dcols.reshape(b, h, w, c, k, k)
    dxp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + h, j:j + w] += d6[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if pad:
        return dxp[:, :, pad:pad + h, pad:pad + w].copy()
    return dxp


def _conv_fwd(values, attrs):
    x, w, bias = values
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d expects x:(B,C,H,W) and w:(Cout,Cin,k,k)")
    cout, cin, k, k2 = w.shape
    if k != k2 or k not in (1, 3):
        raise ShapeError(f"conv2d kernel must be 1x1 or 3x3, got {k}x{k2}")
    if x.shape[1] != cin:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape[1]}, weight {cin}")
    if bias.shape != (cout,):
        raise ShapeError("conv2d bias must have one entry per output channel")
    b, _, h, wd = x.shape
    pad = (k - 1) // 2
    cols = _im2col(x, k, pad)
    out = cols @ w.reshape(cout, cin * k * k).T
    out += bias
    out = np.ascontiguousarray(out.reshape(b, h, wd, cout).transpose(0, 3, 1, 2))
    return out, cols


def _conv_bwd(node, cot, in_values):
    x, w, _bias = in_values
    cout, cin, k, _ = w.shape
    pad = (k - 1) // 2
    b, _, h, wd = x.shape
    cols = node.aux
    cot_mat = np.ascontiguousarray(cot.transpose(0, 2, 3, 1)).reshape(b * h * wd, cout)
    dw = (cot_mat.T @ cols).reshape(w.shape)
    db = cot_mat.sum(axis=0)
    dcols = cot_mat @ w.reshape(cout, cin * k * k)
    dx = _col2im(dcols, x.shape, k, pad)
    return [dx, dw, db]


def _conv_jvp(node, in_values, tangents):
    x, w, _bias = in_values
    tx, tw, tb = tangents
    cout, cin, k, _ = w.shape
    pad = (k - 1) // 2
    b, _, h, wd = x.shape
    acc = None
    if tx is not None:
        cols_t = _im2col(tx, k, pad)
        acc = cols_t @ w.reshape(cout, cin * k * k).T
    if tw is not None:
        term = node.aux @ tw.reshape(cout, cin * k * k).T
        acc = term if acc is None else acc + term
    if tb is not None:
        acc = np.tile(tb, (b * h * wd, 1)) if acc is None else acc + tb
    if acc is None:
        return None
    return np.ascontiguousarray(acc.reshape(b, h, wd, cout).transpose(0, 3, 1, 2))


_register("conv2d", _conv_fwd, _conv_bwd, _conv_jvp)


def _maxpool_fwd(values, attrs):
    (x,) = values
    if x.ndim != 4:
        raise ShapeError("maxpool2 expects (B,C,H,W)")
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError("maxpool2 needs even spatial dims")
    win = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(b, c, h // 2, w // 2, 4)
    # np.argmax picks the first maximum, i.e. scan order within the window
    idx = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx.astype(np.int8)


def _maxpool_bwd(node, cot, in_values):
    (x,) = in_values
    b, c, h, w = x.shape
    idx = node.aux.astype(np.int64)
    dwin = np.zeros((b, c, h // 2, w // 2, 4), dtype=cot.dtype)
    np.put_along_axis(dwin, idx[..., None], cot[..., None], axis=-1)
    dx = dwin.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return [np.ascontiguousarray(dx.reshape(b, c, h, w))]


def _maxpool_jvp(node, in_values, tangents):
    (tx,) = tangents
    if tx is None:
        return None
    b, c, h, w = tx.shape
    win = tx.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = np.ascontiguousarray(win.reshape(b, c, h // 2, w // 2, 4))
    idx = node.aux.astype(np.int64)
    return np.take_along_axis(win, idx[..., None], axis=-1)[..., 0].copy()


_register("maxpool2", _maxpool_fwd, _maxpool_bwd, _maxpool_jvp)


def _relu_fwd(values, attrs):
    return np.maximum(values[0], 0), None


def _relu_bwd(node, cot, in_values):
    # derivative at exactly 0 is 0: node.value > 0 excludes the kink
    return [cot * (node.value > 0)]


def _relu_jvp(node, in_values, tangents):
    (tx,) = tangents
    if tx is None:
        return None
    return tx * (node.value > 0)


_register("relu", _relu_fwd, _relu_bwd, _relu_jvp)


def _sigmoid_fwd(values, attrs):
    x = values[0]
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out, None


def _sigmoid_bwd(node, cot, in_values):
    y = node.value
    return [cot * (y * (1.0 - y))]


def _sigmoid_jvp(node, in_values, tangents):
    (tx,) = tangents
    if tx is None:
        return None
    y = node.value
    return tx * (y * (1.0 - y))


_register("sigmoid", _sigmoid_fwd, _sigmoid_bwd, _sigmoid_jvp)


def _resize_indices(src: int, dst: int) -> np.ndarray:
    return (np.arange(dst, dtype=np.int64) * src) // dst


def _resize_fwd(values, attrs):
    (x,) = values
    if x.ndim != 4:
        raise ShapeError("resize_nearest expects (B,C,H,W)")
    ho, wo = attrs["target_hw"]
    ih = _resize_indices(x.shape[2], ho)
    iw = _resize_indices(x.shape[3], wo)
    return np.ascontiguousarray(x[:, :, ih[:, None], iw[None, :]]), (ih, iw)


def _resize_bwd(node, cot, in_values):
    (x,) = in_values
    ih, iw = node.aux
    dx = np.zeros_like(x)
    np.add.at(dx, (slice(None), slice(None), ih[:, None], iw[None, :]), cot)
    return [dx]


def _resize_jvp(node, in_values, tangents):
    (tx,) = tangents
    if tx is None:
        return None
    ih, iw = node.aux
    return np.ascontiguousarray(tx[:, :, ih[:, None], iw[None, :]])


_register("resize_nearest", _resize_fwd, _resize_bwd, _resize_jvp)


def _concat_fwd(values, attrs):
    base = values[0].shape
    for v in values[1:]:
        if v.ndim != 4 or v.shape[0] != base[0] or v.shape[2:] != base[2:]:
            raise ShapeError("concat_channels operands must agree on batch and spatial dims")
    return np.concatenate(values, axis=1), None


def _concat_bwd(node, cot, in_values):
    sizes = [v.shape[1] for v in in_values]
    splits = np.cumsum(sizes)[:-1]
    return [np.ascontiguousarray(p) for p in np.split(cot, splits, axis=1)]


def _concat_jvp(node, in_values, tangents):
    if all(t is None for t in tangents):
        return None
    parts = [t if t is not None else np.zeros_like(v)
             for t, v in zip(tangents, in_values)]
    return np.concatenate(parts, axis=1)


_register("concat_channels", _concat_fwd, _concat_bwd, _concat_jvp)


def _binary_guard(values, op):
    a, b = values
    if a.shape != b.shape:
        raise ShapeError(f"{op} requires identical shapes, got {a.shape} vs {b.shape}")


def _add_fwd(values, attrs):
    _binary_guard(values, "add")
    return values[0] + values[1], None


def _add_bwd(node, cot, in_values):
    return [cot, cot]


def _add_jvp(node, in_values, tangents):
    ta, tb = tangents
    if ta is None:
        return None if tb is None else tb
    return ta if tb is None else ta + tb


_register("add", _add_fwd, _add_bwd, _add_jvp)


def _sub_fwd(values, attrs):
    _binary_guard(values, "sub")
    return values[0] - values[1], None


def _sub_bwd(node, cot, in_values):
    return [cot, -cot]


def _sub_jvp(node, in_values, tangents):
    ta, tb = tangents
    if ta is None:
        return None if tb is None else -tb
    return ta if tb is None else ta - tb


_register("sub", _sub_fwd, _sub_bwd, _sub_jvp)


def _mul_fwd(values, attrs):
    _binary_guard(values, "mul")
    return values[0] * values[1], None


def _mul_bwd(node, cot, in_values):
    a, b = in_values
    return [cot * b, cot * a]


def _mul_jvp(node, in_values, tangents):
    a, b = in_values
    ta, tb = tangents
    acc = None
    if ta is not None:
        acc = ta * b
    if tb is not None:
        acc = a * tb if acc is None else acc + a * tb
    return acc


_register("mul", _mul_fwd, _mul_bwd, _mul_jvp)


def _scale_fwd(values, attrs):
    return values[0] * values[0].dtype.type(attrs["alpha"]), None


def _scale_bwd(node, cot, in_values):
    return [cot * cot.dtype.type(node.attrs["alpha"])]


def _scale_jvp(node, in_values, tangents):
    (tx,) = tangents
    if tx is None:
        return None
    return tx * tx.dtype.type(node.attrs["alpha"])


_register("scale", _scale_fwd, _scale_bwd, _scale_jvp)


def _norm_axes(axes, ndim) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    return tuple(sorted(a % ndim for a in axes))


def _mean_fwd(values, attrs):
    x = values[0]
    axes = _norm_axes(attrs.get("axes"), x.ndim)
    return np.asarray(np.mean(x, axis=axes)), None


def _mean_bwd(node, cot, in_values):
    x = in_values[0]
    axes = _norm_axes(node.attrs.get("axes"), x.ndim)
    count = 1
    for a in axes:
        count *= x.shape[a]
    expanded = np.expand_dims(cot / x.dtype.type(count), axes)
    return [np.broadcast_to(expanded, x.shape)]


def _mean_jvp(node, in_values, tangents):
    (tx,) = tangents
    if tx is None:
        return None
    axes = _norm_axes(node.attrs.get("axes"), tx.ndim)
    return np.asarray(np.mean(tx, axis=axes))


_register("mean", _mean_fwd, _mean_bwd, _mean_jvp)


# ---------------------------------------------------------------------------
# recording front-end


def _apply(op: str, inputs: Sequence[Var], attrs: dict[str, Any] | None = None) -> Var:
    if not inputs:
        raise AutodiffError(f"{op} needs at least one input")
    tape = inputs[0].tape
    for v in inputs[1:]:
        if v.tape is not tape:
            raise AutodiffError("operands recorded on different tapes")
    attrs = attrs or {}
    values = [v.value for v in inputs]
    out, aux = OPS[op].forward(values, attrs)
    return tape._push(Node(op, tuple(v.index for v in inputs), attrs, out, aux))


def conv2d(x: Var, w: Var, b: Var) -> Var:
    return _apply("conv2d", (x, w, b))


def maxpool2(x: Var) -> Var:
    return _apply("maxpool2", (x,))


def relu(x: Var) -> Var:
    return _apply("relu", (x,))


def sigmoid(x: Var) -> Var:
    return _apply("sigmoid", (x,))


def resize_nearest(x: Var, target_hw: tuple[int, int]) -> Var:
    return _apply("resize_nearest", (x,), {"target_hw": tuple(target_hw)})


def concat_channels(xs: Sequence[Var]) -> Var:
    return _apply("concat_channels", tuple(xs))


def add(a: Var, b: Var) -> Var:
    return _apply("add", (a, b))


def sub(a: Var, b: Var) -> Var:
    return _apply("sub", (a, b))


def mul(a: Var, b: Var) -> Var:
    return _apply("mul", (a, b))


def scale(x: Var, alpha: float) -> Var:
    return _apply("scale", (x,), {"alpha": float(alpha)})


def mean(x: Var, axes: tuple[int, ...] | None = None) -> Var:
    return _apply("mean", (x,), {"axes": tuple(axes) if axes is not None else None})


# ---------------------------------------------------------------------------
# derivative drivers


def _default_output(tape: Tape, output: Var | None) -> Var:
    if output is not None:
        if output.tape is not tape:
            raise AutodiffError("output var belongs to a different tape")
        return output
    if len(tape.outputs) != 1:
        raise AutodiffError("tape does not declare a unique output; pass one explicitly")
    return tape.outputs[0]


def _check_wrt(tape: Tape, wrt: WeightBundle) -> None:
    if not any(name in tape.param_index for name in wrt.views):
        raise AutodiffError("tape does not contain any parameter of wrt")


def _backward(tape: Tape, seed_index: int, seed_cot: np.ndarray) -> dict[int, np.ndarray]:
    cots: dict[int, np.ndarray] = {seed_index: seed_cot}
    for idx in range(seed_index, -1, -1):
        cot = cots.get(idx)
        if cot is None:
            continue
        node = tape.nodes[idx]
        if node.op in ("param", "const"):
            continue
        in_values = [tape.nodes[i].value for i in node.inputs]
        in_cots = OPS[node.op].backward(node, cot, in_values)
        for src, ic in zip(node.inputs, in_cots):
            if ic is None:
                continue
            prev = cots.get(src)
            # non-inplace accumulation: backward rules may return shared views
            cots[src] = ic if prev is None else prev + ic
    return cots


def _gather_param_cots(tape: Tape, cots: dict[int, np.ndarray],
                       wrt: WeightBundle) -> Tensor:
    out = np.zeros(wrt.size, dtype=tape.dtype)
    for name, (offset, shape) in wrt.views.items():
        idx = tape.param_index.get(name)
        if idx is None:
            continue
        cot = cots.get(idx)
        if cot is None:
            continue
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        out[offset:offset + n] = cot.reshape(-1)
    return Tensor(out)


def grad(tape: Tape, wrt: WeightBundle, output: Var | None = None) -> Tensor:
    """Reverse-mode gradient of a scalar output with respect to ``wrt``.

    Parameters of ``wrt`` that the output does not reach get exact zeros.
    """
    out = _default_output(tape, output)
    if out.value.shape != ():
        raise ShapeError(f"grad needs a scalar output, got shape {out.value.shape}")
    _check_wrt(tape, wrt)
    cots = _backward(tape, out.index, np.ones((), dtype=tape.dtype))
    return _gather_param_cots(tape, cots, wrt)


def vjp(tape: Tape, wrt: WeightBundle, cotangent: Tensor,
        output: Var | None = None) -> Tensor:
    """Pullback: cotangent^T . d(output)/d(wrt), flat in the layout of wrt."""
    out = _default_output(tape, output)
    _check_wrt(tape, wrt)
    cot = cotangent.data if isinstance(cotangent, Tensor) else np.asarray(cotangent)
    if cot.shape != out.value.shape:
        raise ShapeError(
            f"cotangent shape {cot.shape} does not match output shape {out.value.shape}")
    cots = _backward(tape, out.index, _owned(cot, tape.dtype))
    return _gather_param_cots(tape, cots, wrt)


def jvp(tape: Tape, wrt: WeightBundle, direction: Tensor,
        output: Var | None = None) -> Tensor:
    """Forward-mode directional derivative of the output along ``direction``."""
    out = _default_output(tape, output)
    direc = direction.data if isinstance(direction, Tensor) else np.asarray(direction)
    if direc.shape != (wrt.size,):
        raise ShapeError(
            f"direction has shape {direc.shape}, expected ({wrt.size},) matching wrt")
    _check_wrt(tape, wrt)
    direc = _owned(direc, tape.dtype)
    tangents: list[np.ndarray | None] = [None] * (out.index + 1)
    for idx in range(out.index + 1):
        node = tape.nodes[idx]
        if node.op == "const":
            continue
        if node.op == "param":
            name = node.attrs["name"]
            if name in wrt.views:
                offset, shape = wrt.views[name]
                n = int(np.prod(shape, dtype=np.int64)) if shape else 1
                tangents[idx] = direc[offset:offset + n].reshape(shape)
            continue
        in_values = [tape.nodes[i].value for i in node.inputs]
        in_tangents = [tangents[i] for i in node.inputs]
        if all(t is None for t in in_tangents):
            continue
        tangents[idx] = OPS[node.op].tangent(node, in_values, in_tangents)
    t = tangents[out.index]
    if t is None:
        t = np.zeros_like(out.value)
    return Tensor(np.ascontiguousarray(t))


def finite_diff_check(loss_fn: Callable[[WeightBundle], float], weights: WeightBundle,
                      analytic: Tensor, step: float,
                      coords: Sequence[int] | None = None) -> float:
    """Max relative error between ``analytic`` and central finite differences.

    The relative error denominator is max(|analytic|, |numeric|, 1e-12).
    ``coords`` restricts the sweep to a coordinate subset (defaults to all).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if analytic.shape != (weights.size,):
        raise ShapeError("analytic gradient must match the flat weight layout")
    base = weights.flat.data.astype(np.float64)
    indices = range(weights.size) if coords is None else coords
    worst = 0.0
    for i in indices:
        bumped = base.copy()
        bumped[i] = base[i] + step
        f_plus = float(loss_fn(weights.with_flat(bumped.astype(weights.flat.data.dtype))))
        bumped[i] = base[i] - step
        f_minus = float(loss_fn(weights.with_flat(bumped.astype(weights.flat.data.dtype))))
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise NonFiniteError("loss evaluated to NaN or Inf during finite differences")
        numeric = (f_plus - f_minus) / (2.0 * step)
        a = float(analytic.data[i])
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
        worst = max(worst, err)
    return worst
