"""Define-by-run reverse-mode differentiation over the tensor kernels.

A :class:`Tape` records every op in execution order. Insertion order is a
valid topological order, so :func:`backward` is a single reverse sweep.
Gradients of a node that feeds several consumers are summed.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Conv2dSpec, Tensor

BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class TapeError(RuntimeError):
    pass


class Node:
    """Handle to one recorded value on a tape."""

    __slots__ = ("tape", "index", "op", "inputs", "value", "backward_fn", "name")

    def __init__(self, tape, index, op, inputs, value, backward_fn=None, name=None):
        self.tape = tape
        self.index = index
        self.op = op
        self.inputs = inputs
        self.value = value
        self.backward_fn = backward_fn
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"<Node #{self.index} {self.op}{label} {self.shape}>"


class Tape:
    def __init__(self):
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}

    def _append(self, op, inputs, value, backward_fn=None, name=None) -> Node:
        node = Node(self, len(self.nodes), op, tuple(inputs), value, backward_fn, name)
        self.nodes.append(node)
        return node

    def param(self, name: str, value: Tensor) -> Node:
        if name in self.params:
            raise TapeError(f"parameter {name!r} registered twice")
        node = self._append("param", (), value, name=name)
        self.params[name] = node
        return node

    def constant(self, value: Tensor, name: str | None = None) -> Node:
        return self._append("const", (), value, name=name)

    def record(self, op: str, inputs: Sequence[Node], output: Tensor, backward_fn: BackwardFn | None = None) -> Node:
        """Append an op node. ``backward_fn`` maps the output gradient to one
        gradient (or None) per input."""
        for k, inp in enumerate(inputs):
            if not isinstance(inp, Node) or inp.tape is not self:
                raise TapeError(f"{op}: input {k} is not a node on this tape")
        return self._append(op, inputs, output, backward_fn)

    def op_sequence(self) -> list[str]:
        """Names of the recorded ops, leaves (params/constants) excluded."""
        return [n.op for n in self.nodes if n.op not in ("param", "const")]

    def first_non_finite(self) -> Node | None:
        for node in self.nodes:
            if not np.all(np.isfinite(node.value.data)):
                return node
        return None

    # -- differentiable ops -------------------------------------------------

    def conv2d(self, x: Node, weight: Node, bias: Node | None, spec: Conv2dSpec) -> Node:
        out, cols = T.conv2d_cols(x.value, weight.value, None if bias is None else bias.value, spec)
        x_shape = x.shape
        w_data = weight.value.data

        def backward(g):
            g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(spec.out_channels, -1)
            gw = (g2 @ cols.T).reshape(w_data.shape)
            gx = T.col2im(w_data.reshape(spec.out_channels, -1).T @ g2, x_shape, spec)
            if bias is None:
                return gx, gw
            return gx, gw, g2.sum(axis=1)

        inputs = (x, weight) if bias is None else (x, weight, bias)
        return self.record("conv2d", inputs, out, backward)

    def bilinear_resize(self, x: Node, out_h: int, out_w: int, align_corners: bool = False) -> Node:
        h, w = x.shape[2:]
        out = T.bilinear_resize(x.value, out_h, out_w, align_corners)
        ry = T.resize_matrix(h, out_h, align_corners, x.value.dtype)
        rx = T.resize_matrix(w, out_w, align_corners, x.value.dtype)
        return self.record("bilinear_resize", (x,), out, lambda g: (ry.T @ g @ rx,))

    def maxpool2d(self, x: Node, window: int = 2, stride: int | None = None) -> Node:
        stride = window if stride is None else stride
        out, idx = T.maxpool2d_with_indices(x.value, window, stride)
        x_shape = x.shape

        def backward(g):
            n, c, ho, wo = g.shape
            oy = np.arange(ho)[:, None] * stride + idx // window
            ox = np.arange(wo)[None, :] * stride + idx % window
            flat = (oy * x_shape[3] + ox).reshape(n * c, -1)
            gx = np.zeros((n * c, x_shape[2] * x_shape[3]), dtype=g.dtype)
            rows = np.broadcast_to(np.arange(n * c)[:, None], flat.shape)
            np.add.at(gx, (rows, flat), g.reshape(n * c, -1))
            return (gx.reshape(x_shape),)

        return self.record("maxpool2d", (x,), out, backward)

    def avgpool2d(self, x: Node, window: int = 2, stride: int | None = None) -> Node:
        stride = window if stride is None else stride
        out = T.avgpool2d(x.value, window, stride)
        x_shape = x.shape

        def backward(g):
            gx = np.zeros(x_shape, dtype=g.dtype)
            share = g / (window * window)
            ho, wo = g.shape[2:]
            for i in range(window):
                for j in range(window):
                    gx[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += share
            return (gx,)

        return self.record("avgpool2d", (x,), out, backward)

    def softmax_channels(self, x: Node) -> Node:
        out = T.softmax_channels(x.value)
        y = out.data

        def backward(g):
            return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

        return self.record("softmax_channels", (x,), out, backward)

    def sigmoid(self, x: Node) -> Node:
        out = T.sigmoid(x.value)
        y = out.data
        return self.record("sigmoid", (x,), out, lambda g: (g * y * (1 - y),))

    def relu(self, x: Node) -> Node:
        out = T.relu(x.value)
        mask = x.value.data > 0
        return self.record("relu", (x,), out, lambda g: (g * mask,))

    def mul(self, a: Node, b: Node) -> Node:
        out = T.elementwise_mul(a.value, b.value)
        av, bv = a.value.data, b.value.data
        return self.record("mul", (a, b), out, lambda g: (g * bv, g * av))

    def add(self, a: Node, b: Node) -> Node:
        out = T.elementwise_add(a.value, b.value)
        return self.record("add", (a, b), out, lambda g: (g, g))

    def maximum(self, a: Node, b: Node) -> Node:
        out = T.elementwise_max(a.value, b.value)
        # Ties route to the first operand.
        first = a.value.data >= b.value.data
        return self.record("maximum", (a, b), out, lambda g: (g * first, g * ~first))

    def scale(self, x: Node, s: float) -> Node:
        out = T.scalar_scale(x.value, s)
        s_typed = x.value.dtype.type(s)
        return self.record("scale", (x,), out, lambda g: (g * s_typed,))

    def concat_channels(self, xs: Sequence[Node]) -> Node:
        out = T.concat_channels([x.value for x in xs])
        bounds = np.cumsum([0] + [x.shape[1] for x in xs])

        def backward(g):
            return tuple(g[:, bounds[k]:bounds[k + 1]] for k in range(len(xs)))

        return self.record("concat_channels", xs, out, backward)

    def slice_channels(self, x: Node, start: int, stop: int) -> Node:
        out = T.slice_channels(x.value, start, stop)
        x_shape = x.shape

        def backward(g):
            gx = np.zeros(x_shape, dtype=g.dtype)
            gx[:, start:stop] = g
            return (gx,)

        return self.record("slice_channels", (x,), out, backward)

    def broadcast_channels(self, x: Node, channels: int) -> Node:
        out = T.broadcast_channels(x.value, channels)
        return self.record("broadcast_channels", (x,), out, lambda g: (g.sum(axis=1, keepdims=True),))

    def sum(self, x: Node) -> Node:
        out = T.sum_all(x.value)
        x_shape = x.shape
        return self.record("sum", (x,), out, lambda g: (np.broadcast_to(g.reshape(()), x_shape),))


def backward(tape: Tape, loss: Node) -> dict[str, Tensor]:
    """Gradient of a scalar ``loss`` with respect to every registered parameter.

    Parameters the loss does not depend on get zero gradients.
    """
    if loss.tape is not tape:
        raise TapeError("loss node belongs to a different tape")
    if loss.value.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: list[np.ndarray | None] = [None] * (loss.index + 1)
    grads[loss.index] = np.ones(loss.shape, dtype=loss.value.dtype)
    for node in reversed(tape.nodes[:loss.index + 1]):
        g = grads[node.index]
        if g is None or node.backward_fn is None:
            continue
        for inp, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None:
                continue
            prev = grads[inp.index]
            grads[inp.index] = gi if prev is None else prev + gi
    out = {}
    for name, node in tape.params.items():
        g = grads[node.index] if node.index < len(grads) else None
        if g is None:
            out[name] = Tensor.zeros(node.shape, dtype=node.value.dtype)
        else:
            out[name] = Tensor(np.reshape(g, node.shape), dtype=node.value.dtype)
    return out


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_param: str | None
    worst_index: int | None = None
    # (param name, flat index, analytic, numeric, relative error)
    entries: list = field(default_factory=list)

    def passed(self, tol: float) -> bool:
        return self.max_rel_err < tol


def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def finite_diff_check(forward_fn, params: dict[str, Tensor], epsilon: float = 1e-5,
                      sample_count: int = 50, seed: int = 0, fd_dtype=None) -> GradCheckReport:
    """Compare tape gradients against central differences.

    ``forward_fn(params) -> (tape, loss_node)`` must be deterministic. The
    sampled coordinates cycle over the parameters in name order so that small
    tensors (biases, output layers) are always covered; the flat index inside
    each tensor comes from a generator seeded with ``seed``.

    ``fd_dtype=np.float64`` evaluates the differences in double precision
    while the analytic gradients keep the parameters' dtype; a float32 loss
    cannot resolve gradients much below its own rounding step over 2h.
    """
    tape, loss = forward_fn(params)
    grads = backward(tape, loss)
    rng = np.random.default_rng(seed)
    names = sorted(params)
    report = GradCheckReport(0.0, None)
    if fd_dtype is not None:
        params = {k: v.astype(fd_dtype) for k, v in params.items()}
    for k in range(sample_count):
        name = names[k % len(names)]
        base = params[name]
        flat = int(rng.integers(base.size))
        values, points = [], []
        for sign in (1.0, -1.0):
            arr = base.numpy().reshape(-1)
            arr[flat] += sign * epsilon
            # in float32 the realised step differs from epsilon; divide by it
            points.append(float(arr[flat]))
            trial = dict(params)
            trial[name] = Tensor(arr.reshape(base.shape), dtype=base.dtype)
            values.append(forward_fn(trial)[1].value.item())
        numeric = (values[0] - values[1]) / (points[0] - points[1])
        analytic = float(grads[name].data.reshape(-1)[flat])
        err = relative_error(analytic, numeric)
        report.entries.append((name, flat, analytic, numeric, err))
        if err > report.max_rel_err or report.worst_param is None:
            report.max_rel_err, report.worst_param, report.worst_index = err, name, flat
    return report
