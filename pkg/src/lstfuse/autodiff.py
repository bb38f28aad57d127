"""Reverse-mode differentiation over the operator set the fusion engine needs.

Ops run on plain float64 numpy arrays wrapped in Tensor handles.  A Tensor is
either a constant (no tape) or the output of a recorded operation on exactly
one Tape.  The tape records only what can influence a trainable parameter:
leaves enter through Tape.parameter(), and an op output joins the tape iff at
least one of its inputs is on the tape.  Everything else stays constant, so
frozen branches of a network cost nothing during backward.

Backward walks the node list once in reverse insertion order, accumulating
upstream gradients, and returns one gradient array per parameter (zeros for
parameters the loss never touched).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class TapeError(RuntimeError):
    """Misuse of the tape: cross-tape mixing or an off-tape/non-scalar loss."""


class Tensor:
    """Value plus (optionally) its position on a tape."""

    __slots__ = ("values", "tape", "node_id")

    def __init__(self, values, tape: "Tape | None" = None, node_id: int | None = None):
        self.values = values
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def item(self) -> float:
        return float(self.values)

    def __repr__(self):
        where = "constant" if self.tape is None else f"node {self.node_id}"
        return f"Tensor(shape={self.values.shape}, {where})"


def constant(values) -> Tensor:
    return Tensor(np.asarray(values, dtype=np.float64))


class Tape:
    """Append-only record of operations, topologically ordered by construction."""

    def __init__(self):
        # each entry is a backward closure upstream -> [(input_node_id, grad)],
        # or None for parameter leaves
        self._nodes: list = []
        self._parameters: dict[int, np.ndarray] = {}

    def parameter(self, values) -> Tensor:
        """Register a trainable leaf; gradients are reported against its id."""
        arr = np.asarray(values, dtype=np.float64)
        node_id = self._append(None)
        self._parameters[node_id] = arr
        return Tensor(arr, self, node_id)

    def parameter_ids(self) -> tuple[int, ...]:
        return tuple(self._parameters)

    def _append(self, backward_fn) -> int:
        self._nodes.append(backward_fn)
        return len(self._nodes) - 1

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Gradient of a scalar loss with respect to every parameter.

        Visits each node exactly once, newest first.  Parameters the loss
        does not reach get zero gradients.
        """
        if loss.tape is not self or loss.node_id is None:
            raise TapeError("loss tensor is not on this tape")
        if loss.values.shape != ():
            raise TapeError(f"loss must be scalar, got shape {loss.values.shape}")
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones((), dtype=np.float64)}
        for node_id in range(len(self._nodes) - 1, -1, -1):
            backward_fn = self._nodes[node_id]
            if backward_fn is None:
                continue  # parameter leaf: keep its accumulated gradient
            upstream = grads.pop(node_id, None)
            if upstream is None:
                continue  # loss does not depend on this node
            for input_id, contrib in backward_fn(upstream):
                held = grads.get(input_id)
                if held is None:
                    grads[input_id] = contrib.copy()
                else:
                    grads[input_id] = held + contrib
        return {
            pid: grads.get(pid, np.zeros_like(values))
            for pid, values in self._parameters.items()
        }


def _tape_of(*tensors: Tensor) -> "Tape | None":
    tape = None
    for t in tensors:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise TapeError("inputs belong to different tapes")
    return tape


def _record(tape, out_values, edges) -> Tensor:
    """edges: list of (node_id, grad_fn upstream -> ndarray) for on-tape inputs."""
    if tape is None or not edges:
        return Tensor(out_values)

    def backward_fn(upstream):
        return [(node_id, grad_fn(upstream)) for node_id, grad_fn in edges]

    return Tensor(out_values, tape, tape._append(backward_fn))


def _require_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.values.shape != b.values.shape:
        raise ValueError(f"{op}: shape mismatch {a.values.shape} vs {b.values.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "add")
    edges = []
    if a.node_id is not None:
        edges.append((a.node_id, lambda u: u))
    if b.node_id is not None:
        edges.append((b.node_id, lambda u: u))
    return _record(_tape_of(a, b), a.values + b.values, edges)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "sub")
    edges = []
    if a.node_id is not None:
        edges.append((a.node_id, lambda u: u))
    if b.node_id is not None:
        edges.append((b.node_id, lambda u: -u))
    return _record(_tape_of(a, b), a.values - b.values, edges)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "mul")
    av, bv = a.values, b.values
    edges = []
    if a.node_id is not None:
        edges.append((a.node_id, lambda u: u * bv))
    if b.node_id is not None:
        edges.append((b.node_id, lambda u: u * av))
    return _record(_tape_of(a, b), av * bv, edges)


def scalar_mul(a: Tensor, s: float) -> Tensor:
    s = float(s)
    edges = []
    if a.node_id is not None:
        edges.append((a.node_id, lambda u: u * s))
    return _record(_tape_of(a), a.values * s, edges)


def scalar_add(a: Tensor, s: float) -> Tensor:
    s = float(s)
    edges = []
    if a.node_id is not None:
        edges.append((a.node_id, lambda u: u))
    return _record(_tape_of(a), a.values + s, edges)


def relu(a: Tensor) -> Tensor:
    av = a.values
    edges = []
    if a.node_id is not None:
        edges.append((a.node_id, lambda u: u * (av > 0.0)))
    return _record(_tape_of(a), np.maximum(av, 0.0), edges)


def abs_smooth(a: Tensor) -> Tensor:
    """|x| elementwise, with subgradient 0 at x == 0."""
    av = a.values
    edges = []
    if a.node_id is not None:
        edges.append((a.node_id, lambda u: u * np.sign(av)))
    return _record(_tape_of(a), np.abs(av), edges)


def dropout_with_mask(a: Tensor, mask) -> Tensor:
    """Multiply by an externally sampled {0, 1/(1-p)} mask.

    The mask is a constant on the tape; gradients flow through the
    multiplication only.
    """
    if isinstance(mask, Tensor):
        if mask.tape is not None:
            raise TapeError("dropout masks must be constants, not tape outputs")
        mask = mask.values
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != a.values.shape:
        raise ValueError(f"dropout: mask shape {mask.shape} != input {a.values.shape}")
    edges = []
    if a.node_id is not None:
        edges.append((a.node_id, lambda u: u * mask))
    return _record(_tape_of(a), a.values * mask, edges)


def concat_channels(*tensors: Tensor) -> Tensor:
    if len(tensors) < 2:
        raise ValueError("concat_channels needs at least two inputs")
    spatial = {t.values.shape[1:] for t in tensors}
    if len(spatial) != 1 or any(t.values.ndim != 3 for t in tensors):
        raise ValueError(f"concat_channels: incompatible shapes {[t.values.shape for t in tensors]}")
    out = np.concatenate([t.values for t in tensors], axis=0)
    edges = []
    offset = 0
    for t in tensors:
        channels = t.values.shape[0]
        if t.node_id is not None:
            lo, hi = offset, offset + channels
            edges.append((t.node_id, lambda u, lo=lo, hi=hi: u[lo:hi]))
        offset += channels
    return _record(_tape_of(*tensors), out, edges)


def _mean_all(a: Tensor, op: str) -> Tensor:
    av = a.values
    n = av.size
    if n == 0:
        raise ValueError(f"{op}: empty input")
    edges = []
    if a.node_id is not None:
        edges.append((a.node_id, lambda u: np.full_like(av, float(u) / n)))
    return _record(_tape_of(a), np.asarray(av.mean()), edges)


def spatial_mean(a: Tensor) -> Tensor:
    """Scalar mean of a (channels, height, width) tensor."""
    if a.values.ndim != 3:
        raise ValueError(f"spatial_mean expects a 3-D tensor, got shape {a.values.shape}")
    return _mean_all(a, "spatial_mean")


def reduce_mean(a: Tensor) -> Tensor:
    """Scalar mean over all elements of any-shaped tensor."""
    return _mean_all(a, "reduce_mean")


def mean_over_set(tensors: list[Tensor]) -> Tensor:
    """Elementwise mean of N same-shaped tensors.

    Computed as first + mean(deviations), so N bit-identical inputs give back
    the input bit-exactly.
    """
    if len(tensors) < 1:
        raise ValueError("mean_over_set: empty set")
    shape = tensors[0].values.shape
    for t in tensors[1:]:
        if t.values.shape != shape:
            raise ValueError("mean_over_set: shape mismatch across the set")
    n = len(tensors)
    ref = tensors[0].values
    dev_sum = np.zeros_like(ref)
    for t in tensors[1:]:
        dev_sum += t.values - ref
    out = ref + dev_sum / n
    scale = 1.0 / n
    edges = [
        (t.node_id, lambda u: u * scale) for t in tensors if t.node_id is not None
    ]
    return _record(_tape_of(*tensors), out, edges)


def sample_variance_over_set(tensors: list[Tensor]) -> Tensor:
    """Elementwise unbiased variance over N >= 2 same-shaped tensors.

    Deviations are taken against the first tensor before squaring, which
    makes the result exactly zero for identical inputs; rounding residue
    below zero is clipped.
    """
    n = len(tensors)
    if n < 2:
        raise ValueError(f"sample variance needs at least 2 tensors, got {n}")
    shape = tensors[0].values.shape
    for t in tensors[1:]:
        if t.values.shape != shape:
            raise ValueError("sample_variance_over_set: shape mismatch across the set")
    ref = tensors[0].values
    shifted = [t.values - ref for t in tensors]
    s1 = np.zeros_like(ref)
    s2 = np.zeros_like(ref)
    for e in shifted:
        s1 += e
        s2 += e * e
    var = np.maximum((s2 - s1 * s1 / n) / (n - 1), 0.0)
    mean_shift = s1 / n
    edges = []
    for t, e in zip(tensors, shifted):
        if t.node_id is not None:
            edges.append(
                (t.node_id, lambda u, d=e - mean_shift: u * (2.0 / (n - 1)) * d)
            )
    return _record(_tape_of(*tensors), var, edges)


def correlation_degenerate(x_values: np.ndarray, y_values: np.ndarray) -> bool:
    """True when either field is constant, so Pearson's denominator vanishes."""
    x_values = np.asarray(x_values)
    y_values = np.asarray(y_values)
    if x_values.max() == x_values.min() or y_values.max() == y_values.min():
        return True
    dx = x_values - x_values.mean()
    dy = y_values - y_values.mean()
    return float((dx * dx).sum()) == 0.0 or float((dy * dy).sum()) == 0.0


def pearson_correlation(x: Tensor, y: Tensor) -> Tensor:
    """Scalar Pearson correlation of two same-shaped fields after mean removal.

    Degenerate inputs (either field constant) yield the constant 0 with zero
    gradient; callers wanting to count those cases should test with
    correlation_degenerate first.  The result is clipped to [-1, 1].
    """
    _require_same_shape(x, y, "pearson_correlation")
    xv, yv = x.values, y.values
    if correlation_degenerate(xv, yv):
        return constant(0.0)
    dx = xv - xv.mean()
    dy = yv - yv.mean()
    sxx = float((dx * dx).sum())
    syy = float((dy * dy).sum())
    sxy = float((dx * dy).sum())
    denom = np.sqrt(sxx * syy)
    rho = float(np.clip(sxy / denom, -1.0, 1.0))
    edges = []
    if x.node_id is not None:
        edges.append((x.node_id, lambda u: float(u) * (dy / denom - rho * dx / sxx)))
    if y.node_id is not None:
        edges.append((y.node_id, lambda u: float(u) * (dx / denom - rho * dy / syy)))
    return _record(_tape_of(x, y), np.asarray(rho), edges)


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(c, H, W) -> (c*k*k, H*W) patch matrix under same-size zero padding."""
    if k == 1:
        c, h, w = x.shape
        return x.reshape(c, h * w)
    pad = k // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # (c, H, W, k, k)
    c, h, w = x.shape
    return win.transpose(0, 3, 4, 1, 2).reshape(c * k * k, h * w)


def _conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None) -> tuple[np.ndarray, np.ndarray]:
    co, ci, k, _ = w.shape
    h, wd = x.shape[1], x.shape[2]
    cols = _im2col(x, k)
    out = w.reshape(co, ci * k * k) @ cols
    if b is not None:
        out += b[:, None]
    return out.reshape(co, h, wd), cols


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """2-D convolution, stride 1, zero padding that preserves spatial dims.

    x: (c_in, H, W); weight: (c_out, c_in, k, k) with odd k; bias: (c_out,).
    """
    xv, wv = x.values, weight.values
    if xv.ndim != 3 or wv.ndim != 4:
        raise ValueError(f"conv2d: bad ranks {xv.shape}, {wv.shape}")
    co, ci, k, k2 = wv.shape
    if k != k2 or k % 2 != 1:
        raise ValueError(f"conv2d: kernel must be square with odd size, got {k}x{k2}")
    if xv.shape[0] != ci:
        raise ValueError(f"conv2d: input has {xv.shape[0]} channels, weight expects {ci}")
    bv = None
    if bias is not None:
        bv = bias.values
        if bv.shape != (co,):
            raise ValueError(f"conv2d: bias shape {bv.shape} != ({co},)")
    out, cols = _conv_forward(xv, wv, bv)
    h, wd = xv.shape[1], xv.shape[2]

    edges = []
    if x.node_id is not None:
        # dX is a same-padding convolution of the upstream gradient with the
        # channel-transposed, spatially flipped kernel
        w_flip = np.ascontiguousarray(wv.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
        edges.append((x.node_id, lambda u: _conv_forward(u, w_flip, None)[0]))
    if weight.node_id is not None:
        cols_t = cols.T  # keep the patch matrix alive only when dW is needed
        edges.append(
            (weight.node_id, lambda u: (u.reshape(co, h * wd) @ cols_t).reshape(wv.shape))
        )
    if bias is not None and bias.node_id is not None:
        edges.append((bias.node_id, lambda u: u.sum(axis=(1, 2))))
    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record(_tape_of(*inputs), out, edges)
