"""Reverse-mode differentiation engine scoped to the denoising network.

Provides exactly the operator set the unrolled network needs: same-size
cross-correlation and its exact adjoint, per-channel soft thresholding,
a handful of elementwise ops, scalar mean, and Adam.  Tensors are dense
(C, H, W) float64 arrays; graphs are built eagerly and swept once in
reverse topological order.  No broadcasting, no higher-order gradients.

Graphs are reference-acyclic (gradient-push closures never capture their
own output node) so finished iterations free their tensors immediately;
that matters because training builds a few thousand of them.

The raw array kernels (`correlate2d` and friends) are shared with the
classical ISTA solver so both routes run the identical convolution
arithmetic.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import _kernels


class GradientStateError(RuntimeError):
    """Backward invoked twice on the same graph without a gradient reset."""


class GradientError(RuntimeError):
    """A parameter gradient turned non-finite."""


# ---------------------------------------------------------------------------
# Raw convolution kernels (shared with the classical solver).
#
# Cross-correlation with "same" zero padding:
#   out[o](r, c) = sum_i sum_{u,v} x[i](r+u-p, c+v-p) * w[o,i,u,v],  p = k//2
# Each direction reduces to one BLAS contraction plus a k*k shift pass over
# whichever side has fewer channels, so M-filter banks stay cheap.
# ---------------------------------------------------------------------------


def _gather_taps(x: np.ndarray, k: int) -> np.ndarray:
    """(C, H, W) -> (C, k*k, H, W): zero-extended shifted reads, tap t=(u,v)."""
    c, h, w = x.shape
    p = k // 2
    xp = np.zeros((c, h + 2 * p, w + 2 * p), dtype=x.dtype)
    xp[:, p : p + h, p : p + w] = x
    taps = np.empty((c, k * k, h, w), dtype=x.dtype)
    for t in range(k * k):
        u, v = divmod(t, k)
        taps[:, t] = xp[:, u : u + h, v : v + w]
    return taps


def _sum_shifted(parts: np.ndarray, k: int) -> np.ndarray:
    """(C, k*k, H, W) -> (C, H, W): sum of zero-extended shifted reads."""
    c, k2, h, w = parts.shape
    p = k // 2
    pad = np.zeros((c, k2, h + 2 * p, w + 2 * p), dtype=parts.dtype)
    pad[:, :, p : p + h, p : p + w] = parts
    out = np.zeros((c, h, w), dtype=parts.dtype)
    for t in range(k2):
        u, v = divmod(t, k)
        out += pad[:, t, u : u + h, v : v + w]
    return out


def correlate2d(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Same-size cross-correlation of (C, H, W) input with (O, C, k, k) bank."""
    o, c, k, _ = w.shape
    if x.ndim != 3 or x.shape[0] != c:
        raise ValueError(f"input shape {x.shape} does not match bank {w.shape}")
    h, wd = x.shape[1], x.shape[2]
    if h < k or wd < k:
        raise ValueError(f"spatial dims {h}x{wd} smaller than kernel {k}")
    if c <= o:
        taps = _gather_taps(x, k).reshape(c * k * k, h * wd)
        out = w.reshape(o, c * k * k) @ taps
        return out.reshape(o, h, wd)
    # Contract channels first, then shift: keeps the intermediate at O*k*k maps.
    parts = np.tensordot(w, x, axes=([1], [0]))  # (O, k, k, H, W)
    return _sum_shifted(parts.reshape(o, k * k, h, wd), k)


def correlate2d_adjoint(y: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Exact adjoint of :func:`correlate2d` in its input argument.

    Satisfies <correlate2d(a, w), b> == <a, correlate2d_adjoint(b, w)>.
    """
    o, c, k, _ = w.shape
    if y.ndim != 3 or y.shape[0] != o:
        raise ValueError(f"input shape {y.shape} does not match bank {w.shape}")
    h, wd = y.shape[1], y.shape[2]
    if o <= c:
        # Reversed-tap gather realizes the transposed shifts.
        sy = _gather_taps(y, k)[:, ::-1].reshape(o, k * k, h * wd)
        out = np.tensordot(w.reshape(o, c, k * k), sy, axes=([0, 2], [0, 1]))
        return out.reshape(c, h, wd)
    parts = np.tensordot(w, y, axes=([0], [0]))  # (C, k, k, H, W)
    return _sum_shifted(parts.reshape(c, k * k, h, wd)[:, ::-1], k)


def correlate2d_wgrad(x: np.ndarray, gout: np.ndarray, k: int) -> np.ndarray:
    """Weight gradient of correlate2d: (C,H,W) input, (O,H,W) output grad."""
    c, h, w = x.shape
    o = gout.shape[0]
    if c <= o:
        taps = _gather_taps(x, k).reshape(c * k * k, h * w)
        gw = gout.reshape(o, h * w) @ taps.T
        return gw.reshape(o, c, k, k)
    sy = _gather_taps(gout, k)[:, ::-1].reshape(o * k * k, h * w)
    gw = sy @ x.reshape(c, h * w).T  # (O*k*k, C)
    return gw.reshape(o, k * k, c).transpose(0, 2, 1).reshape(o, c, k, k)


def soft_threshold_array(x: np.ndarray, eps) -> np.ndarray:
    """sign(x) * max(|x| - eps, 0); eps scalar or per-channel (C,)."""
    eps = np.asarray(eps, dtype=np.float64)
    if eps.ndim == 0:
        eps = np.full(x.shape[0], float(eps))
    out, _ = _kernels.shrink(np.ascontiguousarray(x), eps)
    return out


# ---------------------------------------------------------------------------
# Graph nodes
# ---------------------------------------------------------------------------


class ValueNode:
    """One tensor in the computation graph.

    Holds values, an additively accumulated gradient of the same shape, and
    a closure that pushes an incoming gradient to its parents during the
    reverse sweep.  Leaves with ``requires_grad`` are the trainable
    parameters.
    """

    __slots__ = ("values", "grad", "requires_grad", "name", "_parents", "_push", "_swept")

    def __init__(self, values, requires_grad=False, parents=(), push=None, name=""):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = tuple(parents)
        self._push = push
        self._swept = False

    def accumulate(self, g: np.ndarray, own: bool = False) -> None:
        """Add an incoming gradient; ``own`` donates the buffer (no copy)."""
        if self.grad is None:
            self.grad = g if own else np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    @property
    def shape(self):
        return self.values.shape

    def __repr__(self):
        tag = self.name or "node"
        return f"ValueNode({tag}, shape={self.values.shape}, grad={self.grad is not None})"


def constant(values, name: str = "") -> ValueNode:
    return ValueNode(values, requires_grad=False, name=name)


def parameter(values, name: str = "") -> ValueNode:
    return ValueNode(np.array(values, dtype=np.float64, copy=True),
                     requires_grad=True, name=name)


def detach(x: ValueNode) -> ValueNode:
    """Stop-gradient: same values, no path back to the source graph."""
    return ValueNode(x.values, requires_grad=False, name="detach")


def _result(values, parents, push, name) -> ValueNode:
    if any(p.requires_grad for p in parents):
        return ValueNode(values, requires_grad=True, parents=parents, push=push, name=name)
    return ValueNode(values, requires_grad=False, name=name)


def _check_same_shape(a: ValueNode, b: ValueNode, op: str) -> None:
    if a.values.shape != b.values.shape:
        raise ValueError(f"{op}: shape mismatch {a.values.shape} vs {b.values.shape}")


def add(a: ValueNode, b: ValueNode) -> ValueNode:
    _check_same_shape(a, b, "add")

    def push(g):
        if a.requires_grad:
            a.accumulate(g)
        if b.requires_grad:
            b.accumulate(g)

    return _result(a.values + b.values, (a, b), push, "add")


def sub(a: ValueNode, b: ValueNode) -> ValueNode:
    _check_same_shape(a, b, "sub")

    def push(g):
        if a.requires_grad:
            a.accumulate(g)
        if b.requires_grad:
            b.accumulate(np.negative(g), own=True)

    return _result(a.values - b.values, (a, b), push, "sub")


def mul(a: ValueNode, b: ValueNode) -> ValueNode:
    _check_same_shape(a, b, "mul")

    def push(g):
        if a.requires_grad:
            a.accumulate(g * b.values, own=True)
        if b.requires_grad:
            b.accumulate(g * a.values, own=True)

    return _result(a.values * b.values, (a, b), push, "mul")


def exp(x: ValueNode) -> ValueNode:
    vals = np.exp(x.values)

    def push(g):
        x.accumulate(g * vals, own=True)

    return _result(vals, (x,), push, "exp")


def absolute(x: ValueNode) -> ValueNode:
    """|x|; subgradient at 0 is 0."""

    def push(g):
        x.accumulate(g * np.sign(x.values), own=True)

    return _result(np.abs(x.values), (x,), push, "abs")


def scale(x: ValueNode, c: float) -> ValueNode:
    c = float(c)

    def push(g):
        x.accumulate(g * c, own=True)

    return _result(x.values * c, (x,), push, "scale")


def mean(x: ValueNode) -> ValueNode:
    n = x.values.size

    def push(g):
        x.accumulate(np.full(x.values.shape, float(g) / n), own=True)

    return _result(np.asarray(x.values.mean()), (x,), push, "mean")


class KernelBank:
    """A bank of M square odd-sized filters, optionally with per-filter thresholds.

    Weights are (out_channels, in_channels, k, k); the dictionary dimension M
    is whichever channel axis is not the single image channel.  Thresholds,
    when present, are an (M,) vector kept nonnegative by the optimizer.
    """

    def __init__(self, weights, thresholds=None, name: str = "bank"):
        w = np.array(weights, dtype=np.float64, copy=True)
        if w.ndim != 4 or w.shape[2] != w.shape[3]:
            raise ValueError(f"weights must be (O, C, k, k), got {w.shape}")
        if w.shape[2] % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {w.shape[2]}")
        self.name = name
        self.weights = parameter(w, name=f"{name}.weights")
        self.thresholds = None
        if thresholds is not None:
            t = np.array(thresholds, dtype=np.float64, copy=True)
            if t.ndim != 1:
                raise ValueError("thresholds must be a 1-D per-filter vector")
            if (t < 0).any():
                raise ValueError("thresholds must be nonnegative")
            self.thresholds = parameter(t, name=f"{name}.thresholds")

    @property
    def kernel_size(self) -> int:
        return self.weights.values.shape[2]

    @property
    def out_channels(self) -> int:
        return self.weights.values.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.values.shape[1]

    @property
    def num_filters(self) -> int:
        return max(self.out_channels, self.in_channels)

    def parameters(self):
        yield self.weights
        if self.thresholds is not None:
            yield self.thresholds


def conv2d(x: ValueNode, bank: KernelBank) -> ValueNode:
    """Same-size cross-correlation; output channels follow the bank."""
    w = bank.weights
    if x.values.ndim != 3 or x.values.shape[0] != bank.in_channels:
        raise ValueError(
            f"conv2d: input {x.values.shape} incompatible with bank "
            f"({bank.out_channels},{bank.in_channels},k,k)"
        )
    k = bank.kernel_size

    def push(g):
        if x.requires_grad:
            x.accumulate(correlate2d_adjoint(g, w.values), own=True)
        if w.requires_grad:
            w.accumulate(correlate2d_wgrad(x.values, g, k), own=True)

    return _result(correlate2d(x.values, w.values), (x, w), push, "conv2d")


def conv2d_transpose(x: ValueNode, bank: KernelBank) -> ValueNode:
    """Exact adjoint of :func:`conv2d` with the same bank."""
    w = bank.weights
    if x.values.ndim != 3 or x.values.shape[0] != bank.out_channels:
        raise ValueError(
            f"conv2d_transpose: input {x.values.shape} incompatible with bank "
            f"({bank.out_channels},{bank.in_channels},k,k)"
        )
    k = bank.kernel_size

    def push(g):
        if x.requires_grad:
            x.accumulate(correlate2d(g, w.values), own=True)
        if w.requires_grad:
            w.accumulate(correlate2d_wgrad(g, x.values, k), own=True)

    return _result(correlate2d_adjoint(x.values, w.values), (x, w), push, "conv2dT")


def _check_thresholds(eps: np.ndarray, x: ValueNode) -> None:
    if eps.ndim != 1 or x.values.ndim != 3 or eps.shape[0] != x.values.shape[0]:
        raise ValueError(
            f"soft_threshold: thresholds {eps.shape} incompatible with input {x.values.shape}"
        )
    if (eps < 0).any():
        raise ValueError("soft_threshold: negative threshold")


def _shrink_push(x: ValueNode, thresholds: ValueNode, out_vals: np.ndarray):
    """Shared backward rule: grad 1 on the active set, -sign(x) to thresholds."""

    def push(g):
        gx, geps = _kernels.shrink_backward(g, out_vals)
        if x.requires_grad:
            x.accumulate(gx, own=True)
        if thresholds.requires_grad:
            thresholds.accumulate(geps, own=True)

    return push


def soft_threshold(x: ValueNode, thresholds: ValueNode) -> ValueNode:
    """Per-channel shrinkage sign(x) * max(|x| - eps_c, 0).

    Gradient is 1 where |x| > eps, 0 elsewhere (0 on the kink itself);
    the threshold gradient is -sign(x) on active entries.
    """
    eps = thresholds.values
    _check_thresholds(eps, x)
    out_vals, _ = _kernels.shrink(np.ascontiguousarray(x.values), eps)
    return _result(out_vals, (x, thresholds),
                   _shrink_push(x, thresholds, out_vals), "soft_threshold")


def add_soft_threshold(a: ValueNode, b: ValueNode, thresholds: ValueNode
                       ) -> tuple[ValueNode, bool]:
    """Fused shrink(a + b): the network's refinement-step hot path.

    Returns the node and a finiteness flag for cheap divergence detection.
    Identical arithmetic to soft_threshold(add(a, b), thresholds).
    """
    _check_same_shape(a, b, "add_soft_threshold")
    eps = thresholds.values
    _check_thresholds(eps, a)
    out_vals, finite = _kernels.shrink_add(a.values, b.values, eps)

    def push(g):
        gx, geps = _kernels.shrink_backward(g, out_vals)
        if a.requires_grad:
            a.accumulate(gx, own=True)
        if b.requires_grad:
            b.accumulate(gx)
        if thresholds.requires_grad:
            thresholds.accumulate(geps, own=True)

    node = _result(out_vals, (a, b, thresholds), push, "add_soft_threshold")
    return node, finite


def backward(loss: ValueNode) -> None:
    """Reverse sweep from a scalar loss; gradients accumulate across fan-out."""
    if loss.values.ndim != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.values.shape}")
    if loss._swept:
        raise GradientStateError("backward already ran on this graph; reset gradients first")

    order: list[ValueNode] = []
    seen: set[int] = set()
    stack: list[tuple[ValueNode, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    loss.accumulate(np.asarray(1.0))
    for node in reversed(order):
        if node._push is not None and node.grad is not None:
            node._push(node.grad)
    loss._swept = True


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


class AdamState:
    """First/second moments and step count for one parameter set."""

    def __init__(self, params, beta1=0.9, beta2=0.999, learning_rate=1e-4, eps=1e-8):
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.learning_rate = float(learning_rate)
        self.eps = float(eps)
        self.t = 0
        self.m = [np.zeros_like(p.values) for p in params]
        self.v = [np.zeros_like(p.values) for p in params]


class AdamOptimizer:
    """Standard Adam with bias correction over a set of kernel banks.

    Threshold vectors are clamped to >= 0 after every step so the shrinkage
    operators stay valid.
    """

    def __init__(self, banks, learning_rate=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.banks = list(banks)
        self._params: list[ValueNode] = []
        self._clamp: list[bool] = []
        for bank in self.banks:
            self._params.append(bank.weights)
            self._clamp.append(False)
            if bank.thresholds is not None:
                self._params.append(bank.thresholds)
                self._clamp.append(True)
        self.state = AdamState(self._params, beta1, beta2, learning_rate, eps)

    def parameters(self):
        return list(self._params)

    def zero_grad(self) -> None:
        for p in self._params:
            p.grad = None

    def step(self) -> None:
        st = self.state
        st.t += 1
        bc1 = 1.0 - st.beta1**st.t
        bc2 = 1.0 - st.beta2**st.t
        for i, p in enumerate(self._params):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.values)
            elif not np.isfinite(g).all():
                raise GradientError(f"non-finite gradient in {p.name or f'param[{i}]'}")
            st.m[i] = st.beta1 * st.m[i] + (1.0 - st.beta1) * g
            st.v[i] = st.beta2 * st.v[i] + (1.0 - st.beta2) * (g * g)
            m_hat = st.m[i] / bc1
            v_hat = st.v[i] / bc2
            p.values -= st.learning_rate * m_hat / (np.sqrt(v_hat) + st.eps)
            if self._clamp[i]:
                np.maximum(p.values, 0.0, out=p.values)


# ---------------------------------------------------------------------------
# Checkpoints: versioned header + raw little-endian float64 payload.
# Reload is bit-exact and the bytes are a pure function of the arrays.
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"P2SBANKS\n"
_CKPT_VERSION = 1


def save_checkpoint(path: str | Path, banks) -> None:
    entries = []
    payload = bytearray()
    for bank in banks:
        for node in bank.parameters():
            arr = np.ascontiguousarray(node.values, dtype="<f8")
            entries.append({"name": node.name, "shape": list(arr.shape)})
            payload += arr.tobytes()
    header = json.dumps({"version": _CKPT_VERSION, "entries": entries},
                        sort_keys=True).encode("ascii")
    Path(path).write_bytes(_CKPT_MAGIC + header + b"\n" + bytes(payload))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if not raw.startswith(_CKPT_MAGIC):
        raise ValueError(f"{path}: not a parameter checkpoint")
    nl = raw.index(b"\n", len(_CKPT_MAGIC))
    header = json.loads(raw[len(_CKPT_MAGIC) : nl])
    if header.get("version") != _CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
    out: dict[str, np.ndarray] = {}
    offset = nl + 1
    for entry in header["entries"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
        out[entry["name"]] = arr.reshape(shape).astype(np.float64)
        offset += count * 8
    return out


def restore_banks(banks, loaded: dict[str, np.ndarray]) -> None:
    """Assign checkpointed arrays back onto matching bank parameters."""
    for bank in banks:
        for node in bank.parameters():
            if node.name not in loaded:
                raise KeyError(f"checkpoint missing parameter {node.name!r}")
            arr = loaded[node.name]
            if arr.shape != node.values.shape:
                raise ValueError(
                    f"checkpoint shape {arr.shape} != parameter shape {node.values.shape}"
                )
            node.values[...] = arr
