"""Dense float64 tensors with tape-based reverse-mode differentiation.

Design constraints: 64-bit floats everywhere, a deliberately small op set
(no broadcasting beyond bias-add), gradients available with respect to both
weights and inputs, and a hard finiteness check after every public op so
numerical blowups surface at their source instead of three modules later.

Typical use::

    with Tape() as tape:
        z = matmul(x, w)
        loss = softmax_cross_entropy(add(z, b), y)
    grads = backward(tape, loss)   # {w: Tensor, b: Tensor, ...}
"""
from __future__ import annotations

import numpy as np


class TensorError(ValueError):
    """Shape or domain violation in a tensor operation."""


class NonFiniteError(TensorError):
    """An operation produced NaN or Inf."""


class TapeError(RuntimeError):
    """Tape misuse: double backward, missing root, non-scalar root."""


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced non-finite values")
    return arr


class Tensor:
    """Dense n-dimensional array of float64, row-major.

    ``requires_grad`` marks a leaf whose gradient should be collected by
    :func:`backward`. Intermediate results never set it themselves.
    """

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        _check_finite(arr, "Tensor")
        self.data = arr
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise TensorError(f"item() on tensor of size {self.data.size}")
        return float(self.data.reshape(-1)[0])

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


# ---------------------------------------------------------------------------
# Tape


class _Record:
    __slots__ = ("inputs", "output", "pull")

    def __init__(self, inputs, output, pull):
        self.inputs = inputs      # tuple[Tensor]
        self.output = output      # Tensor
        self.pull = pull          # grad_out -> tuple of grads aligned with inputs (None allowed)


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Execution-ordered record of differentiable primitive ops.

    Records are appended in forward order, which makes the list a valid
    topological order for the reverse sweep. One backward pass per tape;
    a second raises :class:`TapeError`.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self.consumed = False
        self._tracked: set[int] = set()

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def _tracks(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._tracked

    def _record(self, inputs, output, pull):
        self.records.append(_Record(tuple(inputs), output, pull))
        self._tracked.add(id(output))


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _emit(inputs, out_data: np.ndarray, pull, op: str) -> Tensor:
    _check_finite(out_data, op)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = False
    tape = _active_tape()
    if tape is not None and any(tape._tracks(t) for t in inputs):
        tape._record(inputs, out, pull)
    return out


def backward(tape: Tape, root: Tensor) -> dict[Tensor, Tensor]:
    """Reverse sweep from scalar ``root``; returns leaf gradient map.

    The map holds one entry per distinct leaf tensor with
    ``requires_grad=True`` that the root actually depends on.
    """
    if tape.consumed:
        raise TapeError("tape already consumed by a previous backward pass")
    if root.size != 1:
        raise TapeError(f"backward root must be scalar, got shape {root.shape}")
    produced = any(rec.output is root for rec in tape.records)
    if not produced:
        raise TapeError("backward root was not produced on this tape")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    leaf_grads: dict[Tensor, np.ndarray] = {}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        pulled = rec.pull(g)
        for t, gt in zip(rec.inputs, pulled):
            if gt is None or not tape._tracks(t):
                continue
            if t.requires_grad:
                if t in leaf_grads:
                    leaf_grads[t] = leaf_grads[t] + gt
                else:
                    leaf_grads[t] = gt
            else:
                prev = grads.get(id(t))
                grads[id(t)] = gt if prev is None else prev + gt
    return {t: Tensor(g) for t, g in leaf_grads.items()}


# ---------------------------------------------------------------------------
# Primitive ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise TensorError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise TensorError(f"matmul inner extents disagree: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def pull(g):
        return g @ b.data.T, a.data.T @ g

    return _emit((a, b), out, pull, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; the only broadcast allowed is a bias vector.

    Supported: identical shapes; (n, m) + (m,) row bias; (n, c, h, w) + (c,)
    per-channel bias.
    """
    if a.shape == b.shape:
        def pull(g):
            return g, g
    elif a.data.ndim == 2 and b.shape == (a.shape[1],):
        def pull(g):
            return g, g.sum(axis=0)
    elif a.data.ndim == 4 and b.shape == (a.shape[1],):
        def pull(g):
            return g, g.sum(axis=(0, 2, 3))

        return _emit((a, b), a.data + b.data.reshape(1, -1, 1, 1), pull, "add")
    else:
        raise TensorError(f"add shapes incompatible: {a.shape} + {b.shape}")
    return _emit((a, b), a.data + b.data, pull, "add")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def pull(g):
        return (c * g,)

    return _emit((x,), c * x.data, pull, "scale")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0  # subgradient at exactly 0 is 0

    def pull(g):
        return (g * mask,)

    return _emit((x,), np.where(mask, x.data, 0.0), pull, "relu")


def sum_all(x: Tensor) -> Tensor:
    def pull(g):
        return (np.full_like(x.data, g.reshape(-1)[0]),)

    return _emit((x,), np.asarray(x.data.sum()), pull, "sum_all")


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise TensorError(f"reshape {x.shape} -> {shape} changes element count")

    def pull(g):
        return (g.reshape(x.shape),)

    return _emit((x,), x.data.reshape(shape), pull, "reshape")


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with zero padding.

    ``x`` is (n, c_in, h, w) or unbatched (c_in, h, w); ``kernels`` is
    (c_out, c_in, kh, kw). Gradients flow to both input and kernels.
    """
    squeeze = x.data.ndim == 3
    xr = reshape(x, (1, *x.shape)) if squeeze else x
    if xr.data.ndim != 4 or kernels.data.ndim != 4:
        raise TensorError(f"conv2d expects 4-D input/kernels, got {x.shape}, {kernels.shape}")
    n, cin, h, w = xr.shape
    cout, kcin, kh, kw = kernels.shape
    if kcin != cin:
        raise TensorError(f"conv2d channel mismatch: input {cin}, kernels {kcin}")
    stride = int(stride)
    padding = int(padding)
    if stride < 1 or padding < 0:
        raise TensorError("conv2d needs stride >= 1 and padding >= 0")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if h + 2 * padding < kh or w + 2 * padding < kw or oh < 1 or ow < 1:
        raise TensorError(f"conv2d degenerate output shape for input {x.shape}")

    xp = np.pad(xr.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (n, cin, oh, ow, kh, kw)
    out = np.einsum("ncyxuv,ocuv->noyx", win, kernels.data)

    def pull(g):
        dk = np.einsum("noyx,ncyxuv->ocuv", g, win)
        dxp = np.zeros_like(xp)
        for ky in range(kh):
            for kx in range(kw):
                contrib = np.einsum("noyx,oc->ncyx", g, kernels.data[:, :, ky, kx])
                dxp[:, :, ky:ky + stride * oh:stride, kx:kx + stride * ow:stride] += contrib
        if padding:
            dx = dxp[:, :, padding:padding + h, padding:padding + w]
        else:
            dx = dxp
        return dx, dk

    res = _emit((xr, kernels), out, pull, "conv2d")
    return reshape(res, res.shape[1:]) if squeeze else res


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; trailing rows/cols that do not fill a
    window are dropped. Gradient routes to the first maximum in each window.
    """
    if x.data.ndim != 4:
        raise TensorError(f"max_pool2d expects (n, c, h, w), got {x.shape}")
    size = int(size)
    n, c, h, w = x.shape
    oh, ow = h // size, w // size
    if oh < 1 or ow < 1:
        raise TensorError(f"max_pool2d window {size} too large for input {x.shape}")
    crop = x.data[:, :, :oh * size, :ow * size]
    win = crop.reshape(n, c, oh, size, ow, size).transpose(0, 1, 2, 4, 3, 5)
    flat = win.reshape(n, c, oh, ow, size * size)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def pull(g):
        dflat = np.zeros_like(flat)
        np.put_along_axis(dflat, idx[..., None], g[..., None], axis=-1)
        dwin = dflat.reshape(n, c, oh, ow, size, size).transpose(0, 1, 2, 4, 3, 5)
        dx = np.zeros_like(x.data)
        dx[:, :, :oh * size, :ow * size] = dwin.reshape(n, c, oh * size, ow * size)
        return (dx,)

    return _emit((x,), out, pull, "max_pool2d")


def _validate_one_hot(labels: np.ndarray, n_rows: int) -> None:
    ok = (
        labels.ndim == 2
        and labels.shape[0] == n_rows
        and np.all((labels == 0.0) | (labels == 1.0))
        and np.all(labels.sum(axis=1) == 1.0)
    )
    if not ok:
        raise TensorError("labels must be one-hot rows matching the logits")


def softmax_cross_entropy(logits: Tensor, labels: Tensor) -> Tensor:
    """Mean cross-entropy with max-shift stabilization; gradient (p - y)/n."""
    if logits.data.ndim != 2:
        raise TensorError(f"logits must be (n, m), got {logits.shape}")
    y = labels.data
    _validate_one_hot(y, logits.shape[0])
    n = logits.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    exps = np.exp(shifted)
    denom = exps.sum(axis=1, keepdims=True)
    log_softmax = shifted - np.log(denom)
    loss = -(y * log_softmax).sum() / n
    probs = exps / denom

    def pull(g):
        scalar = g.reshape(-1)[0]
        return scalar * (probs - y) / n, None

    return _emit((logits, labels), np.asarray(loss), pull, "softmax_cross_entropy")
