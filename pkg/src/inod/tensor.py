"""Dense tensors and the small reverse-mode tape the pipeline trains with.

Only the handful of operations the pretext task needs are differentiable:
strided 2D convolution, spatial masked merge, ReLU, sigmoid, addition,
constant scaling, full reductions, nearest-neighbor resize, and the fused
focal loss. Everything runs on numpy arrays; there is no broadcasting and
no GPU path. Ops executed while a ``Tape`` is active are recorded on it;
``backward`` replays the tape in reverse to produce leaf gradients.
"""

from __future__ import annotations

import numpy as np

from .errors import ArgumentError, DimensionError

__all__ = [
    "Tensor",
    "Tape",
    "GradientMap",
    "tensor",
    "conv2d",
    "masked_merge",
    "nn_resize",
    "nn_resize_chw",
    "relu",
    "sigmoid",
    "add",
    "mul",
    "scale",
    "sum_all",
    "mean_all",
    "focal_loss_with_logits",
    "backward",
]


class Tensor:
    """Immutable-by-convention dense array with a requires_grad flag.

    ``data`` is a float numpy array of rank <= 4; feature maps use
    channels x height x width layout. Ops never mutate inputs, so tensors
    are safe to share between threads; only the optimizer rebinds ``data``.
    """

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if arr.ndim > 4:
            raise DimensionError(f"tensor rank {arr.ndim} exceeds the supported maximum of 4")
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    """Build a Tensor, optionally coercing dtype (tests run float64, training float32)."""
    arr = np.asarray(data, dtype=dtype) if dtype is not None else np.asarray(data)
    return Tensor(arr, requires_grad=requires_grad)


# One tape at a time: the training loop opens a fresh tape per step and is
# the only writer while it is active.
_ACTIVE_TAPE: "Tape | None" = None


class Tape:
    """Ordered record of differentiable ops executed while the tape was active."""

    def __init__(self):
        # entries: (output, inputs tuple, backward fn mapping grad_out -> per-input grads)
        self._ops: list[tuple[Tensor, tuple[Tensor, ...], object]] = []

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise ArgumentError("a tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def __len__(self) -> int:
        return len(self._ops)


def _record(out: Tensor, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    if _ACTIVE_TAPE is not None and out.requires_grad:
        _ACTIVE_TAPE._ops.append((out, inputs, backward_fn))
    return out


class GradientMap:
    """Gradients keyed by tensor identity; absent requires_grad leaves read as zeros."""

    def __init__(self, grads: dict[int, np.ndarray]):
        self._grads = grads

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._grads.get(id(t))
        if g is None:
            return np.zeros_like(t.data)
        return g

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._grads

    def __len__(self) -> int:
        return len(self._grads)


def backward(loss: Tensor, tape: Tape) -> GradientMap:
    """Replay ``tape`` in reverse from a scalar ``loss``.

    Returns a GradientMap holding a gradient for every requires_grad leaf
    that contributed to the loss; leaves the loss never saw read as zeros.
    """
    if loss.data.size != 1:
        raise ArgumentError(f"loss must be scalar, got shape {loss.data.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = {id(out) for out, _, _ in tape._ops}
    for out, inputs, backward_fn in reversed(tape._ops):
        g_out = grads.pop(id(out), None)
        if g_out is None:
            continue
        for inp, g_in in zip(inputs, backward_fn(g_out)):
            if g_in is None or not inp.requires_grad:
                continue
            acc = grads.get(id(inp))
            if acc is None:
                grads[id(inp)] = g_in
            else:
                grads[id(inp)] = acc + g_in
    # keep only leaf gradients: tensors that were never produced by a taped op
    leaf_grads = {tid: g for tid, g in grads.items() if tid not in produced}
    return GradientMap(leaf_grads)


# ---------------------------------------------------------------------------
# convolution


def _conv_out_dim(size: int, kernel: int, stride: int, padding: int, axis: str) -> int:
    span = size + 2 * padding - kernel
    if span < 0:
        raise DimensionError(
            f"kernel {kernel} exceeds padded {axis} extent {size + 2 * padding}"
        )
    if span % stride != 0:
        raise DimensionError(
            f"({axis}={size} + 2*{padding} - {kernel}) is not divisible by stride {stride}"
        )
    return span // stride + 1


def _im2col(xp: np.ndarray, kernel: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    c, _, _ = xp.shape
    s0, s1, s2 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(c, kernel, kernel, out_h, out_w),
        strides=(s0, s1, s2, s1 * stride, s2 * stride),
        writeable=False,
    )
    return view.reshape(c * kernel * kernel, out_h * out_w)


def conv2d(input: Tensor, weights: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Strided 2D cross-correlation of a CHW tensor.

    Output extent per axis is (size + 2*padding - kernel)/stride + 1 and the
    division must be exact. Differentiable w.r.t. input, weights, and bias.
    """
    if input.data.ndim != 3:
        raise DimensionError(f"conv2d input must be CHW, got shape {input.data.shape}")
    if weights.data.ndim != 4 or weights.data.shape[2] != weights.data.shape[3]:
        raise DimensionError(f"conv2d weights must be OutCxInCxKxK, got shape {weights.data.shape}")
    out_c, in_c, kernel, _ = weights.data.shape
    c, h, w = input.data.shape
    if c != in_c:
        raise DimensionError(f"input has {c} channels, weights expect {in_c}")
    if bias.data.shape != (out_c,):
        raise DimensionError(f"bias shape {bias.data.shape} does not match {out_c} output channels")
    if stride < 1:
        raise ArgumentError(f"stride must be positive, got {stride}")
    if padding < 0:
        raise ArgumentError(f"padding must be non-negative, got {padding}")
    out_h = _conv_out_dim(h, kernel, stride, padding, "height")
    out_w = _conv_out_dim(w, kernel, stride, padding, "width")

    xp = np.pad(input.data, ((0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, kernel, stride, out_h, out_w)
    w2 = weights.data.reshape(out_c, -1)
    out_data = (w2 @ cols + bias.data[:, None]).reshape(out_c, out_h, out_w)

    out = Tensor(out_data, requires_grad=input.requires_grad or weights.requires_grad or bias.requires_grad)

    def _backward(g_out: np.ndarray):
        g_flat = g_out.reshape(out_c, -1)
        g_bias = g_out.sum(axis=(1, 2))
        g_weights = (g_flat @ cols.T).reshape(weights.data.shape)
        g_cols = (w2.T @ g_flat).reshape(in_c, kernel, kernel, out_h, out_w)
        gxp = np.zeros_like(xp)
        for ky in range(kernel):
            for kx in range(kernel):
                gxp[:, ky : ky + out_h * stride : stride, kx : kx + out_w * stride : stride] += g_cols[:, ky, kx]
        g_input = gxp[:, padding : padding + h, padding : padding + w]
        return g_input, g_weights, g_bias

    return _record(out, (input, weights, bias), _backward)


# ---------------------------------------------------------------------------
# spatial merge and resize


def _check_binary_grid(mask: np.ndarray, name: str = "mask") -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise DimensionError(f"{name} must be a 2D grid, got shape {mask.shape}")
    if not np.isin(mask, (0, 1)).all():
        raise ArgumentError(f"{name} must contain only 0/1 values")
    return mask


def masked_merge(a: Tensor, b: Tensor, mask: np.ndarray) -> Tensor:
    """Spatial selection: ``a`` where mask is 1, ``b`` elsewhere, all channels at once."""
    if a.data.shape != b.data.shape:
        raise DimensionError(f"operand shapes differ: {a.data.shape} vs {b.data.shape}")
    mask = _check_binary_grid(mask)
    if a.data.shape[-2:] != mask.shape:
        raise DimensionError(
            f"mask dims {mask.shape} do not match spatial dims {a.data.shape[-2:]}"
        )
    sel = mask.astype(bool)
    out_data = np.where(sel, a.data, b.data)
    out = Tensor(out_data, requires_grad=a.requires_grad or b.requires_grad)

    def _backward(g_out: np.ndarray):
        return np.where(sel, g_out, 0.0), np.where(sel, 0.0, g_out)

    return _record(out, (a, b), _backward)


def _nn_index(in_dim: int, out_dim: int) -> np.ndarray:
    # center-sampling convention: out cell y reads in cell floor((y+0.5)*in/out)
    idx = np.floor((np.arange(out_dim) + 0.5) * in_dim / out_dim).astype(np.intp)
    return np.clip(idx, 0, in_dim - 1)


def nn_resize(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor resize of a 2D grid (center sampling, dtype preserved)."""
    grid = np.asarray(grid)
    if grid.ndim != 2:
        raise DimensionError(f"nn_resize expects a 2D grid, got shape {grid.shape}")
    if out_h < 1 or out_w < 1:
        raise ArgumentError(f"output dims must be positive, got ({out_h}, {out_w})")
    rows = _nn_index(grid.shape[0], out_h)
    cols = _nn_index(grid.shape[1], out_w)
    return grid[np.ix_(rows, cols)]


def nn_resize_chw(t: Tensor, out_h: int, out_w: int) -> Tensor:
    """Differentiable nearest-neighbor resize of a CHW tensor (same index rule as nn_resize)."""
    if t.data.ndim != 3:
        raise DimensionError(f"nn_resize_chw expects CHW, got shape {t.data.shape}")
    if out_h < 1 or out_w < 1:
        raise ArgumentError(f"output dims must be positive, got ({out_h}, {out_w})")
    c, h, w = t.data.shape
    rows = _nn_index(h, out_h)
    cols = _nn_index(w, out_w)
    out = Tensor(t.data[:, rows[:, None], cols[None, :]], requires_grad=t.requires_grad)

    def _backward(g_out: np.ndarray):
        g_in = np.zeros_like(t.data)
        np.add.at(
            g_in,
            (np.arange(c)[:, None, None], rows[None, :, None], cols[None, None, :]),
            g_out,
        )
        return (g_in,)

    return _record(out, (t,), _backward)


# ---------------------------------------------------------------------------
# pointwise ops and reductions


def relu(t: Tensor) -> Tensor:
    out = Tensor(np.maximum(t.data, 0.0), requires_grad=t.requires_grad)
    positive = t.data > 0

    def _backward(g_out):
        return (g_out * positive,)

    return _record(out, (t,), _backward)


def _sigmoid_stable(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(t: Tensor) -> Tensor:
    s = _sigmoid_stable(t.data)
    out = Tensor(s, requires_grad=t.requires_grad)

    def _backward(g_out):
        return (g_out * s * (1.0 - s),)

    return _record(out, (t,), _backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"add shapes differ: {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data + b.data, requires_grad=a.requires_grad or b.requires_grad)

    def _backward(g_out):
        return g_out, g_out

    return _record(out, (a, b), _backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"mul shapes differ: {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data * b.data, requires_grad=a.requires_grad or b.requires_grad)

    def _backward(g_out):
        return g_out * b.data, g_out * a.data

    return _record(out, (a, b), _backward)


def scale(t: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    out = Tensor(t.data * factor, requires_grad=t.requires_grad)

    def _backward(g_out):
        return (g_out * factor,)

    return _record(out, (t,), _backward)


def sum_all(t: Tensor) -> Tensor:
    out = Tensor(np.asarray(t.data.sum(), dtype=t.data.dtype), requires_grad=t.requires_grad)

    def _backward(g_out):
        return (np.full_like(t.data, float(g_out)),)

    return _record(out, (t,), _backward)


def mean_all(t: Tensor) -> Tensor:
    n = t.data.size
    out = Tensor(np.asarray(t.data.mean(), dtype=t.data.dtype), requires_grad=t.requires_grad)

    def _backward(g_out):
        return (np.full_like(t.data, float(g_out) / n),)

    return _record(out, (t,), _backward)


# ---------------------------------------------------------------------------
# focal loss, fused forward+backward for numerical stability


def focal_loss_with_logits(logits: Tensor, target: np.ndarray, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Mean binary focal loss over all cells, computed from raw logits.

    Per cell: alpha_t * (1 - p_t)^gamma * ce, with p_t the probability of
    the true class and ce the log-sum-exp-stable binary cross-entropy.
    ``target`` is a 0/1 grid matching the logits' spatial layout (a leading
    singleton channel on the logits is accepted).
    """
    target = np.asarray(target)
    x = logits.data
    if x.shape != target.shape:
        squeezed = x.reshape(x.shape[1:]) if x.ndim == target.ndim + 1 and x.shape[0] == 1 else None
        if squeezed is None or squeezed.shape != target.shape:
            raise DimensionError(
                f"logits shape {x.shape} does not match target shape {target.shape}"
            )
    if not np.isin(target, (0, 1)).all():
        raise ArgumentError("focal loss target must be binary")
    if gamma < 0:
        raise ArgumentError(f"gamma must be non-negative, got {gamma}")

    t = target.reshape(x.shape).astype(x.dtype)
    p = _sigmoid_stable(x)
    ce = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))
    one_minus_pt = 1.0 - (t * p + (1.0 - t) * (1.0 - p))
    a_t = alpha * t + (1.0 - alpha) * (1.0 - t)
    weight = np.ones_like(x) if gamma == 0 else one_minus_pt**gamma
    n = x.size
    loss_val = np.asarray((a_t * weight * ce).sum() / n, dtype=x.dtype)
    out = Tensor(loss_val, requires_grad=logits.requires_grad)

    def _backward(g_out):
        dce = p - t
        if gamma == 0:
            cell = a_t * dce
        else:
            sign = 2.0 * t - 1.0
            with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
                dweight = -gamma * one_minus_pt ** (gamma - 1.0) * sign * p * (1.0 - p)
                cell = a_t * (dweight * ce + weight * dce)
            # saturated cells (p_t == 1 exactly) have a zero-gradient limit
            cell = np.where(one_minus_pt > 0.0, cell, 0.0)
        return (cell * (float(g_out) / n),)

    return _record(out, (logits,), _backward)
