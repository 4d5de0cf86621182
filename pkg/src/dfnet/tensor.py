"""Rank-4 tensors with reverse-mode autodiff on an explicit tape.

Every tensor is a [batch, channels, height, width] numpy array in float32 or
float64. Operators execute eagerly; while a Tape is active, each op appends
its output together with vector-Jacobian callbacks for the inputs that track
gradients. backward() walks the records once in reverse and accumulates into
``Tensor.grad``.

The operator set is deliberately closed: convolution, ReLU, sigmoid, add,
channel concat/scale, global average pooling, dense layers on pooled
features, bilinear upsampling and 2x2 max pooling. That is everything the
saliency network needs. There is no graph compiler, no views, no broadcasting
beyond what these ops define.

Convolution is computed as one GEMM per call: an as_strided window view over
the padded input contracted against the kernel with tensordot. The backward
pass rebuilds the same view from the saved padded input, so no column buffer
is kept alive between forward and backward.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from .errors import NumericError, UsageError

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

# Nudge sigmoid outputs into the open interval when the exponential
# saturates; at these magnitudes the true gradient is zero anyway.
_SIGMOID_FLOOR = {np.dtype(np.float32): 1e-7, np.dtype(np.float64): 1e-15}


class Tensor:
    """A rank-4 float array plus an optional gradient buffer.

    ``requires_grad`` marks parameters and anything computed from them.
    ``grad`` is populated by backward() and holds dLoss/dTensor with the
    same shape and dtype as ``data``.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        if arr.ndim != 4:
            raise UsageError(f"tensors are rank-4 [B,C,H,W], got shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got {self.shape}")
        return float(self.data.reshape(()))

    def __array__(self, dtype=None, copy=None):
        arr = self.data
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        if copy:
            arr = arr.copy()
        return arr

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


class Tape:
    """Ordered record of one forward pass, used once by backward().

    Use as a context manager; ops executed inside the block are recorded.
    Tapes nest (the innermost active one records), though the network never
    needs more than one.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple]] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise UsageError("tape context exited out of order")
        stack.pop()
        return False


_TLS = threading.local()


def _tape_stack() -> list:
    stack = getattr(_TLS, "stack", None)
    if stack is None:
        stack = []
        _TLS.stack = stack
    return stack


def _active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _finish(op: str, out_data: np.ndarray, pairs: Sequence[tuple[Tensor, Callable]]) -> Tensor:
    """Finite-check an op result, wrap it, and record it on the active tape."""
    if not np.all(np.isfinite(out_data)):
        raise NumericError(f"{op} produced non-finite values")
    live = tuple((t, fn) for t, fn in pairs if t.requires_grad)
    out = Tensor(out_data, requires_grad=bool(live))
    tape = _active_tape()
    if tape is not None and live:
        tape.records.append((out, live))
    return out


def record_custom(op: str, out_data: np.ndarray,
                  pairs: Sequence[tuple[Tensor, Callable]]) -> Tensor:
    """Register a hand-fused op (used by the loss layers) on the tape."""
    return _finish(op, out_data, pairs)


def _check_dtypes(op: str, *tensors: Tensor) -> None:
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise UsageError(f"{op}: mixed dtypes {sorted(str(d) for d in dtypes)}")


# ---------------------------------------------------------------------------
# operators


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, *,
           stride: int = 1, dilation: int = 1,
           padding: "str | int" = "same") -> Tensor:
    """2-D convolution (cross-correlation) over [B,C,H,W].

    weight is [out_channels, in_channels, kh, kw]; bias, if given, is
    [1, out_channels, 1, 1]. "same" padding keeps ceil(size/stride) output
    extent, splitting any odd padding with the extra row/column on the
    bottom/right. Dilation spaces kernel taps without changing the tap count.
    """
    if stride < 1 or dilation < 1:
        raise UsageError(f"conv2d: stride/dilation must be >=1, got {stride}/{dilation}")
    b, c, h, w = x.shape
    out_c, in_c, kh, kw = weight.shape
    if in_c != c:
        raise UsageError(f"conv2d: input has {c} channels, kernel expects {in_c}")
    if bias is not None and bias.shape != (1, out_c, 1, 1):
        raise UsageError(f"conv2d: bias shape {bias.shape} != (1, {out_c}, 1, 1)")
    _check_dtypes("conv2d", *([x, weight] + ([bias] if bias is not None else [])))

    eff_h = (kh - 1) * dilation + 1
    eff_w = (kw - 1) * dilation + 1
    if padding == "same":
        out_h = -(-h // stride)
        out_w = -(-w // stride)
        pad_h = max((out_h - 1) * stride + eff_h - h, 0)
        pad_w = max((out_w - 1) * stride + eff_w - w, 0)
        top, left = pad_h // 2, pad_w // 2
        bottom, right = pad_h - top, pad_w - left
    elif isinstance(padding, int) and not isinstance(padding, bool):
        if padding < 0:
            raise UsageError("conv2d: negative padding")
        top = bottom = left = right = padding
        out_h = (h + 2 * padding - eff_h) // stride + 1
        out_w = (w + 2 * padding - eff_w) // stride + 1
        if out_h <= 0 or out_w <= 0:
            raise UsageError(f"conv2d: kernel {kh}x{kw} (dilation {dilation}) "
                             f"does not fit input {h}x{w} with padding {padding}")
    else:
        raise UsageError(f"conv2d: padding must be 'same' or an int, got {padding!r}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (top, bottom), (left, right)))
    sb, sc, sh, sw = xp.strides
    view_shape = (b, c, out_h, out_w, kh, kw)
    view_strides = (sb, sc, sh * stride, sw * stride, sh * dilation, sw * dilation)

    def window_view():
        return np.lib.stride_tricks.as_strided(xp, view_shape, view_strides,
                                               writeable=False)

    out = np.tensordot(weight.data, window_view(), axes=([1, 2, 3], [1, 4, 5]))
    out = np.ascontiguousarray(np.moveaxis(out, 0, 1))
    if bias is not None:
        out += bias.data

    def vjp_x(g):
        dcols = np.tensordot(g, weight.data, axes=([1], [0]))  # (B,oh,ow,C,kh,kw)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            hi = i * dilation
            for j in range(kw):
                wj = j * dilation
                dxp[:, :, hi:hi + out_h * stride:stride,
                    wj:wj + out_w * stride:stride] += np.moveaxis(dcols[:, :, :, :, i, j], 3, 1)
        return dxp[:, :, top:top + h, left:left + w]

    def vjp_w(g):
        return np.tensordot(g, window_view(), axes=([0, 2, 3], [0, 2, 3]))

    pairs = [(x, vjp_x), (weight, vjp_w)]
    if bias is not None:
        pairs.append((bias, lambda g: g.sum(axis=(0, 2, 3)).reshape(1, out_c, 1, 1)))
    return _finish("conv2d", out, pairs)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def vjp(g):
        return g * (x.data > 0)

    return _finish("relu", out, [(x, vjp)])


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, output kept strictly inside (0, 1)."""
    s = expit(x.data)
    floor = _SIGMOID_FLOOR[s.dtype]
    s = np.clip(s, floor, 1.0 - floor)

    def vjp(g):
        return g * (s * (1.0 - s))

    return _finish("sigmoid", s, [(x, vjp)])


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise UsageError(f"add: shape mismatch {a.shape} vs {b.shape}")
    _check_dtypes("add", a, b)
    return _finish("add", a.data + b.data, [(a, lambda g: g), (b, lambda g: g)])


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    ts = list(tensors)
    if not ts:
        raise UsageError("concat_channels: empty input list")
    b, _, h, w = ts[0].shape
    for t in ts[1:]:
        if t.shape[0] != b or t.shape[2:] != (h, w):
            raise UsageError(f"concat_channels: incompatible shapes "
                             f"{[t.shape for t in ts]}")
    _check_dtypes("concat_channels", *ts)
    out = np.concatenate([t.data for t in ts], axis=1)

    pairs = []
    lo = 0
    for t in ts:
        hi = lo + t.shape[1]

        def vjp(g, lo=lo, hi=hi):
            return g[:, lo:hi]

        pairs.append((t, vjp))
        lo = hi
    return _finish("concat_channels", out, pairs)


def scale_channels(x: Tensor, weights: Tensor) -> Tensor:
    """Multiply each channel of each sample by a scalar weight [B,C,1,1]."""
    b, c, _, _ = x.shape
    if weights.shape != (b, c, 1, 1):
        raise UsageError(f"scale_channels: weights {weights.shape} != ({b}, {c}, 1, 1)")
    _check_dtypes("scale_channels", x, weights)
    out = x.data * weights.data

    def vjp_x(g):
        return g * weights.data

    def vjp_w(g):
        return (g * x.data).sum(axis=(2, 3), keepdims=True)

    return _finish("scale_channels", out, [(x, vjp_x), (weights, vjp_w)])


def global_avg_pool(x: Tensor) -> Tensor:
    _, _, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def vjp(g):
        return np.broadcast_to(g / (h * w), x.shape)

    return _finish("global_avg_pool", out, [(x, vjp)])


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Fully connected layer on pooled features [B,C,1,1] -> [B,O,1,1].

    weight is [O, C, 1, 1] (rank-4 like everything else), bias [1, O, 1, 1].
    """
    b, c, h, w = x.shape
    if (h, w) != (1, 1):
        raise UsageError(f"dense: expects pooled [B,C,1,1] input, got {x.shape}")
    out_c, in_c, kh, kw = weight.shape
    if (kh, kw) != (1, 1) or in_c != c:
        raise UsageError(f"dense: weight {weight.shape} incompatible with input {x.shape}")
    if bias is not None and bias.shape != (1, out_c, 1, 1):
        raise UsageError(f"dense: bias shape {bias.shape} != (1, {out_c}, 1, 1)")
    _check_dtypes("dense", *([x, weight] + ([bias] if bias is not None else [])))

    x2 = x.data[:, :, 0, 0]
    w2 = weight.data[:, :, 0, 0]
    out2 = x2 @ w2.T
    if bias is not None:
        out2 = out2 + bias.data[0, :, 0, 0]

    def vjp_x(g):
        return (g[:, :, 0, 0] @ w2)[:, :, None, None]

    def vjp_w(g):
        return (g[:, :, 0, 0].T @ x2)[:, :, None, None]

    pairs = [(x, vjp_x), (weight, vjp_w)]
    if bias is not None:
        pairs.append((bias, lambda g: g.sum(axis=0, keepdims=True)))
    return _finish("dense", out2[:, :, None, None], pairs)


def _interp_matrix(n_in: int, n_out: int, dtype: np.dtype) -> np.ndarray:
    """Row-stochastic 1-D bilinear interpolation matrix (half-pixel centers,

    edges clamped). Built in float64 and cast, so float32 runs see the same
    weights rounded once.
    """
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, float(n_in - 1))
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = src - i0
    mat = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    mat[rows, i0] += 1.0 - w1
    mat[rows, i1] += w1
    return mat.astype(dtype, copy=False)


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    """Bilinear upsampling by an integer factor (half-pixel convention)."""
    if not isinstance(factor, int) or factor < 1:
        raise UsageError(f"upsample_bilinear: factor must be a positive int, got {factor}")
    _, _, h, w = x.shape
    ay = _interp_matrix(h, h * factor, x.dtype)
    ax = _interp_matrix(w, w * factor, x.dtype)

    t = np.tensordot(x.data, ax, axes=([3], [1]))       # (B,C,H,oW)
    out = np.tensordot(t, ay, axes=([2], [1]))          # (B,C,oW,oH)
    out = np.ascontiguousarray(out.transpose(0, 1, 3, 2))

    def vjp(g):
        t1 = np.tensordot(g, ay, axes=([2], [0]))       # (B,C,oW,H)
        t1 = t1.transpose(0, 1, 3, 2)                   # (B,C,H,oW)
        return np.tensordot(t1, ax, axes=([3], [0]))    # (B,C,H,W)

    return _finish("upsample_bilinear", out, [(x, vjp)])


def max_pool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties go to the first element in

    row-major window order, and the gradient routes to that element only.
    """
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise UsageError(f"max_pool2: extents must be even, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    win = x.data.reshape(b, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(b, c, h2, w2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        d4 = np.zeros((b, c, h2, w2, 4), dtype=g.dtype)
        np.put_along_axis(d4, idx[..., None], g[..., None], axis=-1)
        return d4.reshape(b, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)

    return _finish("max_pool2", out, [(x, vjp)])


# ---------------------------------------------------------------------------
# backward and verification


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate dLoss/dTensor into .grad for everything on the tape.

    Gradients are freshly zero-initialized on every call, so repeated
    backward passes do not leak accumulation across steps.
    """
    if loss.shape != (1, 1, 1, 1):
        raise UsageError(f"backward: loss must be [1,1,1,1], got {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("backward: loss does not depend on any tracked tensor")

    zeroed: set[int] = set()

    def ensure(t: Tensor) -> None:
        if id(t) not in zeroed:
            t.grad = np.zeros_like(t.data)
            zeroed.add(id(t))

    for out, pairs in tape.records:
        ensure(out)
        for t, _ in pairs:
            ensure(t)
    ensure(loss)
    loss.grad[...] = 1.0

    for out, pairs in reversed(tape.records):
        g = out.grad
        for t, vjp in pairs:
            t.grad += vjp(g)


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], *,
               eps: float = 1e-5, max_elements_per_tensor: int | None = None,
               seed: int = 0) -> float:
    """Compare analytic gradients against central finite differences.

    ``f`` must rebuild its forward pass from scratch on every call and
    return a scalar-shaped tensor. Returns the worst relative error
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8) over the checked
    elements. Parameters must be float64: differencing float32 at eps=1e-5
    would measure rounding noise, not gradients.

    ``max_elements_per_tensor`` caps how many elements of each parameter are
    perturbed (seeded sample without replacement); by default all are.
    """
    params = list(params)
    for p in params:
        if p.dtype != np.float64:
            raise UsageError("grad_check: parameters must be float64")
        if not p.requires_grad:
            raise UsageError("grad_check: all checked parameters must require grad")

    with Tape() as tape:
        out = f()
        if out.shape != (1, 1, 1, 1):
            raise UsageError(f"grad_check: f must return [1,1,1,1], got {out.shape}")
        backward(tape, out)
    analytic = [p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, an in zip(params, analytic):
        flat = p.data.reshape(-1)
        an_flat = an.reshape(-1)
        n = flat.size
        if max_elements_per_tensor is not None and n > max_elements_per_tensor:
            idxs = rng.choice(n, size=max_elements_per_tensor, replace=False)
        else:
            idxs = range(n)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            hi = f().item()
            flat[i] = orig - eps
            lo = f().item()
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * eps)
            err = abs(an_flat[i] - numeric) / max(abs(an_flat[i]), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst


def inflate_kernel(weight: np.ndarray, dilation: int) -> np.ndarray:
    """Spell a dilated kernel out as the equivalent dense kernel.

    Taps keep their values; the gaps become explicit zeros. conv2d with
    dilation r equals conv2d of the inflated kernel with dilation 1.
    """
    if dilation < 1:
        raise UsageError("inflate_kernel: dilation must be >=1")
    o, c, kh, kw = weight.shape
    out = np.zeros((o, c, (kh - 1) * dilation + 1, (kw - 1) * dilation + 1),
                   dtype=weight.dtype)
    out[:, :, ::dilation, ::dilation] = weight
    return out
