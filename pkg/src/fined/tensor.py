"""Dense 4-D tensors and the differentiable kernel set.

Every value in the library is a ``Tensor``: a dense (batch, channel, height,
width) array of float32 (training/inference default) or float64 (gradient
checking).  Kernels are pure functions; passing a ``Tape`` records the
operation so ``backward`` can later walk the recording in reverse and return
d(loss)/d(tensor) for every tensor reachable from a scalar loss.

Conventions fixed here:
  * conv2d is cross-correlation (no kernel flip), "same" padding for an odd
    kernel is dilation*(k-1)//2 per side.
  * avg_pool zero-pads and divides by the full window area at borders
    (count-includes-padding).
  * max_pool_2x2 drops a trailing odd row/column; ties route the gradient to
    the first (row-major) maximum.
  * bilinear_resize uses half-pixel source centers (align-corners off) with
    border clamping, evaluated in lerp form so constant inputs are exact.
  * relu's gradient at exactly 0 is 0.

Tensors are treated as immutable once built; the only sanctioned mutation is
the optimizer updating parameter data between tapes.  A live tape belongs to
one training step and must not be shared across threads.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_ids = itertools.count(1)

FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """A dense (n, c, h, w) array with a unique id for tape bookkeeping."""

    __slots__ = ("data", "id")

    def __init__(self, data, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.ndim != 4:
            raise ValueError(f"tensor must be 4-D (n, c, h, w), got shape {arr.shape}")
        if arr.dtype not in FLOAT_DTYPES:
            # Default precision is 32-bit; float64 survives only when the
            # caller passed a float64 array or asked for it explicitly.
            arr = arr.astype(np.float32)
        elif dtype is None and not (isinstance(data, np.ndarray) and data.dtype in FLOAT_DTYPES):
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.id = next(_ids)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, id={self.id})"


def scalar(value: float, dtype=np.float32) -> Tensor:
    return Tensor(np.full((1, 1, 1, 1), value, dtype=dtype))


@dataclass(frozen=True)
class ConvSpec:
    """Static description of a 2-D convolution.

    ``kernel`` is (out_c, in_c, kh, kw).  ``padding`` is "same" or an explicit
    per-side pixel count; "same" with stride 1 preserves spatial dims for any
    dilation and requires an odd kernel.
    """

    kernel: tuple[int, int, int, int]
    stride: int = 1
    dilation: int = 1
    padding: "str | int" = "same"
    has_bias: bool = True

    def __post_init__(self):
        oc, ic, kh, kw = self.kernel
        if min(oc, ic, kh, kw) < 1:
            raise ValueError(f"bad kernel shape {self.kernel}")
        if self.stride < 1 or self.dilation < 1:
            raise ValueError("stride and dilation must be positive")
        if self.padding == "same":
            if kh % 2 == 0 or kw % 2 == 0:
                raise ValueError('"same" padding requires odd kernel dims')
        elif not (isinstance(self.padding, int) and self.padding >= 0):
            raise ValueError(f'padding must be "same" or a non-negative int, got {self.padding!r}')

    def pad_pixels(self) -> tuple[int, int]:
        if self.padding == "same":
            _, _, kh, kw = self.kernel
            return self.dilation * (kh - 1) // 2, self.dilation * (kw - 1) // 2
        return int(self.padding), int(self.padding)


@dataclass
class TapeNode:
    op: str
    input_ids: tuple[int, ...]
    output_id: int
    # Recomputes the output array from the recorded input tensors.
    forward: Callable[[], np.ndarray]
    # Maps d(loss)/d(output) to per-input gradients (None for non-diff inputs).
    backward: Callable[[np.ndarray], tuple]


@dataclass
class Tape:
    """Append-only recording of one forward pass, in topological order."""

    nodes: list[TapeNode] = field(default_factory=list)
    tensors: dict[int, Tensor] = field(default_factory=dict)

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor,
               forward: Callable[[], np.ndarray],
               backward: Callable[[np.ndarray], tuple]) -> None:
        for t in inputs:
            self.tensors.setdefault(t.id, t)
        self.tensors[output.id] = output
        self.nodes.append(TapeNode(op, tuple(t.id for t in inputs), output.id,
                                   forward, backward))


def replay(tape: Tape) -> dict[int, np.ndarray]:
    """Recompute every node output; returns {tensor id: recomputed array}."""
    return {node.output_id: node.forward() for node in tape.nodes}


def backward(tape: Tape, loss_id: int) -> dict[int, np.ndarray]:
    """Reverse-mode sweep; returns d(loss)/d(tensor) keyed by tensor id.

    Tensors not reachable from the loss simply do not appear in the map; the
    caller treats a missing key as a zero gradient.
    """
    loss = tape.tensors.get(loss_id)
    if loss is None:
        raise ValueError(f"loss id {loss_id} was never recorded on this tape")
    if loss.shape != (1, 1, 1, 1):
        raise ValueError(f"loss must be scalar (1,1,1,1), got shape {loss.shape}")

    produced_at: dict[int, int] = {}
    for i, node in enumerate(tape.nodes):
        if node.output_id in produced_at:
            raise ValueError(f"tensor {node.output_id} produced twice; corrupt tape")
        produced_at[node.output_id] = i
    for i, node in enumerate(tape.nodes):
        for iid in node.input_ids:
            if produced_at.get(iid, -1) > i:
                raise ValueError("cyclic or out-of-order tape")

    grads: dict[int, np.ndarray] = {loss_id: np.ones((1, 1, 1, 1), dtype=loss.dtype)}
    for node in reversed(tape.nodes):
        g = grads.get(node.output_id)
        if g is None:
            continue
        for iid, gi in zip(node.input_ids, node.backward(g)):
            if gi is None:
                continue
            acc = grads.get(iid)
            if acc is None:
                grads[iid] = gi
            else:
                acc += gi
    return grads


# ---------------------------------------------------------------------------
# convolution


def _conv_out_size(size: int, k: int, stride: int, dilation: int, pad: int) -> int:
    eff = dilation * (k - 1) + 1
    return (size + 2 * pad - eff) // stride + 1


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, dilation: int) -> np.ndarray:
    """Strided view (n, c, oh, ow, kh, kw) of the padded input."""
    eh = dilation * (kh - 1) + 1
    ew = dilation * (kw - 1) + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (eh, ew), axis=(2, 3))
    return win[:, :, ::stride, ::stride, ::dilation, ::dilation]


def _conv2d_forward(x: np.ndarray, w: np.ndarray, b, stride: int,
                    dilation: int, ph: int, pw: int) -> np.ndarray:
    n, c, _, _ = x.shape
    oc, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = _windows(xp, kh, kw, stride, dilation)
    oh, ow = win.shape[2], win.shape[3]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, oh * ow, c * kh * kw)
    out = cols @ w.reshape(oc, -1).T
    if b is not None:
        out = out + b.reshape(1, 1, oc)
    return np.ascontiguousarray(out.transpose(0, 2, 1).reshape(n, oc, oh, ow))


def _conv2d_backward(g: np.ndarray, x: np.ndarray, w: np.ndarray, has_bias: bool,
                     stride: int, dilation: int, ph: int, pw: int):
    n, c, h, wd = x.shape
    oc, _, kh, kw = w.shape
    oh, ow = g.shape[2], g.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = _windows(xp, kh, kw, stride, dilation)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, oh * ow, c * kh * kw)
    gc = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n, oh * ow, oc)

    dw = np.tensordot(gc, cols, axes=([0, 1], [0, 1])).reshape(oc, c, kh, kw)
    dcols = (gc @ w.reshape(oc, -1)).reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    dxp = np.zeros_like(xp)
    for i in range(kh):
        rs = slice(i * dilation, i * dilation + (oh - 1) * stride + 1, stride)
        for j in range(kw):
            cs = slice(j * dilation, j * dilation + (ow - 1) * stride + 1, stride)
            dxp[:, :, rs, cs] += dcols[:, :, :, :, i, j]
    dx = dxp[:, :, ph:ph + h, pw:pw + wd] if (ph or pw) else dxp
    db = g.sum(axis=(0, 2, 3)).reshape(1, oc, 1, 1) if has_bias else None
    return np.ascontiguousarray(dx), dw, db


def conv2d(x: Tensor, spec: ConvSpec, weights: Tensor, bias: Tensor | None = None,
           tape: Tape | None = None) -> Tensor:
    """Cross-correlate ``x`` with ``weights`` per ``spec``.

    ``weights`` is (out_c, in_c, kh, kw); ``bias`` (if any) is (1, out_c, 1, 1).
    """
    if weights.shape != spec.kernel:
        raise ValueError(f"weight shape {weights.shape} does not match spec kernel {spec.kernel}")
    oc, ic, kh, kw = spec.kernel
    if x.shape[1] != ic:
        raise ValueError(f"input has {x.shape[1]} channels, kernel expects in_c={ic}")
    if spec.has_bias:
        if bias is None:
            raise ValueError("spec.has_bias is set but no bias tensor given")
        if bias.shape != (1, oc, 1, 1):
            raise ValueError(f"bias shape {bias.shape} must be (1, {oc}, 1, 1)")
    elif bias is not None:
        raise ValueError("bias given but spec.has_bias is false")
    ph, pw = spec.pad_pixels()
    eff_h = spec.dilation * (kh - 1) + 1
    eff_w = spec.dilation * (kw - 1) + 1
    if x.shape[2] + 2 * ph < eff_h or x.shape[3] + 2 * pw < eff_w:
        raise ValueError(
            f"input {x.shape[2]}x{x.shape[3]} too small for effective kernel {eff_h}x{eff_w}")

    b_arr = bias.data if bias is not None else None
    out = Tensor(_conv2d_forward(x.data, weights.data, b_arr, spec.stride, spec.dilation, ph, pw))
    if tape is not None:
        inputs = (x, weights) if bias is None else (x, weights, bias)

        def fwd():
            return _conv2d_forward(x.data, weights.data, b_arr, spec.stride,
                                   spec.dilation, ph, pw)

        def bwd(g):
            dx, dw, db = _conv2d_backward(g, x.data, weights.data, bias is not None,
                                          spec.stride, spec.dilation, ph, pw)
            return (dx, dw) if bias is None else (dx, dw, db)

        tape.record("conv2d", inputs, out, fwd, bwd)
    return out


# ---------------------------------------------------------------------------
# elementwise


def relu(x: Tensor, tape: Tape | None = None) -> Tensor:
    out = Tensor(np.maximum(x.data, 0))
    if tape is not None:
        tape.record("relu", (x,), out,
                    lambda: np.maximum(x.data, 0),
                    lambda g: (g * (x.data > 0),))
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Branch on sign so exp never overflows.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Tensor, tape: Tape | None = None) -> Tensor:
    s = _sigmoid(x.data)
    out = Tensor(s)
    if tape is not None:
        tape.record("sigmoid", (x,), out,
                    lambda: _sigmoid(x.data),
                    lambda g: (g * s * (1.0 - s),))
    return out


def add(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)
    if tape is not None:
        tape.record("add", (a, b), out,
                    lambda: a.data + b.data,
                    lambda g: (g, g))
    return out


def concat_channels(xs: Sequence[Tensor], tape: Tape | None = None) -> Tensor:
    if not xs:
        raise ValueError("concat_channels needs at least one tensor")
    n, _, h, w = xs[0].shape
    for t in xs[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise ValueError(f"concat spatial mismatch: {t.shape} vs {xs[0].shape}")
    arrs = [t.data for t in xs]
    out = Tensor(np.concatenate(arrs, axis=1))
    if tape is not None:
        offsets = np.cumsum([0] + [t.shape[1] for t in xs])

        def bwd(g):
            return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(arrs)))

        tape.record("concat", tuple(xs), out,
                    lambda: np.concatenate(arrs, axis=1), bwd)
    return out


def reduce_sum(x: Tensor, tape: Tape | None = None) -> Tensor:
    out = Tensor(x.data.sum(dtype=x.dtype).reshape(1, 1, 1, 1))
    if tape is not None:
        tape.record("sum", (x,), out,
                    lambda: x.data.sum(dtype=x.dtype).reshape(1, 1, 1, 1),
                    lambda g: (np.broadcast_to(g.reshape(()), x.shape).astype(x.dtype, copy=True),))
    return out


# ---------------------------------------------------------------------------
# pooling


def _avg_pool_pads(window: int, padding) -> tuple[int, int]:
    if padding == "same":
        return (window - 1) // 2, window // 2
    if padding == "valid":
        return 0, 0
    p = int(padding)
    return p, p


def _avg_pool_forward(x: np.ndarray, window: int, stride: int, p0: int, p1: int) -> np.ndarray:
    xp = np.pad(x, ((0, 0), (0, 0), (p0, p1), (p0, p1)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (window, window), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    return np.ascontiguousarray(win.mean(axis=(4, 5), dtype=x.dtype))


def avg_pool(x: Tensor, window: int, stride: int = 1, padding="same",
             tape: Tape | None = None) -> Tensor:
    """Mean pooling; border windows divide by the full window area."""
    if window < 1:
        raise ValueError("window must be >= 1")
    p0, p1 = _avg_pool_pads(window, padding)
    out = Tensor(_avg_pool_forward(x.data, window, stride, p0, p1))
    if tape is not None:
        n, c, h, w = x.shape
        oh, ow = out.shape[2], out.shape[3]
        area = window * window

        def bwd(g):
            gs = g / area
            dxp = np.zeros((n, c, h + p0 + p1, w + p0 + p1), dtype=x.dtype)
            for i in range(window):
                rs = slice(i, i + (oh - 1) * stride + 1, stride)
                for j in range(window):
                    cs = slice(j, j + (ow - 1) * stride + 1, stride)
                    dxp[:, :, rs, cs] += gs
            return (np.ascontiguousarray(dxp[:, :, p0:p0 + h, p0:p0 + w]),)

        tape.record("avg_pool", (x,), out,
                    lambda: _avg_pool_forward(x.data, window, stride, p0, p1), bwd)
    return out


def _max_pool_parts(x: np.ndarray):
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    flat = np.ascontiguousarray(
        x[:, :, :2 * h2, :2 * w2].reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5)
    ).reshape(n, c, h2, w2, 4)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx


def max_pool_2x2(x: Tensor, tape: Tape | None = None) -> Tensor:
    """2x2/stride-2 max pooling; odd trailing row/column is dropped."""
    n, c, h, w = x.shape
    if h < 2 or w < 2:
        raise ValueError(f"max_pool_2x2 needs h, w >= 2, got {h}x{w}")
    out_data, idx = _max_pool_parts(x.data)
    out = Tensor(out_data)
    if tape is not None:
        h2, w2 = h // 2, w // 2

        def bwd(g):
            dflat = np.zeros((n, c, h2, w2, 4), dtype=x.dtype)
            np.put_along_axis(dflat, idx[..., None], g[..., None], axis=-1)
            dx = np.zeros((n, c, h, w), dtype=x.dtype)
            dx[:, :, :2 * h2, :2 * w2] = (
                dflat.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
                .reshape(n, c, 2 * h2, 2 * w2))
            return (dx,)

        tape.record("max_pool_2x2", (x,), out, lambda: _max_pool_parts(x.data)[0], bwd)
    return out


# ---------------------------------------------------------------------------
# resizing


def _resize_axis(in_size: int, out_size: int, dtype):
    src = (np.arange(out_size, dtype=np.float64) + 0.5) * (in_size / out_size) - 0.5
    src = np.clip(src, 0.0, in_size - 1.0)
    i0 = np.floor(src).astype(np.int64)
    i0 = np.minimum(i0, in_size - 1)
    i1 = np.minimum(i0 + 1, in_size - 1)
    t = (src - i0).astype(dtype)
    return i0, i1, t


def _bilinear_forward(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    dtype = x.dtype
    iy0, iy1, ty = _resize_axis(x.shape[2], out_h, dtype)
    ix0, ix1, tx = _resize_axis(x.shape[3], out_w, dtype)
    r0 = x[:, :, iy0, :]
    r1 = x[:, :, iy1, :]
    # Lerp along y then x; the difference form keeps constants bit-exact.
    rows = r0 + ty[None, None, :, None] * (r1 - r0)
    c0 = rows[:, :, :, ix0]
    c1 = rows[:, :, :, ix1]
    return c0 + tx[None, None, None, :] * (c1 - c0)


def bilinear_resize(x: Tensor, out_h: int, out_w: int, tape: Tape | None = None) -> Tensor:
    """Half-pixel-center bilinear resampling with clamped borders."""
    if out_h < 1 or out_w < 1:
        raise ValueError("output dims must be >= 1")
    out = Tensor(_bilinear_forward(x.data, out_h, out_w))
    if tape is not None:
        n, c, h, w = x.shape
        dtype = x.dtype
        iy0, iy1, ty = _resize_axis(h, out_h, dtype)
        ix0, ix1, tx = _resize_axis(w, out_w, dtype)

        def bwd(g):
            dx = np.zeros((n, c, h, w), dtype=dtype)
            wy = ty[:, None]
            wx = tx[None, :]
            full = (slice(None), slice(None))
            for iy, fy in ((iy0[:, None], 1.0 - wy), (iy1[:, None], wy)):
                for ix, fx in ((ix0[None, :], 1.0 - wx), (ix1[None, :], wx)):
                    np.add.at(dx, full + (np.broadcast_to(iy, (out_h, out_w)),
                                          np.broadcast_to(ix, (out_h, out_w))),
                              g * (fy * fx))
            return (dx,)

        tape.record("bilinear", (x,), out,
                    lambda: _bilinear_forward(x.data, out_h, out_w), bwd)
    return out


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    checked: int


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]
    skipped: list[str]

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)


def _rel_err(a: float, n: float, floor: float) -> float:
    # The floor turns the test into an absolute one below it: f64 central
    # differences cannot resolve gradients much below ~1e-9 at typical loss
    # scales, so tiny analytic/numeric values should not explode the ratio.
    return abs(a - n) / max(abs(a), abs(n), floor)


def grad_check(loss_fn: Callable[[Tape | None], Tensor],
               params: "Iterable[tuple[str, Tensor]] | dict[str, Tensor]",
               eps: float = 1e-5,
               max_entries_per_param: int | None = None,
               rng: np.random.Generator | None = None,
               exclude: Iterable[str] = (),
               rel_floor: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients of ``loss_fn`` against central differences.

    ``loss_fn(tape)`` must evaluate the scalar loss from the current parameter
    values, recording on ``tape`` when one is given.  Parameters must be
    float64.  Entries per parameter are exhaustive unless capped, in which
    case a seeded ``rng`` picks the probe set.  Excluded (frozen) parameters
    are reported as skipped.
    """
    items = list(params.items()) if isinstance(params, dict) else list(params)
    excl = set(exclude)
    for name, t in items:
        if name not in excl and t.dtype != np.float64:
            raise ValueError(f"grad_check requires float64 parameters; {name} is {t.dtype}")

    tape = Tape()
    loss = loss_fn(tape)
    grads = backward(tape, loss.id)

    entries: list[GradCheckEntry] = []
    skipped: list[str] = []
    for name, t in items:
        if name in excl:
            skipped.append(name)
            continue
        analytic = grads.get(t.id)
        if analytic is None:
            analytic = np.zeros_like(t.data)
        flat_idx = np.arange(t.size)
        if max_entries_per_param is not None and t.size > max_entries_per_param:
            if rng is None:
                rng = np.random.default_rng(0)
            flat_idx = rng.choice(t.size, size=max_entries_per_param, replace=False)
        flat = t.data.reshape(-1)
        aflat = analytic.reshape(-1)
        worst = 0.0
        for k in flat_idx:
            keep = flat[k]
            flat[k] = keep + eps
            lp = loss_fn(None).item()
            flat[k] = keep - eps
            lm = loss_fn(None).item()
            flat[k] = keep
            numeric = (lp - lm) / (2.0 * eps)
            worst = max(worst, _rel_err(float(aflat[k]), numeric, rel_floor))
        entries.append(GradCheckEntry(name, worst, len(flat_idx)))
    return GradCheckReport(entries, skipped)
