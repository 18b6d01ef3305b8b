"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tape` records every differentiable operation executed while it is
active; :func:`backward` replays the record in reverse to accumulate
gradients. Values are double precision by default (``set_default_dtype``
switches to float32). There is no implicit broadcasting: elementwise
operations require identical shapes, and every shape change is an explicit
op.
"""

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from . import backend
from .errors import NumericError, PixelBudgetError, ShapeError

_DEFAULT_DTYPE = np.float64


def set_default_dtype(dtype) -> None:
    """Set the dtype used for newly created tensors (float64 or float32)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def default_dtype():
    return _DEFAULT_DTYPE


class Tensor:
    """A dense array plus a flag marking participation in differentiation."""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.asarray(data)
        if arr.dtype not in (np.float64, np.float32):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; all semantics live in the module-level functions.
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    def __radd__(self, other):
        return add_scalar(self, other)

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __mul__(self, other):
        return elementwise_mul(self, other) if isinstance(other, Tensor) else scalar_mul(self, other)

    def __rmul__(self, other):
        return scalar_mul(self, other)

    def __neg__(self):
        return scalar_mul(self, -1.0)


class _Record:
    """One executed op: output, operand refs, and the local backward rule."""

    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out, inputs, backward_fn):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


_tls = threading.local()


def _tape_stack():
    stack = getattr(_tls, "tapes", None)
    if stack is None:
        stack = []
        _tls.tapes = stack
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed operations, one training step's graph.

    Use as a context manager; ops executed inside record themselves here
    when any operand requires a gradient. A tape and its tensors belong to
    a single thread.
    """

    def __init__(self):
        self._records: list[_Record] = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted: exiting a non-active tape")
        stack.pop()
        return False

    def __len__(self):
        return len(self._records)


class GradientMap:
    """Gradients keyed by tensor identity, as produced by :func:`backward`."""

    def __init__(self):
        self._grads: dict[int, np.ndarray] = {}
        self._tensors: dict[int, Tensor] = {}

    def _accumulate(self, tensor: Tensor, grad: np.ndarray) -> None:
        key = id(tensor)
        if key in self._grads:
            self._grads[key] += grad
        else:
            self._grads[key] = np.array(grad, copy=True)
            self._tensors[key] = tensor

    def get(self, tensor: Tensor):
        """Gradient array for ``tensor``, or None if no gradient flowed."""
        return self._grads.get(id(tensor))

    def grad(self, tensor: Tensor) -> np.ndarray:
        """Like :meth:`get` but returns zeros for unreached tensors."""
        g = self._grads.get(id(tensor))
        return np.zeros_like(tensor.data) if g is None else g

    def __contains__(self, tensor: Tensor) -> bool:
        return id(tensor) in self._grads

    def __len__(self) -> int:
        return len(self._grads)


def backward(loss: Tensor, tape: Tape) -> GradientMap:
    """Accumulate d(loss)/d(tensor) for every tensor recorded on ``tape``.

    ``loss`` must be a scalar produced on the tape. The record is replayed
    in reverse execution order, which visits each node exactly once in
    reverse topological order; fan-out accumulates additively.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    grads = GradientMap()
    grads._accumulate(loss, np.ones_like(loss.data))
    for rec in reversed(tape._records):
        gout = grads._grads.get(id(rec.out))
        if gout is None:
            continue
        gins = rec.backward_fn(gout)
        for tensor, gin in zip(rec.inputs, gins):
            if gin is None:
                continue
            grads._accumulate(tensor, gin)
    return grads


def _make(out_data, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    tape = _active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track)
    if track:
        tape._records.append(_Record(out, tuple(inputs), backward_fn))
    return out


def _require_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


# ---------------------------------------------------------------------------
# Elementwise and scalar primitives
# ---------------------------------------------------------------------------

def add(x: Tensor, y: Tensor) -> Tensor:
    _require_same_shape(x, y, "add")
    return _make(x.data + y.data, (x, y), lambda g: (g, g))


def sub(x: Tensor, y: Tensor) -> Tensor:
    _require_same_shape(x, y, "sub")
    return _make(x.data - y.data, (x, y), lambda g: (g, -g))


def elementwise_mul(x: Tensor, y: Tensor) -> Tensor:
    _require_same_shape(x, y, "elementwise_mul")
    xd, yd = x.data, y.data
    return _make(xd * yd, (x, y), lambda g: (g * yd, g * xd))


def scalar_mul(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(x.data * c, (x,), lambda g: (g * c,))


def add_scalar(x: Tensor, c: float) -> Tensor:
    return _make(x.data + float(c), (x,), lambda g: (g,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NumericError("log requires strictly positive input")
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def matmul(x: Tensor, y: Tensor) -> Tensor:
    """Matrix product of 2-D operands or stacked 3-D batches."""
    if x.data.ndim != y.data.ndim or x.data.ndim not in (2, 3):
        raise ShapeError(f"matmul: unsupported ranks {x.data.ndim} and {y.data.ndim}")
    if x.data.shape[-1] != y.data.shape[-2]:
        raise ShapeError(f"matmul: inner dims {x.data.shape} @ {y.data.shape}")
    if x.data.ndim == 3 and x.data.shape[0] != y.data.shape[0]:
        raise ShapeError("matmul: batch sizes differ")
    xd, yd = x.data, y.data

    def _backward(g):
        return g @ np.swapaxes(yd, -1, -2), np.swapaxes(xd, -1, -2) @ g

    return _make(xd @ yd, (x, y), _backward)


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    shape = x.data.shape
    return _make(x.data.sum(), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    shape = x.data.shape
    n = x.data.size
    return _make(x.data.mean(), (x,), lambda g: (np.broadcast_to(g / n, shape).copy(),))


def sum_per_sample(x: Tensor) -> Tensor:
    """Sum over every axis but the first; [B, ...] -> [B]."""
    if x.data.ndim < 2:
        raise ShapeError("sum_per_sample needs at least 2 dims")
    shape = x.data.shape
    axes = tuple(range(1, x.data.ndim))
    expand = (slice(None),) + (None,) * (x.data.ndim - 1)

    def _backward(g):
        return (np.broadcast_to(g[expand], shape).copy(),)

    return _make(x.data.sum(axis=axes), (x,), _backward)


def mean_per_sample(x: Tensor) -> Tensor:
    """Mean over every axis but the first; [B, ...] -> [B]."""
    if x.data.ndim < 2:
        raise ShapeError("mean_per_sample needs at least 2 dims")
    shape = x.data.shape
    axes = tuple(range(1, x.data.ndim))
    n = int(np.prod(shape[1:]))
    expand = (slice(None),) + (None,) * (x.data.ndim - 1)

    def _backward(g):
        return (np.broadcast_to(g[expand] / n, shape).copy(),)

    return _make(x.data.mean(axis=axes), (x,), _backward)


# ---------------------------------------------------------------------------
# Shape plumbing
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    old = x.data.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def swap_last2(x: Tensor) -> Tensor:
    if x.data.ndim < 2:
        raise ShapeError("swap_last2 needs at least 2 dims")
    return _make(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def concat_channels(tensors: Iterable[Tensor]) -> Tensor:
    """Concatenate 4-D tensors along the channel axis (axis 1)."""
    ts = list(tensors)
    if not ts:
        raise ShapeError("concat_channels of empty sequence")
    base = ts[0].data.shape
    for t in ts[1:]:
        s = t.data.shape
        if len(s) != 4 or len(base) != 4 or s[0] != base[0] or s[2:] != base[2:]:
            raise ShapeError(f"concat_channels: incompatible shapes {base} and {s}")
    widths = [t.data.shape[1] for t in ts]
    offsets = np.cumsum([0] + widths)

    def _backward(g):
        return tuple(g[:, offsets[i] : offsets[i + 1]] for i in range(len(ts)))

    return _make(np.concatenate([t.data for t in ts], axis=1), ts, _backward)


def channel_slice(x: Tensor, lo: int, hi: int) -> Tensor:
    """Slice channels [lo, hi) of a 4-D tensor."""
    if x.data.ndim != 4:
        raise ShapeError("channel_slice expects a 4-D tensor")
    if not (0 <= lo < hi <= x.data.shape[1]):
        raise ShapeError(f"channel_slice [{lo}, {hi}) out of range for {x.data.shape}")
    shape = x.data.shape

    def _backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[:, lo:hi] = g
        return (gx,)

    return _make(x.data[:, lo:hi].copy(), (x,), _backward)


# ---------------------------------------------------------------------------
# Convolution and resampling
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1,
           padding: str = "same") -> Tensor:
    """2-D cross-correlation with per-output-channel bias.

    ``x`` is [B,Cin,H,W], ``kernel`` is [Cout,Cin,k,k] with odd k, ``bias``
    is [Cout]. ``padding`` is "same" (zero-pad so stride-1 output keeps the
    spatial size) or "valid"; output dims are
    ``(H + 2p - k) // stride + 1``. "same" supports stride 1 or 2 only.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be 4-D, got {x.data.shape}")
    if kernel.data.ndim != 4 or kernel.data.shape[2] != kernel.data.shape[3]:
        raise ShapeError(f"conv2d kernel must be [Cout,Cin,k,k], got {kernel.data.shape}")
    k = kernel.data.shape[2]
    if k % 2 != 1:
        raise ShapeError(f"conv2d kernel size must be odd, got {k}")
    if x.data.shape[1] != kernel.data.shape[1]:
        raise ShapeError(
            f"conv2d channel mismatch: input has {x.data.shape[1]}, "
            f"kernel expects {kernel.data.shape[1]}"
        )
    if bias.data.shape != (kernel.data.shape[0],):
        raise ShapeError(f"conv2d bias shape {bias.data.shape} != ({kernel.data.shape[0]},)")
    if padding == "same":
        if stride not in (1, 2):
            raise ShapeError("conv2d 'same' padding supports stride 1 or 2")
        pad = (k - 1) // 2
    elif padding == "valid":
        if stride < 1:
            raise ShapeError("conv2d stride must be >= 1")
        pad = 0
    else:
        raise ShapeError(f"conv2d padding must be 'same' or 'valid', got {padding!r}")

    h, w = x.data.shape[2], x.data.shape[3]
    hp, wp = h + 2 * pad, w + 2 * pad
    if hp < k or wp < k:
        raise ShapeError(f"conv2d: kernel {k} larger than padded input {hp}x{wp}")

    if pad:
        xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    else:
        xp = x.data
    xp = np.ascontiguousarray(xp)
    kd, bd = kernel.data, bias.data
    out = backend.conv2d_forward(xp, kd, bd, stride)

    def _backward(g):
        g = np.ascontiguousarray(g)
        gxp = backend.conv2d_backward_input(g, kd, stride, hp, wp)
        gx = gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp
        gw = backend.conv2d_backward_kernel(g, xp, k, stride)
        gb = g.sum(axis=(0, 2, 3))
        return np.ascontiguousarray(gx), gw, gb

    return _make(out, (x, kernel, bias), _backward)


def resample(x: Tensor, mode: str) -> Tensor:
    """Halve ("down2", 2x2 average pooling) or double ("up2", nearest
    duplication) the spatial size of a 4-D tensor."""
    if x.data.ndim != 4:
        raise ShapeError(f"resample input must be 4-D, got {x.data.shape}")
    b, c, h, w = x.data.shape
    if mode == "down2":
        if h % 2 or w % 2:
            raise ShapeError(f"down2 requires even spatial dims, got {h}x{w}")
        out = x.data.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

        def _backward(g):
            return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

        return _make(out, (x,), _backward)
    if mode == "up2":
        out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

        def _backward(g):
            return (g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)),)

        return _make(out, (x,), _backward)
    raise ShapeError(f"resample mode must be 'down2' or 'up2', got {mode!r}")


def spatial_softmax(logits: Tensor) -> Tensor:
    """Softmax jointly over all pixels of a [B,1,H,W] plane, per sample.

    Max-subtraction keeps the exponentials bounded; each sample's output
    sums to one.
    """
    if logits.data.ndim != 4 or logits.data.shape[1] != 1:
        raise ShapeError(f"spatial_softmax expects [B,1,H,W], got {logits.data.shape}")
    if not np.all(np.isfinite(logits.data)):
        raise NumericError("spatial_softmax: non-finite logits")
    b = logits.data.shape[0]
    flat = logits.data.reshape(b, -1)
    z = np.exp(flat - flat.max(axis=1, keepdims=True))
    s = z / z.sum(axis=1, keepdims=True)
    out = s.reshape(logits.data.shape)

    def _backward(g):
        gf = g.reshape(b, -1)
        dot = (gf * s).sum(axis=1, keepdims=True)
        return ((s * (gf - dot)).reshape(logits.data.shape),)

    return _make(out, (logits,), _backward)


def nonlocal_attention(x: Tensor, theta_w: Tensor, theta_b: Tensor,
                       phi_w: Tensor, phi_b: Tensor,
                       g_w: Tensor, g_b: Tensor,
                       out_w: Tensor, out_b: Tensor,
                       pixel_budget: int = 4096) -> Tensor:
    """Dense dot-product self-attention over all pixel pairs, plus residual.

    theta/phi/g are 1x1 convs C -> C/2, the output conv maps C/2 -> C, and
    the pairwise similarities are averaged over the number of pixels. With
    a zero output conv this is the identity.
    """
    b, c, hs, ws = x.data.shape
    p = hs * ws
    if p > pixel_budget:
        raise PixelBudgetError(
            f"attention plane {hs}x{ws} = {p} pixels exceeds budget {pixel_budget}"
        )
    if c % 2 != 0:
        raise ShapeError(f"nonlocal_attention needs an even channel count, got {c}")
    c2 = c // 2
    th = conv2d(x, theta_w, theta_b, padding="valid")   # [B,C/2,Hs,Ws]
    ph = conv2d(x, phi_w, phi_b, padding="valid")
    gg = conv2d(x, g_w, g_b, padding="valid")
    th = swap_last2(reshape(th, (b, c2, p)))            # [B,P,C/2]
    ph = reshape(ph, (b, c2, p))                        # [B,C/2,P]
    gg = swap_last2(reshape(gg, (b, c2, p)))            # [B,P,C/2]
    sim = matmul(th, ph)                                # [B,P,P]
    agg = scalar_mul(matmul(sim, gg), 1.0 / p)          # [B,P,C/2]
    agg = reshape(swap_last2(agg), (b, c2, hs, ws))
    return add(x, conv2d(agg, out_w, out_b, padding="valid"))


# ---------------------------------------------------------------------------
# Gradient checking oracle
# ---------------------------------------------------------------------------

def finite_diff_gradient(f: Callable[[Tensor], Tensor], x: Tensor,
                         step: float = 1e-5) -> Tensor:
    """Central-difference gradient of a tensor-to-scalar function at ``x``.

    Independent of the tape machinery; used to cross-check analytic
    backward rules.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base = x.data.copy()
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(Tensor(base)).item()
        flat[i] = orig - step
        lo = f(Tensor(base)).item()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return Tensor(grad)


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """Uniform init with ReLU-gain fan-in scaling, in the default dtype."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(_DEFAULT_DTYPE)


class Conv2dLayer:
    """Convolution layer bundling a kernel and bias as trainable leaves."""

    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator,
                 stride: int = 1, padding: str = "same", zero_init: bool = False):
        if zero_init:
            weight = np.zeros((cout, cin, k, k), dtype=_DEFAULT_DTYPE)
        else:
            weight = kaiming_uniform(rng, (cout, cin, k, k), fan_in=cin * k * k)
        self.weight = Tensor(weight, requires_grad=True)
        self.bias = Tensor(np.zeros(cout, dtype=_DEFAULT_DTYPE), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)

    def named_parameters(self, prefix: str):
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias
