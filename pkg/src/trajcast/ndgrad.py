"""Dense float64 tensors with tape-based reverse-mode differentiation.

All math runs in double precision on numpy arrays. Each op records its
inputs and a vector-Jacobian closure on the active :class:`Tape`;
``Tape.backward`` replays the records in reverse, which is a valid
topological order because an op's inputs always exist before it runs.

Tensors are treated as immutable once produced by an op. A tape is
single-threaded; independent tapes may run in parallel workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Tape",
    "NonFiniteGradientError",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "reshape",
    "transpose",
    "concat",
    "narrow",
    "select",
    "broadcast_to",
    "tensor_sum",
    "tensor_mean",
    "relu",
    "gelu",
    "softmax",
    "layer_norm",
    "group_norm",
    "conv1d",
    "conv_output_length",
    "rope_apply",
    "attention_block",
    "multi_head_attention",
    "OptimState",
    "init_optim_state",
    "adam_step",
    "clip_grad_norm",
    "lr_at_step",
    "trunc_normal",
]


class NonFiniteGradientError(RuntimeError):
    """Raised when a gradient or loss stops being finite."""


class Tensor:
    """A dense array plus a flag marking it as a differentiation root."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


_ACTIVE_TAPE: "Tape | None" = None


@dataclass
class _Record:
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], tuple]


class Tape:
    """Ordered record of executed ops, replayed in reverse by backward().

    Records are appended in execution order, so walking them backwards
    visits every op exactly once after all of its consumers.
    """

    def __init__(self):
        self._records: list[_Record] = []
        self._prev: "Tape | None" = None

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        self._prev = _ACTIVE_TAPE
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._prev
        self._prev = None

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Accumulate d(loss)/d(tensor) for every tensor on the tape.

        Returns a dict keyed by ``id(tensor)``. ``loss`` must be scalar.
        """
        if loss.data.ndim != 0:
            raise ValueError(f"backward seed must be scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
        for rec in reversed(self._records):
            g = grads.get(id(rec.out))
            if g is None:
                continue
            partials = rec.vjp(g)
            for inp, gi in zip(rec.inputs, partials):
                if gi is None:
                    continue
                key = id(inp)
                acc = grads.get(key)
                if acc is None:
                    grads[key] = gi
                else:
                    grads[key] = acc + gi
        return grads

    def grad(self, loss: Tensor, params: Iterable[Tensor]) -> list[np.ndarray]:
        """Gradients for ``params``; zeros for parameters not on the path."""
        table = self.backward(loss)
        out = []
        for p in params:
            g = table.get(id(p))
            out.append(np.zeros_like(p.data) if g is None else g)
        return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: Tensor, inputs: tuple[Tensor, ...], vjp) -> None:
    if _ACTIVE_TAPE is not None and out.requires_grad:
        _ACTIVE_TAPE._records.append(_Record(out, inputs, vjp))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape``, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, extent in enumerate(shape):
        if extent == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data, a.requires_grad or b.requires_grad)

    def vjp(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    _record(out, (a, b), vjp)
    return out


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data - b.data, a.requires_grad or b.requires_grad)

    def vjp(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.shape) if b.requires_grad else None,
        )

    _record(out, (a, b), vjp)
    return out


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data, a.requires_grad or b.requires_grad)
    a_data, b_data = a.data, b.data

    def vjp(g):
        return (
            _unbroadcast(g * b_data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a_data, b.shape) if b.requires_grad else None,
        )

    _record(out, (a, b), vjp)
    return out


def neg(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(-a.data, a.requires_grad)
    _record(out, (a,), lambda g: (-g if a.requires_grad else None,))
    return out


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching rules; operands must be >= 2-D."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must have rank >= 2")
    out = Tensor(a.data @ b.data, a.requires_grad or b.requires_grad)
    a_data, b_data = a.data, b.data

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b_data, -1, -2), a.shape)
        if b.requires_grad:
            if b_data.ndim == 2 and a_data.ndim > 2:
                # shared weight against a batched activation: one flat GEMM
                # instead of a batched product followed by a reduction
                cols = a_data.shape[-1]
                gb = a_data.reshape(-1, cols).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a_data, -1, -2) @ g, b.shape)
        return ga, gb

    _record(out, (a, b), vjp)
    return out


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.reshape(shape), a.requires_grad)
    orig = a.shape
    _record(out, (a,), lambda g: (g.reshape(orig) if a.requires_grad else None,))
    return out


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.transpose(axes), a.requires_grad)
    inv = np.argsort(axes)
    _record(out, (a,), lambda g: (g.transpose(inv) if a.requires_grad else None,))
    return out


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = Tensor(
        np.concatenate([t.data for t in tensors], axis=axis),
        any(t.requires_grad for t in tensors),
    )
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g):
        pieces = np.split(g, offsets, axis=axis)
        return tuple(p if t.requires_grad else None for t, p in zip(tensors, pieces))

    _record(out, tuple(tensors), vjp)
    return out


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` entries along ``axis``."""
    a = _as_tensor(a)
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out = Tensor(a.data[sl], a.requires_grad)
    shape = a.shape

    def vjp(g):
        if not a.requires_grad:
            return (None,)
        z = np.zeros(shape)
        z[sl] = g
        return (z,)

    _record(out, (a,), vjp)
    return out


def select(a, index: int, axis: int) -> Tensor:
    """Take a single index along ``axis``, dropping that axis."""
    a = _as_tensor(a)
    out = Tensor(np.take(a.data, index, axis=axis), a.requires_grad)
    shape = a.shape

    def vjp(g):
        if not a.requires_grad:
            return (None,)
        z = np.zeros(shape)
        sl = [slice(None)] * len(shape)
        sl[axis] = index
        z[tuple(sl)] = g
        return (z,)

    _record(out, (a,), vjp)
    return out


def broadcast_to(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.broadcast_to(a.data, shape).copy(), a.requires_grad)
    orig = a.shape
    _record(out, (a,), lambda g: (_unbroadcast(g, orig) if a.requires_grad else None,))
    return out


def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), a.requires_grad)
    shape = a.shape

    def vjp(g):
        if not a.requires_grad:
            return (None,)
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        g_exp = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g_exp, shape).copy(),)

    _record(out, (a,), vjp)
    return out


def tensor_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    out = Tensor(out_data, a.requires_grad)
    shape = a.shape
    count = a.size if axis is None else shape[axis]

    def vjp(g):
        if not a.requires_grad:
            return (None,)
        if axis is None:
            return (np.broadcast_to(g / count, shape).copy(),)
        g_exp = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g_exp / count, shape).copy(),)

    _record(out, (a,), vjp)
    return out


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    out = Tensor(a.data * mask, a.requires_grad)
    _record(out, (a,), lambda g: (g * mask if a.requires_grad else None,))
    return out


_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a) -> Tensor:
    """x * Phi(x) with the exact standard-normal CDF (erf form)."""
    a = _as_tensor(a)
    cdf = 0.5 * (1.0 + erf(a.data / _SQRT2))
    out = Tensor(a.data * cdf, a.requires_grad)
    x = a.data

    def vjp(g):
        if not a.requires_grad:
            return (None,)
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        return (g * (cdf + x * pdf),)

    _record(out, (a,), vjp)
    return out


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s, a.requires_grad)

    def vjp(g):
        if not a.requires_grad:
            return (None,)
        dot = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - dot),)

    _record(out, (a,), vjp)
    return out


# ---------------------------------------------------------------------------
# Normalization layers
# ---------------------------------------------------------------------------


def layer_norm(x, gain, shift, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis to mean 0 / variance 1, then affine."""
    x, gain, shift = _as_tensor(x), _as_tensor(gain), _as_tensor(shift)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(
        xhat * gain.data + shift.data,
        x.requires_grad or gain.requires_grad or shift.requires_grad,
    )
    gain_data = gain.data

    def vjp(g):
        gx = gg = gs = None
        if x.requires_grad:
            dxhat = g * gain_data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            gx = inv * (dxhat - m1 - xhat * m2)
        if gain.requires_grad:
            gg = _unbroadcast(g * xhat, gain.shape)
        if shift.requires_grad:
            gs = _unbroadcast(g, shift.shape)
        return gx, gg, gs

    _record(out, (x, gain, shift), vjp)
    return out


def group_norm(x, gain, shift, groups: int, eps: float = 1e-5) -> Tensor:
    """Per-group normalization over (channel, length) blocks with channel affine.

    ``x`` is ``[channels, length]`` or ``[batch, channels, length]``; ``gain``
    and ``shift`` are per-channel vectors.
    """
    x, gain, shift = _as_tensor(x), _as_tensor(gain), _as_tensor(shift)
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 3:
        raise ValueError(f"group_norm expects rank 2 or 3 input, got {x.ndim}")
    b, c, length = xd.shape
    if c % groups != 0:
        raise ValueError(f"channels {c} not divisible by groups {groups}")
    grouped = xd.reshape(b, groups, (c // groups) * length)
    mu = grouped.mean(axis=-1, keepdims=True)
    gc = grouped - mu
    var = (gc * gc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (gc * inv).reshape(b, c, length)
    gain_col = gain.data.reshape(1, c, 1)
    shift_col = shift.data.reshape(1, c, 1)
    out_data = xhat * gain_col + shift_col
    if squeeze:
        out_data = out_data[0]
    out = Tensor(out_data, x.requires_grad or gain.requires_grad or shift.requires_grad)

    def vjp(g):
        gd = g[None] if squeeze else g
        gx = gg = gs = None
        if x.requires_grad:
            dxhat = (gd * gain_col).reshape(b, groups, (c // groups) * length)
            xhat_g = xhat.reshape(b, groups, (c // groups) * length)
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat_g).mean(axis=-1, keepdims=True)
            gx = (inv * (dxhat - m1 - xhat_g * m2)).reshape(b, c, length)
            if squeeze:
                gx = gx[0]
        if gain.requires_grad:
            gg = (gd * xhat).sum(axis=(0, 2))
        if shift.requires_grad:
            gs = gd.sum(axis=(0, 2))
        return gx, gg, gs

    _record(out, (x, gain, shift), vjp)
    return out


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------


def conv_output_length(length: int, kernel_size: int, stride: int, padding: int) -> int:
    """Closed-form output length of a strided 1-D convolution."""
    if kernel_size < 1 or stride < 1:
        raise ValueError("kernel_size and stride must be >= 1")
    padded = length + 2 * padding
    if padded < kernel_size:
        raise ValueError(
            f"padded length {padded} shorter than kernel {kernel_size}"
        )
    return (padded - kernel_size) // stride + 1


def conv1d(x, kernels, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Strided 1-D convolution with symmetric zero padding.

    ``x`` is ``[c_in, L]`` or ``[batch, c_in, L]``; ``kernels`` is
    ``[c_out, c_in, k]``; ``bias`` is ``[c_out]`` or None.
    """
    x = _as_tensor(x)
    kernels = _as_tensor(kernels)
    bias = None if bias is None else _as_tensor(bias)
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 3:
        raise ValueError(f"conv1d expects rank 2 or 3 input, got {x.ndim}")
    if kernels.ndim != 3:
        raise ValueError("conv1d kernels must be [c_out, c_in, k]")
    b, c_in, length = xd.shape
    c_out, kc_in, k = kernels.shape
    if kc_in != c_in:
        raise ValueError(f"kernel expects {kc_in} input channels, input has {c_in}")
    l_out = conv_output_length(length, k, stride, padding)

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, k, axis=-1)[:, :, ::stride, :]
    windows = windows[:, :, :l_out, :]
    # flatten to one GEMM: rows are (batch, position), columns (channel, tap)
    flat = np.ascontiguousarray(windows.transpose(0, 2, 1, 3)).reshape(
        b * l_out, c_in * k
    )
    w2 = kernels.data.reshape(c_out, c_in * k)
    out_data = (flat @ w2.T).reshape(b, l_out, c_out).transpose(0, 2, 1)
    if bias is not None:
        out_data = out_data + bias.data[:, None]
    if squeeze:
        out_data = out_data[0]
    rg = x.requires_grad or kernels.requires_grad or (
        bias is not None and bias.requires_grad
    )
    out = Tensor(np.ascontiguousarray(out_data), rg)

    def vjp(g):
        gd = g[None] if squeeze else g
        g2 = np.ascontiguousarray(gd.transpose(0, 2, 1)).reshape(b * l_out, c_out)
        gx = gw = gb = None
        if kernels.requires_grad:
            gw = (g2.T @ flat).reshape(c_out, c_in, k)
        if bias is not None and bias.requires_grad:
            gb = gd.sum(axis=(0, 2))
        if x.requires_grad:
            contrib = (g2 @ w2).reshape(b, l_out, c_in, k).transpose(0, 2, 1, 3)
            gxp = np.zeros_like(xp)
            span = (l_out - 1) * stride + 1
            for j in range(k):
                gxp[:, :, j : j + span : stride] += contrib[:, :, :, j]
            gx = gxp[:, :, padding : padding + length]
            if squeeze:
                gx = gx[0]
        if bias is None:
            return gx, gw
        return gx, gw, gb

    inputs = (x, kernels) if bias is None else (x, kernels, bias)
    _record(out, inputs, vjp)
    return out


# ---------------------------------------------------------------------------
# Rotary position embedding and attention
# ---------------------------------------------------------------------------


def rope_apply(x, positions) -> Tensor:
    """Rotate adjacent feature pairs by position-dependent angles.

    ``x`` is ``[..., seq, head_dim]`` with even ``head_dim``; pair ``j``
    rotates at frequency ``10000**(-2j/head_dim)``. Position 0 is identity.
    """
    x = _as_tensor(x)
    hd = x.shape[-1]
    if hd % 2 != 0:
        raise ValueError(f"head_dim must be even, got {hd}")
    seq = x.shape[-2]
    pos = np.asarray(positions, dtype=np.float64)
    if pos.shape != (seq,):
        raise ValueError(f"positions must have shape ({seq},), got {pos.shape}")
    freqs = 10000.0 ** (-2.0 * np.arange(hd // 2) / hd)
    angles = pos[:, None] * freqs[None, :]
    cos, sin = np.cos(angles), np.sin(angles)

    even = x.data[..., 0::2]
    odd = x.data[..., 1::2]
    out_data = np.empty_like(x.data)
    out_data[..., 0::2] = even * cos - odd * sin
    out_data[..., 1::2] = even * sin + odd * cos
    out = Tensor(out_data, x.requires_grad)

    def vjp(g):
        if not x.requires_grad:
            return (None,)
        ge, go = g[..., 0::2], g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = ge * cos + go * sin
        gx[..., 1::2] = -ge * sin + go * cos
        return (gx,)

    _record(out, (x,), vjp)
    return out


_ATTENTION_KEYS = (
    "ln1_gain",
    "ln1_shift",
    "wq",
    "bq",
    "wk",
    "bk",
    "wv",
    "bv",
    "wo",
    "bo",
    "ln2_gain",
    "ln2_shift",
    "ffn_w1",
    "ffn_b1",
    "ffn_w2",
    "ffn_b2",
)


def _split_heads(t: Tensor, heads: int) -> Tensor:
    b, seq, d = t.shape
    t = reshape(t, (b, seq, heads, d // heads))
    return transpose(t, (0, 2, 1, 3))


def multi_head_attention(
    h: Tensor,
    params: Mapping[str, Tensor],
    heads: int,
    positions=None,
    use_rope: bool = True,
    return_attn: bool = False,
):
    """Bidirectional multi-head attention over ``h`` of shape [b, seq, d]."""
    b, seq, d = h.shape
    if d % heads != 0:
        raise ValueError(f"hidden dim {d} not divisible by heads {heads}")
    head_dim = d // heads
    q = _split_heads(add(matmul(h, params["wq"]), params["bq"]), heads)
    k = _split_heads(add(matmul(h, params["wk"]), params["bk"]), heads)
    v = _split_heads(add(matmul(h, params["wv"]), params["bv"]), heads)
    if use_rope:
        if positions is None:
            positions = np.arange(seq)
        q = rope_apply(q, positions)
        k = rope_apply(k, positions)
    scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(head_dim))
    attn = softmax(scores, axis=-1)
    ctx = matmul(attn, v)
    ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (b, seq, d))
    out = add(matmul(ctx, params["wo"]), params["bo"])
    if return_attn:
        return out, attn.data.copy()
    return out


def attention_block(
    x: Tensor,
    params: Mapping[str, Tensor],
    heads: int,
    positions=None,
    use_rope: bool = True,
) -> Tensor:
    """Pre-norm residual block: x + MHA(LN(x)), then x + FFN(LN(x)).

    Attention is bidirectional (no causal mask). ``x`` is [b, seq, d] or
    [seq, d]; parameter keys follow ``_ATTENTION_KEYS``.
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    h = layer_norm(x, params["ln1_gain"], params["ln1_shift"])
    x = add(x, multi_head_attention(h, params, heads, positions, use_rope))
    h2 = layer_norm(x, params["ln2_gain"], params["ln2_shift"])
    ff = matmul(gelu(add(matmul(h2, params["ffn_w1"]), params["ffn_b1"])), params["ffn_w2"])
    x = add(x, add(ff, params["ffn_b2"]))
    if squeeze:
        x = reshape(x, x.shape[1:])
    return x


# ---------------------------------------------------------------------------
# Optimizer and schedule
# ---------------------------------------------------------------------------


@dataclass
class OptimState:
    """Adam moments with decoupled weight decay, keyed by parameter name."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    base_lr: float = 6e-4
    weight_decay: float = 0.033
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    order: list[str] = field(default_factory=list)


def init_optim_state(
    params: Mapping[str, Tensor],
    base_lr: float = 6e-4,
    weight_decay: float = 0.033,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> OptimState:
    order = sorted(params)
    return OptimState(
        m={n: np.zeros_like(params[n].data) for n in order},
        v={n: np.zeros_like(params[n].data) for n in order},
        step=0,
        base_lr=base_lr,
        weight_decay=weight_decay,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
        order=order,
    )


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: OptimState,
    lr_now: float,
) -> None:
    """One bias-corrected Adam update with decoupled weight decay.

    Decay is applied to the weights directly, never folded into the
    gradient. Gradients are expected to be clipped already.
    """
    for name in state.order:
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name in state.order:
        g = grads[name]
        p = params[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p.data = p.data * (1.0 - lr_now * state.weight_decay) - lr_now * m_hat / (
            np.sqrt(v_hat) + state.eps
        )


def clip_grad_norm(
    grads: Mapping[str, np.ndarray], max_norm: float = 1.0
) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients so the global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total <= max_norm or total == 0.0:
        return dict(grads), total
    scale = max_norm / total
    return {n: g * scale for n, g in grads.items()}, total


def lr_at_step(
    step: int, total_steps: int, warmup_ratio: float = 0.1, base_lr: float = 6e-4
) -> float:
    """Linear warmup to ``base_lr`` then cosine decay to zero at the end."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup = warmup_ratio * total_steps
    if warmup > 0 and step < warmup:
        return base_lr * step / warmup
    span = total_steps - warmup
    if span <= 0:
        return 0.0
    progress = (step - warmup) / span
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * progress))


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal draws clipped to two standard deviations, then scaled."""
    return np.clip(rng.standard_normal(shape), -2.0, 2.0) * std
