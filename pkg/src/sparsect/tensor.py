"""Minimal dense tensors with reverse-mode differentiation.

The operation set is deliberately closed: 2-d cross-correlation, (leaky) ReLU,
2x2 average pooling, 2x nearest-neighbour upsampling, channel concatenation,
addition, per-channel bias addition, scalar multiplication, mean squared
error, and a sinusoidal embedding constructor.  That is everything the
network stack needs; there is no general broadcasting or shape inference.

Arithmetic runs in float64 by default (required by the finite-difference
gradient checks); see :func:`set_default_dtype` for the float32 fast mode.
Gradients are accumulated by summation, so a tensor feeding several
consumers receives the sum of the path contributions.
"""

from __future__ import annotations

import numpy as np

_grad_enabled = True
_default_dtype = np.float64


def set_default_dtype(dtype) -> None:
    """Select the storage/compute precision for newly created tensors.

    float64 is the default and is required for the finite-difference
    gradient checks; float32 is an opt-in fast mode for long training
    runs (checkpoints are float32 either way).
    """
    global _default_dtype
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ValueError(f"unsupported dtype {dtype!r}")
    _default_dtype = dt.type


def default_dtype():
    return _default_dtype


class no_grad:
    """Context manager that disables graph construction (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """A dense float array plus its position in the computation graph.

    Leaf tensors are created directly; interior nodes are created by the
    operations below and remember their parents, the op tag that produced
    them and a closure computing parent gradients.  ``grad`` is populated
    by :meth:`backward` and has the same shape as ``data``.
    """

    __slots__ = ("data", "grad", "requires_grad", "parents", "op", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), op="leaf", backward_fn=None):
        self.data = np.asarray(data, dtype=_default_dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.op = op
        self._backward = backward_fn

    @property
    def shape(self):
        return self.data.shape

    def is_finite(self) -> bool:
        """Validity check: contract requires all values finite."""
        return bool(np.all(np.isfinite(self.data)))

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Populate ``grad`` on every reachable tensor that requires it.

        The root must be scalar.  Gradients of tensors consumed several
        times accumulate by summation.
        """
        if self.data.ndim != 0 and self.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.shape}")
        topo: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is None or node.grad is None:
                continue
            for parent, g in zip(node.parents, node._backward(node.grad)):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"


def backward(loss: Tensor) -> None:
    """Module-level alias for ``loss.backward()``."""
    loss.backward()


def _node(data, parents, op, backward_fn):
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=parents, op=op, backward_fn=backward_fn)
    return Tensor(data)


def constant(data) -> Tensor:
    return Tensor(data)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=_default_dtype), requires_grad=True)


# ---------------------------------------------------------------------------
# convolution


def _im2col(xp, kh, kw):
    """Patch matrix [C*kh*kw, N*H*W] of the padded input.

    Built shift-by-shift so every copy runs with a W-contiguous inner loop;
    this is the layout the gemm consumes directly.
    """
    n, c, hp, wp = xp.shape
    h, w = hp - kh + 1, wp - kw + 1
    cols = np.empty((c * kh * kw, n * h * w), dtype=xp.dtype)
    view = cols.reshape(c, kh, kw, n, h, w)
    for di in range(kh):
        for dj in range(kw):
            view[:, di, dj] = xp[:, :, di:di + h, dj:dj + w].transpose(1, 0, 2, 3)
    return cols


def _corr(xp, kernel, cols=None):
    """Valid cross-correlation of a padded input with kernel [F,C,kh,kw]."""
    n = xp.shape[0]
    f, c, kh, kw = kernel.shape
    h, w = xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
    if cols is None:
        cols = _im2col(xp, kh, kw)
    out = kernel.reshape(f, c * kh * kw) @ cols
    return np.ascontiguousarray(out.reshape(f, n, h, w).transpose(1, 0, 2, 3)), cols


def _pad(x, ph, pw):
    if not (ph or pw):
        return x
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=x.dtype)
    out[:, :, ph:ph + h, pw:pw + w] = x
    return out


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, padding: str = "same") -> Tensor:
    """Cross-correlate ``x`` [N,C,H,W] with ``kernel`` [F,C,kh,kw] plus bias [F].

    ``padding="same"`` zero-fills so the spatial shape is preserved (odd
    kernels only); ``"valid"`` keeps fully-overlapping positions.
    """
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input/kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    f, ck, kh, kw = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel dims must be odd, got {kh}x{kw}")
    if ck != c:
        raise ValueError(f"kernel expects {ck} input channels, input has {c}")
    if bias.shape != (f,):
        raise ValueError(f"bias shape {bias.shape} does not match {f} filters")
    if padding == "same":
        ph, pw = kh // 2, kw // 2
    elif padding == "valid":
        ph = pw = 0
        if h < kh or w < kw:
            raise ValueError(f"input {h}x{w} smaller than kernel {kh}x{kw} with valid padding")
    else:
        raise ValueError(f"unknown padding {padding!r}")

    track = _grad_enabled and (x.requires_grad or kernel.requires_grad or bias.requires_grad)
    xp = _pad(x.data, ph, pw)
    out, cols = _corr(xp, kernel.data)
    if not track:
        cols = None  # free the patch matrix immediately in inference mode
    out += bias.data[None, :, None, None]

    def back(g, cols=cols):
        gx = gk = gb = None
        gmat = None
        if bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        ho, wo = g.shape[2], g.shape[3]
        if kernel.requires_grad or x.requires_grad:
            gmat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(f, n * ho * wo)
        if kernel.requires_grad:
            gk = (gmat @ cols.T).reshape(f, c, kh, kw)
        if x.requires_grad:
            # scatter the patch-space gradient back onto the padded input
            dcols = kernel.data.reshape(f, c * kh * kw).T @ gmat
            view = dcols.reshape(c, kh, kw, n, ho, wo)
            dxp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=g.dtype)
            for di in range(kh):
                for dj in range(kw):
                    dxp[:, :, di:di + ho, dj:dj + wo] += view[:, di, dj].transpose(1, 0, 2, 3)
            gx = dxp[:, :, ph:ph + h, pw:pw + w] if (ph or pw) else dxp
        return gx, gk, gb

    return _node(out, (x, kernel, bias), "conv2d", back)


# ---------------------------------------------------------------------------
# elementwise and shape ops


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)

    def back(g):
        return ((x.data > 0.0) * g,)

    return _node(out, (x,), "relu", back)


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    out = np.where(x.data > 0.0, x.data, slope * x.data)

    def back(g):
        return (np.where(x.data > 0.0, g, slope * g),)

    return _node(out, (x,), "leaky_relu", back)


def avg_pool2(x: Tensor) -> Tensor:
    """Mean over non-overlapping 2x2 blocks; spatial dims must be even."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"avg_pool2 needs even spatial dims, got {h}x{w}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def back(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return _node(out, (x,), "avg_pool2", back)


def upsample_nearest2(x: Tensor) -> Tensor:
    """Replicate every pixel into a 2x2 block."""
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def back(g):
        n, c, h, w = g.shape
        return (g.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5)),)

    return _node(out, (x,), "upsample_nearest2", back)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ValueError("concat_channels expects 4-d tensors")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"concat_channels shape mismatch: {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def back(g):
        return g[:, :ca], g[:, ca:]

    return _node(out, (a, b), "concat_channels", back)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = a.data + b.data

    def back(g):
        return g, g

    return _node(out, (a, b), "add", back)


def add_channel_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-sample, per-channel bias [N,C,1,1] to a feature map [N,C,H,W]."""
    if x.data.ndim != 4 or bias.shape != (x.shape[0], x.shape[1], 1, 1):
        raise ValueError(f"channel bias shape {bias.shape} does not match input {x.shape}")
    out = x.data + bias.data

    def back(g):
        return g, g.sum(axis=(2, 3), keepdims=True)

    return _node(out, (x, bias), "add_channel_bias", back)


def scalar_mul(x: Tensor, c: float) -> Tensor:
    out = x.data * c

    def back(g):
        return (g * c,)

    return _node(out, (x,), "scalar_mul", back)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean of squared elementwise differences, as a scalar tensor."""
    if a.shape != b.shape:
        raise ValueError(f"mse shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    out = np.mean(diff * diff, dtype=np.float64)

    def back(g):
        base = (2.0 / diff.size) * diff * g
        return base, -base

    return _node(out, (a, b), "mse", back)


# ---------------------------------------------------------------------------
# time embedding

EMBED_FREQ_MIN = 1.0
EMBED_FREQ_MAX = 1.0e4


def sinusoidal_embedding(values, dim: int) -> Tensor:
    """Constant [N,dim,1,1] embedding of per-sample scalars.

    Frequencies form a geometric ladder from 1 to 1e4 so noise levels in
    [1e-3, 1] map to well-separated phases.  Not differentiable (the
    embedded value is data, never a parameter).
    """
    if dim % 2:
        raise ValueError("embedding dim must be even")
    v = np.atleast_1d(np.asarray(values, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(np.linspace(np.log(EMBED_FREQ_MIN), np.log(EMBED_FREQ_MAX), half))
    ang = v[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    return Tensor(emb[:, :, None, None])
