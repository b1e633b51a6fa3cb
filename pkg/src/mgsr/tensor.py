"""Dense float tensors with reverse-mode automatic differentiation.

Storage is a C-contiguous numpy array (float32 or float64). Every operation
is a pure function of its inputs; tensors produced by an operation keep a
reference to their inputs and a backward closure, and calling ``backward()``
on a scalar result fills ``.grad`` on every reachable tensor that has
``requires_grad`` set. Randomness comes only from the explicit counter-based
``Rng``, so equal seeds give bit-identical streams.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "Tensor", "Rng", "GradCheckError", "grad_check",
    "add", "sub", "mul", "neg", "matmul", "conv2d", "attention",
    "layer_norm", "softmax", "gelu", "sigmoid", "tanh",
    "reshape", "transpose", "concat", "tsum", "tmean", "mse",
    "avg_pool2d", "upsample_nearest",
]

F32 = np.dtype("float32")
F64 = np.dtype("float64")
_FLOATS = (F32, F64)


def _as_dtype(dtype):
    if dtype is None:
        return None
    d = {"f32": F32, "f64": F64}.get(dtype, None)
    if d is None:
        d = np.dtype(dtype)
    if d not in _FLOATS:
        raise ValueError(f"unsupported dtype {dtype!r}; use f32 or f64")
    return d


class Tensor:
    """N-d real array plus an optional same-shape gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, data, dtype=None, requires_grad=False):
        dt = _as_dtype(dtype)
        arr = np.asarray(data, dtype=dt)
        if arr.dtype not in _FLOATS:
            arr = arr.astype(F32)
        self.data = np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._bwd = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return (f"Tensor(shape={tuple(self.shape)}, dtype={self.dtype.name},"
                f" requires_grad={self.requires_grad})")

    # operator sugar; the free functions hold the real implementations
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not an exported op")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        """Reverse-mode pass from a scalar result."""
        if self.size != 1:
            raise ValueError(f"backward() needs a scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and (p.requires_grad or p._parents):
                    stack.append((p, False))
        _accumulate(self, np.ones_like(self.data))
        for node in reversed(topo):
            if node._bwd is not None and node.grad is not None:
                node._bwd(node.grad)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        # own the buffer; views would alias the child's grad
        t.grad = g if g.base is None else g.copy()
    else:
        t.grad += g


def _result(data: np.ndarray, parents: tuple, bwd) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._bwd = bwd()
    else:
        out._parents = ()
        out._bwd = None
    return out


def _check_same_dtype(*ts: Tensor) -> None:
    d = ts[0].dtype
    for t in ts[1:]:
        if t.dtype != d:
            raise ValueError(f"dtype mismatch: {d.name} vs {t.dtype.name}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape))
                 if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic (numpy-style broadcasting, summed back on the way out)
# ---------------------------------------------------------------------------

def _coerce(a, like: Tensor) -> Tensor:
    if isinstance(a, Tensor):
        return a
    return Tensor(np.asarray(a, dtype=like.dtype))


def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    b = _coerce(b, a)
    _check_same_dtype(a, b)

    def bwd():
        ash, bsh = a.shape, b.shape

        def run(g):
            if a.requires_grad or a._parents:
                _accumulate(a, _unbroadcast(g, ash))
            if b.requires_grad or b._parents:
                _accumulate(b, _unbroadcast(g, bsh))
        return run

    return _result(a.data + b.data, (a, b), bwd)


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    if not isinstance(a, Tensor):
        return add(neg(b), a)
    _check_same_dtype(a, b)

    def bwd():
        ash, bsh = a.shape, b.shape

        def run(g):
            if a.requires_grad or a._parents:
                _accumulate(a, _unbroadcast(g, ash))
            if b.requires_grad or b._parents:
                _accumulate(b, _unbroadcast(-g, bsh))
        return run

    return _result(a.data - b.data, (a, b), bwd)


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    b = _coerce(b, a)
    _check_same_dtype(a, b)

    def bwd():
        ad, bd = a.data, b.data

        def run(g):
            if a.requires_grad or a._parents:
                _accumulate(a, _unbroadcast(g * bd, ad.shape))
            if b.requires_grad or b._parents:
                _accumulate(b, _unbroadcast(g * ad, bd.shape))
        return run

    return _result(a.data * b.data, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    def bwd():
        def run(g):
            _accumulate(a, -g)
        return run

    return _result(-a.data, (a,), bwd)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the trailing two axes."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs ndim >= 2, got {a.ndim} and {b.ndim}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    _check_same_dtype(a, b)

    def bwd():
        ad, bd = a.data, b.data

        def run(g):
            if a.requires_grad or a._parents:
                ga = np.matmul(g, bd.swapaxes(-1, -2))
                _accumulate(a, _unbroadcast(ga, ad.shape))
            if b.requires_grad or b._parents:
                gb = np.matmul(ad.swapaxes(-1, -2), g)
                _accumulate(b, _unbroadcast(gb, bd.shape))
        return run

    return _result(np.matmul(a.data, b.data), (a, b), bwd)


def _conv1x1(x: Tensor, w: Tensor, bias: Tensor | None,
             sample_bias: Tensor | None) -> Tensor:
    """Pointwise convolution as a single batched GEMM; no window extraction."""
    B, Cin, H, W = x.shape
    Cout = w.shape[0]
    wmat = w.data.reshape(Cout, Cin)
    xm = x.data.reshape(B, Cin, H * W)
    out = np.matmul(wmat, xm)
    if bias is not None:
        out += bias.data.reshape(Cout, 1)
    if sample_bias is not None:
        out += sample_bias.data[:, :, None]
    out = out.reshape(B, Cout, H, W)

    def bwd():
        def run(g):
            gm = g.reshape(B, Cout, H * W)
            if bias is not None and (bias.requires_grad or bias._parents):
                _accumulate(bias, gm.sum(axis=(0, 2)))
            if sample_bias is not None and (sample_bias.requires_grad
                                            or sample_bias._parents):
                _accumulate(sample_bias, gm.sum(axis=2))
            if w.requires_grad or w._parents:
                gw = np.matmul(gm, xm.transpose(0, 2, 1)).sum(axis=0)
                _accumulate(w, gw.reshape(w.shape))
            if x.requires_grad or x._parents:
                gx = np.matmul(wmat.T, gm).reshape(x.shape)
                _accumulate(x, gx)
        return run

    parents = [x, w]
    if bias is not None:
        parents.append(bias)
    if sample_bias is not None:
        parents.append(sample_bias)
    return _result(out, tuple(parents), bwd)


def _im2col(arr: np.ndarray, k: int, stride: int) -> np.ndarray:
    """Patch matrix (C*k*k, B*Ho*Wo) of a padded (B, C, Hp, Wp) array.

    Channel-major layout keeps the innermost gather runs a full row wide,
    which is what makes the copy fast.
    """
    win = np.lib.stride_tricks.sliding_window_view(arr, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]                      # B,C,Ho,Wo,k,k
    b, c, ho, wo = win.shape[:4]
    cols = np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3))
    return cols.reshape(c * k * k, b * ho * wo)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0,
           bias: Tensor | None = None,
           sample_bias: Tensor | None = None) -> Tensor:
    """2-d cross-correlation of x:[B,Cin,H,W] with w:[Cout,Cin,k,k].

    Optional per-output-channel bias [Cout] and per-sample channel bias
    [B,Cout] are folded into the same node so the broadcast adds do not cost
    extra full-size intermediates.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input/kernel, got {x.shape} and {w.shape}")
    B, Cin, H, W = x.shape
    Cout, Cin_w, kh, kw = w.shape
    if kh != kw:
        raise ValueError(f"conv2d kernel must be square, got {kh}x{kw}")
    k = kh
    if k % 2 == 0:
        raise ValueError(f"conv2d kernel size must be odd, got {k}")
    if Cin != Cin_w:
        raise ValueError(f"conv2d channel mismatch: input has {Cin}, kernel expects {Cin_w}")
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d needs stride >= 1 and pad >= 0, got {stride}, {pad}")
    if (H + 2 * pad - k) % stride or (W + 2 * pad - k) % stride:
        raise ValueError(
            f"conv2d output size not exact: input {H}x{W}, k={k}, pad={pad}, stride={stride}")
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    _check_same_dtype(x, w)
    if bias is not None:
        _check_same_dtype(x, bias)
        if bias.shape != (Cout,):
            raise ValueError(f"conv2d bias must be [{Cout}], got {bias.shape}")
    if sample_bias is not None:
        _check_same_dtype(x, sample_bias)
        if sample_bias.shape != (B, Cout):
            raise ValueError(
                f"conv2d sample bias must be [{B},{Cout}], got {sample_bias.shape}")

    if k == 1 and stride == 1 and pad == 0:
        return _conv1x1(x, w, bias, sample_bias)

    xp = x.data
    if pad:
        xp = np.pad(xp, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = _im2col(xp, k, stride)                            # Cin*k*k, B*Ho*Wo
    wmat = w.data.reshape(Cout, Cin * k * k)
    out = wmat @ cols                                        # Cout, B*Ho*Wo
    if bias is not None:
        out += bias.data[:, None]
    if sample_bias is not None:
        out3 = out.reshape(Cout, B, Ho * Wo)
        out3 += sample_bias.data.T[:, :, None]
    out = np.ascontiguousarray(out.reshape(Cout, B, Ho, Wo).transpose(1, 0, 2, 3))

    def bwd():
        def run(g):
            gmat = np.ascontiguousarray(g.transpose(1, 0, 2, 3))
            gmat = gmat.reshape(Cout, B * Ho * Wo)
            if bias is not None and (bias.requires_grad or bias._parents):
                _accumulate(bias, gmat.sum(axis=1))
            if sample_bias is not None and (sample_bias.requires_grad
                                            or sample_bias._parents):
                _accumulate(sample_bias,
                            gmat.reshape(Cout, B, Ho * Wo).sum(axis=2).T)
            if w.requires_grad or w._parents:
                gw = (gmat @ cols.T).reshape(w.shape)
                _accumulate(w, gw)
            if x.requires_grad or x._parents:
                if stride == 1 and pad < k:
                    # d(input) is itself a correlation: pad the output grad by
                    # k-1-pad and run it against the flipped, axis-swapped kernel.
                    q = k - 1 - pad
                    gp = np.pad(g, ((0, 0), (0, 0), (q, q), (q, q))) if q else g
                    gcols = _im2col(gp, k, 1)                # Cout*k*k, B*H*W
                    wflip = np.ascontiguousarray(
                        w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
                    gx = wflip.reshape(Cin, Cout * k * k) @ gcols
                    gx = np.ascontiguousarray(
                        gx.reshape(Cin, B, H, W).transpose(1, 0, 2, 3))
                else:
                    gcols = (wmat.T @ gmat).reshape(Cin, k, k, B, Ho, Wo)
                    gcols = gcols.transpose(3, 0, 1, 2, 4, 5)
                    gx = np.zeros((B, Cin, H + 2 * pad, W + 2 * pad), dtype=g.dtype)
                    for ky in range(k):
                        for kx in range(k):
                            gx[:, :, ky:ky + stride * Ho:stride,
                               kx:kx + stride * Wo:stride] += gcols[:, :, ky, kx]
                    if pad:
                        gx = gx[:, :, pad:H + pad, pad:W + pad]
                    gx = np.ascontiguousarray(gx)
                _accumulate(x, gx)
        return run

    parents = [x, w]
    if bias is not None:
        parents.append(bias)
    if sample_bias is not None:
        parents.append(sample_bias)
    return _result(out, tuple(parents), bwd)


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(D)) v over batched token sequences [B,L,D]."""
    if q.ndim != 3 or k.ndim != 3 or v.ndim != 3:
        raise ValueError(f"attention expects [B,L,D] operands, got "
                         f"{q.shape}, {k.shape}, {v.shape}")
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"attention dim mismatch: Q has D={q.shape[-1]}, "
                         f"K has D={k.shape[-1]}")
    if k.shape[1] != v.shape[1]:
        raise ValueError(f"attention K/V length mismatch: {k.shape} vs {v.shape}")
    if k.shape[1] < 1:
        raise ValueError("attention needs at least one key")
    d = q.shape[-1]
    logits = mul(matmul(q, transpose(k, (0, 2, 1))), 1.0 / math.sqrt(d))
    return matmul(softmax(logits, axis=-1), v)


# ---------------------------------------------------------------------------
# normalization and nonlinearities
# ---------------------------------------------------------------------------

def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (no affine)."""
    if eps <= 0:
        raise ValueError(f"layer_norm needs eps > 0, got {eps}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=xd.dtype))
    y = xc * inv

    def bwd():
        def run(g):
            gm = g.mean(axis=-1, keepdims=True)
            gym = (g * y).mean(axis=-1, keepdims=True)
            _accumulate(x, inv * (g - gm - y * gym))
        return run

    return _result(y, (x,), bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Row-max-subtracted stabilized softmax along one axis."""
    xd = x.data
    z = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd():
        def run(g):
            dot = (g * y).sum(axis=axis, keepdims=True)
            _accumulate(x, y * (g - dot))
        return run

    return _result(y, (x,), bwd)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-form GELU: 0.5 x (1 + tanh(c (x + 0.044715 x^3)))."""
    xd = x.data
    u = 0.044715 * xd
    u *= xd
    u *= xd
    u += xd
    u *= _GELU_C
    t = np.tanh(u)
    y = 0.5 * xd
    y *= 1.0 + t

    def bwd():
        def run(g):
            # dy = 0.5 (1 + t) + 0.5 x (1 - t^2) c (1 + 3*0.044715 x^2),
            # built in place to avoid a chain of full-size temporaries.
            d = xd * xd
            d *= 3.0 * 0.044715
            d += 1.0
            d *= _GELU_C
            d *= xd
            tt = t * t
            np.subtract(1.0, tt, out=tt)
            d *= tt
            d += t
            d += 1.0
            d *= 0.5
            d *= g
            _accumulate(x, d)
        return run

    return _result(y, (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    y = np.empty_like(xd)
    pos = xd >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    y[~pos] = ex / (1.0 + ex)

    def bwd():
        def run(g):
            _accumulate(x, g * (y * (1.0 - y)))
        return run

    return _result(y, (x,), bwd)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def bwd():
        def run(g):
            _accumulate(x, g * (1.0 - y * y))
        return run

    return _result(y, (x,), bwd)


# ---------------------------------------------------------------------------
# shape plumbing
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def bwd():
        orig = x.shape

        def run(g):
            _accumulate(x, g.reshape(orig))
        return run

    return _result(np.ascontiguousarray(x.data.reshape(shape)), (x,), bwd)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bwd():
        def run(g):
            _accumulate(x, np.ascontiguousarray(g.transpose(inv)))
        return run

    return _result(np.ascontiguousarray(x.data.transpose(axes)), (x,), bwd)


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    _check_same_dtype(*tensors)
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)

    def bwd():
        sizes = [d.shape[axis] for d in datas]
        offsets = np.cumsum([0] + sizes)

        def run(g):
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad or t._parents:
                    idx = [slice(None)] * g.ndim
                    idx[axis] = slice(lo, hi)
                    _accumulate(t, np.ascontiguousarray(g[tuple(idx)]))
        return run

    return _result(out, tuple(tensors), bwd)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)
    out = np.asarray(out, dtype=x.dtype)

    def bwd():
        sh = x.shape

        def run(g):
            if axis is None:
                gg = g.reshape((1,) * len(sh)) if sh else g
            elif keepdims:
                gg = g
            else:
                gg = np.expand_dims(g, axis)
            _accumulate(x, np.broadcast_to(gg, sh).copy())
        return run

    return _result(out, (x,), bwd)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = 1
        for a in axes:
            count *= x.shape[a]
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error between two same-shape tensors."""
    if a.shape != b.shape:
        raise ValueError(f"mse shape mismatch: {a.shape} vs {b.shape}")
    d = sub(a, b)
    return tmean(mul(d, d))


# ---------------------------------------------------------------------------
# spatial resampling
# ---------------------------------------------------------------------------

def avg_pool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k x k mean pooling on [B,C,H,W]."""
    if x.ndim != 4:
        raise ValueError(f"avg_pool2d expects [B,C,H,W], got {x.shape}")
    B, C, H, W = x.shape
    if k < 1 or H % k or W % k:
        raise ValueError(f"avg_pool2d window {k} does not tile {H}x{W}")
    y = x.data.reshape(B, C, H // k, k, W // k, k).mean(axis=(3, 5))

    def bwd():
        def run(g):
            gx = np.repeat(np.repeat(g, k, axis=2), k, axis=3) * (1.0 / (k * k))
            _accumulate(x, gx.astype(g.dtype, copy=False))
        return run

    return _result(np.ascontiguousarray(y), (x,), bwd)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Integer-factor nearest-neighbor upsampling on [B,C,H,W]."""
    if x.ndim != 4:
        raise ValueError(f"upsample_nearest expects [B,C,H,W], got {x.shape}")
    if factor < 1:
        raise ValueError(f"upsample_nearest factor must be >= 1, got {factor}")
    y = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def bwd():
        B, C, H, W = x.shape

        def run(g):
            gx = g.reshape(B, C, H, factor, W, factor).sum(axis=(3, 5))
            _accumulate(x, gx)
        return run

    return _result(np.ascontiguousarray(y), (x,), bwd)


# ---------------------------------------------------------------------------
# deterministic RNG (SplitMix64 over a counter)
# ---------------------------------------------------------------------------

_U64 = np.uint64
_MASK = (1 << 64) - 1
_GOLD = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def _mix64(z: int) -> int:
    """Scalar SplitMix64 finalizer on python ints."""
    z = (z + _GOLD) & _MASK
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK
    return z ^ (z >> 31)


class Rng:
    """Counter-based SplitMix64 stream.

    Word i of stream(seed) is splitmix64(seed + (i+1)*golden); the counter
    advances with every draw, so the sequence depends only on the seed and
    the order of calls. All arithmetic is exact uint64, identical on every
    platform.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK
        self._counter = 0

    def _raw(self, n: int) -> np.ndarray:
        idx = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        z = _U64(self.seed) + idx * _U64(_GOLD)
        z = (z ^ (z >> _U64(30))) * _U64(_MIX1)
        z = (z ^ (z >> _U64(27))) * _U64(_MIX2)
        return z ^ (z >> _U64(31))

    def uniform(self, shape=(), dtype="f64") -> np.ndarray:
        """Uniform draws in [0, 1)."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        u = (self._raw(n) >> _U64(11)).astype(np.float64) * (2.0 ** -53)
        return u.reshape(shape).astype(_as_dtype(dtype), copy=False)

    def normal(self, shape=(), dtype="f64", mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        """Box-Muller standard normals, scaled and shifted."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        m = (n + 1) // 2
        u1 = ((self._raw(m) >> _U64(11)).astype(np.float64) + 1.0) * (2.0 ** -53)
        u2 = (self._raw(m) >> _U64(11)).astype(np.float64) * (2.0 ** -53)
        r = np.sqrt(-2.0 * np.log(u1))
        ang = (2.0 * math.pi) * u2
        z = np.concatenate([r * np.cos(ang), r * np.sin(ang)])[:n]
        z = z * std + mean
        return z.reshape(shape).astype(_as_dtype(dtype), copy=False)

    def integers(self, lo: int, hi: int, shape=()) -> np.ndarray:
        """Integers in [lo, hi) via scaled uniforms (bias < 2^-40 for toy ranges)."""
        if hi <= lo:
            raise ValueError(f"integers needs hi > lo, got [{lo}, {hi})")
        u = self.uniform(shape, dtype="f64")
        return (lo + np.floor(u * (hi - lo))).astype(np.int64)

    def spawn(self, tag: int) -> "Rng":
        """Independent child stream keyed by (seed, tag)."""
        return Rng(_mix64(self.seed ^ _mix64(int(tag) & _MASK)))


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------

class GradCheckError(ValueError):
    pass


def grad_check(f, x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference grads.

    f maps x to a scalar Tensor. Error per coordinate is
    |a - n| / max(1e-8, |a| + |n|); the max over coordinates is returned.
    """
    if x.dtype != F64:
        raise ValueError("grad_check requires f64 input")
    was = x.requires_grad
    x.requires_grad = True
    x.grad = None
    try:
        out = f(x)
        if not isinstance(out, Tensor) or out.size != 1:
            raise ValueError("grad_check needs a scalar-valued f")
        out.backward()
        analytic = (x.grad if x.grad is not None else np.zeros_like(x.data)).copy()
    finally:
        x.requires_grad = was
        x.grad = None

    flat = x.data.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        fp = float(f(x).data.reshape(()))
        flat[i] = keep - eps
        fm = float(f(x).data.reshape(()))
        flat[i] = keep
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise GradCheckError(f"non-finite probe at coordinate {i}: f(+)={fp}, f(-)={fm}")
        numeric = (fp - fm) / (2.0 * eps)
        a = float(analytic.reshape(-1)[i])
        err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
        if err > worst:
            worst = err
    return worst
