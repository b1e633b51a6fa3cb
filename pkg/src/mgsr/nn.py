"""Parameter containers and the Adam optimizer used by every trainable part."""

from __future__ import annotations

import math

import numpy as np

from .tensor import Rng, Tensor, add, conv2d, matmul, reshape


def glorot(rng: Rng, shape, fan_in: int, fan_out: int, dtype="f32") -> np.ndarray:
    std = math.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(shape, dtype=dtype, std=std)


class Conv2dLayer:
    """3x3/1x1 convolution with bias; pad defaults to 'same' for odd kernels."""

    def __init__(self, rng: Rng, cin: int, cout: int, k: int = 3, pad: int | None = None,
                 stride: int = 1, zero: bool = False, dtype="f32"):
        self.pad = k // 2 if pad is None else pad
        self.stride = stride
        if zero:
            w = np.zeros((cout, cin, k, k),
                         dtype=np.float64 if dtype == "f64" else np.float32)
        else:
            w = glorot(rng, (cout, cin, k, k), cin * k * k, cout * k * k, dtype=dtype)
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(cout, dtype=self.w.dtype), requires_grad=True)

    def __call__(self, x: Tensor, w_override: Tensor | None = None,
                 sample_bias: Tensor | None = None) -> Tensor:
        w = self.w if w_override is None else w_override
        return conv2d(x, w, stride=self.stride, pad=self.pad, bias=self.b,
                      sample_bias=sample_bias)

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}/w": self.w, f"{prefix}/b": self.b}


class LinearLayer:
    """Dense layer on the trailing axis; weight is (din, dout)."""

    def __init__(self, rng: Rng, din: int, dout: int, zero: bool = False,
                 bias: bool = True, dtype="f32"):
        if zero:
            w = np.zeros((din, dout), dtype=np.dtype("float64" if dtype == "f64" else "float32"))
        else:
            w = glorot(rng, (din, dout), din, dout, dtype=dtype)
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(dout, dtype=self.w.dtype), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        flat = x
        squeeze = False
        if x.ndim == 1:
            flat = reshape(x, (1, x.shape[0]))
            squeeze = True
        out = matmul(flat, self.w)
        if self.b is not None:
            out = add(out, self.b)
        if squeeze:
            out = reshape(out, (out.shape[-1],))
        return out

    def params(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}/w": self.w}
        if self.b is not None:
            out[f"{prefix}/b"] = self.b
        return out


def freeze(params: dict[str, Tensor]) -> dict[str, Tensor]:
    for p in params.values():
        p.requires_grad = False
    return params


class Adam:
    """Standard Adam; state is keyed by parameter name for exact resume."""

    def __init__(self, lr: float = 2.5e-4, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor]) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            if not p.requires_grad or p.grad is None:
                continue
            g = p.grad
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)

    def zero_grad(self, params: dict[str, Tensor]) -> None:
        for p in params.values():
            p.grad = None

    def state_tensors(self) -> dict[str, Tensor]:
        out = {"opt/t": Tensor(np.array([float(self.t)], dtype=np.float32))}
        for name, m in self.m.items():
            out[f"opt/m/{name}"] = Tensor(m)
            out[f"opt/v/{name}"] = Tensor(self.v[name])
        return out

    def load_state(self, tensors: dict[str, Tensor]) -> None:
        self.t = int(tensors["opt/t"].data[0])
        self.m = {}
        self.v = {}
        for name, t in tensors.items():
            if name.startswith("opt/m/"):
                self.m[name[len("opt/m/"):]] = t.data.copy()
            elif name.startswith("opt/v/"):
                self.v[name[len("opt/v/"):]] = t.data.copy()
