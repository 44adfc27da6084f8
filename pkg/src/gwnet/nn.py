"""Minimal layer/module system over the autodiff tensors."""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import functional as F
from . import tensor as T
from .tensor import Tensor


def truncated_normal(rng: np.random.Generator, shape, std: float = 0.02,
                     dtype=np.float64) -> np.ndarray:
    """Normal(0, std) resampled until all draws fall within two sigma."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(dtype)


def _init_std(init: str, fan_in: int, std: float) -> float:
    if init == "trunc_normal":
        return std
    if init == "he":
        # fan-in scaling keeps activations alive in norm-free stacks
        return float(np.sqrt(2.0 / fan_in))
    raise ValueError(f"unknown init {init!r}")


class Parameter(Tensor):
    """Trainable tensor; stays a parameter even when frozen."""

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


class Module:
    """Container of parameters (trainable tensors) and buffers (state).

    Any :class:`Parameter` attribute is a parameter; any other Tensor
    attribute is a buffer.  Lists of modules are traversed in order.
    """

    def __init__(self):
        self.training = True

    def submodules(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
        for name, mod in self.submodules():
            yield from mod.named_parameters(prefix + name + ".")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and not isinstance(value, Parameter):
                yield prefix + name, value
        for name, mod in self.submodules():
            yield from mod.named_buffers(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_arrays(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update({name: b.data for name, b in self.named_buffers()})
        return state

    def load_state_arrays(self, state: dict[str, np.ndarray]):
        own = dict(self.named_parameters())
        own.update(dict(self.named_buffers()))
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise ValueError(
                f"state mismatch: missing={missing[:4]} extra={extra[:4]}")
        for name, tsr in own.items():
            arr = np.asarray(state[name])
            if arr.shape != tsr.data.shape:
                raise ValueError(
                    f"state {name}: shape {arr.shape} != {tsr.data.shape}")
            tsr.data = arr.astype(tsr.data.dtype)

    def train(self, mode: bool = True):
        self.training = mode
        for _, mod in self.submodules():
            mod.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, k: int, stride: int = 1,
                 padding: int = 0, rng: Optional[np.random.Generator] = None,
                 dtype=np.float64, init: str = "trunc_normal"):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        std = _init_std(init, in_ch * k * k, 0.02)
        self.weight = Parameter(
            truncated_normal(rng, (out_ch, in_ch, k, k), std=std, dtype=dtype))
        self.bias = Parameter(np.zeros(out_ch, dtype=dtype))
        self.stride = stride
        self.padding = padding

    def spec(self) -> F.ConvSpec:
        return F.ConvSpec(self.weight, self.stride, self.padding, self.bias)

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.spec())


class Deconv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, k: int, stride: int = 1,
                 padding: int = 0, output_padding: int = 0,
                 rng: Optional[np.random.Generator] = None, dtype=np.float64):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.weight = Parameter(
            truncated_normal(rng, (out_ch, in_ch, k, k), dtype=dtype))
        self.bias = Parameter(np.zeros(out_ch, dtype=dtype))
        self.stride = stride
        self.padding = padding
        self.output_padding = output_padding

    def spec(self) -> F.ConvSpec:
        return F.ConvSpec(self.weight, self.stride, self.padding, self.bias,
                          self.output_padding)

    def forward(self, x: Tensor) -> Tensor:
        return F.deconv2d(x, self.spec())


class Linear(Module):
    def __init__(self, in_f: int, out_f: int,
                 rng: Optional[np.random.Generator] = None, dtype=np.float64,
                 init: str = "trunc_normal"):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        std = _init_std(init, in_f, 0.02)
        self.weight = Parameter(
            truncated_normal(rng, (in_f, out_f), std=std, dtype=dtype))
        self.bias = Parameter(np.zeros(out_f, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return T.matmul(x, self.weight) + self.bias.reshape(1, -1)


class BatchNorm2d(Module):
    """Batch normalization with running statistics for inference."""

    def __init__(self, ch: int, eps: float = F.NORM_EPS, momentum: float = 0.1,
                 dtype=np.float64):
        super().__init__()
        self.gamma = Parameter(np.ones(ch, dtype=dtype))
        self.beta = Parameter(np.zeros(ch, dtype=dtype))
        self.running_mean = Tensor(np.zeros(ch, dtype=dtype))
        self.running_var = Tensor(np.ones(ch, dtype=dtype))
        self.eps = eps
        self.momentum = momentum

    def forward(self, x: Tensor) -> Tensor:
        if self.training:
            with T.no_grad():
                mu = x.data.mean(axis=(0, 2, 3))
                var = x.data.var(axis=(0, 2, 3))
                m = self.momentum
                self.running_mean.data = (1 - m) * self.running_mean.data + m * mu
                self.running_var.data = (1 - m) * self.running_var.data + m * var
            return F.normalize(x, "batch", self.gamma, self.beta, self.eps)
        return F.normalize_with_stats(x, self.running_mean, self.running_var,
                                      self.gamma, self.beta, self.eps)


class InstanceNorm2d(Module):
    def __init__(self, ch: int, eps: float = F.NORM_EPS, dtype=np.float64):
        super().__init__()
        self.gamma = Parameter(np.ones(ch, dtype=dtype))
        self.beta = Parameter(np.zeros(ch, dtype=dtype))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return F.normalize(x, "instance", self.gamma, self.beta, self.eps)


class LayerNorm2d(Module):
    def __init__(self, ch: int, eps: float = F.NORM_EPS, dtype=np.float64):
        super().__init__()
        self.gamma = Parameter(np.ones(ch, dtype=dtype))
        self.beta = Parameter(np.zeros(ch, dtype=dtype))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return F.normalize(x, "layer", self.gamma, self.beta, self.eps)


class Identity(Module):
    def forward(self, x: Tensor) -> Tensor:
        return x


def make_norm(kind: Optional[str], ch: int, dtype=np.float64) -> Module:
    if kind is None or kind == "none":
        return Identity()
    if kind == "batch":
        return BatchNorm2d(ch, dtype=dtype)
    if kind == "instance":
        return InstanceNorm2d(ch, dtype=dtype)
    if kind == "layer":
        return LayerNorm2d(ch, dtype=dtype)
    raise ValueError(f"unknown norm kind {kind!r}")


class Adam:
    """Adaptive-moment optimizer; slots are checkpointable arrays."""

    def __init__(self, params: list[Tensor], lr: float = 2e-4,
                 beta1: float = 0.5, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            m_hat = self.m[i] / bias1
            v_hat = self.v[i] / bias2
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def state_arrays(self, names: list[str]) -> dict[str, np.ndarray]:
        state: dict[str, np.ndarray] = {}
        for name, m, v in zip(names, self.m, self.v):
            state[name + ".adam_m"] = m
            state[name + ".adam_v"] = v
        return state

    def load_state_arrays(self, names: list[str], state: dict[str, np.ndarray],
                          t: int):
        self.t = t
        for i, name in enumerate(names):
            self.m[i] = np.asarray(state[name + ".adam_m"],
                                   dtype=self.params[i].data.dtype)
            self.v[i] = np.asarray(state[name + ".adam_v"],
                                   dtype=self.params[i].data.dtype)
