"""Parameter containers and small trainable layers built on the tensor ops."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Minimal parameter container with recursive named-parameter walking."""

    def named_parameters(self, prefix: str = ""):
        for name, val in vars(self).items():
            if isinstance(val, Tensor):
                if val.requires_grad:
                    yield prefix + name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{name}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def astype(self, dtype):
        """Cast all parameters in place (float64 for gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def state_dict(self) -> dict:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise ValueError(f"state dict mismatch: missing {sorted(missing)}, "
                             f"unexpected {sorted(unexpected)}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.data.shape:
                raise ValueError(f"{name}: shape {arr.shape} != expected {p.data.shape}")
            p.data = arr.astype(p.data.dtype)


def _uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d(Module):
    def __init__(self, rng, in_ch, out_ch, kernel=3, stride=1, dtype=np.float32):
        fan_in = in_ch * kernel * kernel
        self.w = Tensor(_uniform(rng, (out_ch, in_ch, kernel, kernel), fan_in, dtype),
                        requires_grad=True)
        self.b = Tensor(_uniform(rng, (out_ch,), fan_in, dtype), requires_grad=True)
        self.stride = stride
        self.padding = kernel // 2

    def __call__(self, x):
        return T.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)


class Linear(Module):
    def __init__(self, rng, in_dim, out_dim, dtype=np.float32):
        self.w = Tensor(_uniform(rng, (in_dim, out_dim), in_dim, dtype), requires_grad=True)
        self.b = Tensor(_uniform(rng, (out_dim,), in_dim, dtype), requires_grad=True)

    def __call__(self, x):
        return T.linear(x, self.w, self.b)


class LayerNorm(Module):
    def __init__(self, dim, dtype=np.float32):
        self.gamma = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return T.layer_norm(x, self.gamma, self.beta)


class ResBlock(Module):
    """Two 3x3 convs with a skip: y = relu(x + conv2(relu(conv1(x))))."""

    def __init__(self, rng, ch, dtype=np.float32):
        self.conv1 = Conv2d(rng, ch, ch, 3, dtype=dtype)
        self.conv2 = Conv2d(rng, ch, ch, 3, dtype=dtype)

    def __call__(self, x):
        return T.relu(T.add(x, self.conv2(T.relu(self.conv1(x)))))
