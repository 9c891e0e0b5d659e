"""Parameter containers and the two workhorse layers (conv, group norm)."""
from __future__ import annotations

import hashlib

import numpy as np

from .tensor import Tensor, conv2d, group_norm


class Parameter(Tensor):
    def __init__(self, data, trainable=True):
        super().__init__(np.array(data, dtype=np.float32), requires_grad=trainable)

    @property
    def trainable(self):
        return self.requires_grad

    @trainable.setter
    def trainable(self, flag):
        self.requires_grad = bool(flag)
        if not flag:
            self.grad = None


class Module:
    """Attribute-walking container: parameters are discovered in definition order."""

    def named_parameters(self, prefix=""):
        for key, value in vars(self).items():
            yield from _walk(value, f"{prefix}{key}")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if p.trainable]

    def set_trainable(self, flag):
        for p in self.parameters():
            p.trainable = flag
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _walk(value, name):
    if isinstance(value, Parameter):
        yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(prefix=name + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{name}.{i}")


def digest(params) -> str:
    """SHA-256 over (name, shape, bytes) of the given named parameters."""
    h = hashlib.sha256()
    for name, p in params:
        h.update(name.encode())
        h.update(str(p.data.shape).encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


def kaiming(rng, shape, fan_in, gain=np.sqrt(2.0)):
    return rng.standard_normal(shape) * (gain / np.sqrt(fan_in))


class Conv2d(Module):
    def __init__(self, cin, cout, kernel, rng, stride=1, pad=None, dilation=1,
                 groups=1, bias=True, trainable=True):
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        if pad is None:
            pad = (dilation * (kh - 1) // 2, dilation * (kw - 1) // 2)
        self.stride, self.pad, self.dilation, self.groups = stride, pad, dilation, groups
        fan_in = (cin // groups) * kh * kw
        self.weight = Parameter(kaiming(rng, (cout, cin // groups, kh, kw), fan_in), trainable)
        self.bias = Parameter(np.zeros(cout), trainable) if bias else None

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, self.stride, self.pad, self.dilation, self.groups)


def gn_groups(channels):
    """Eight groups where channel count allows groups of >= 4, else fewer."""
    g = max(1, min(8, channels // 4))
    while channels % g:
        g -= 1
    return g


class GroupNorm(Module):
    def __init__(self, channels, groups=None, eps=1e-5):
        self.groups = groups or gn_groups(channels)
        self.eps = eps
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))

    def forward(self, x):
        return group_norm(x, self.groups, self.gamma, self.beta, self.eps)
