"""Parameterized layers on top of the autograd engine.

Parameters are materialized lazily from per-parameter seed streams, so
building a graph is cheap no matter the scale and the analytic cost counters
never touch parameter values. Materialization order does not affect the
values: each parameter owns its own child seed of the build seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .. import autograd as ag
from ..autograd import Tensor
from ..errors import CheckpointError, ConfigError, ShapeError


@dataclass
class Ctx:
    """Per-forward state: training toggles dropout/batch-stat paths."""

    training: bool = False
    rng: np.random.Generator | None = None


EVAL_CTX = Ctx(training=False, rng=None)


@dataclass
class CostRow:
    name: str
    kind: str
    macs: int
    params: int


class Parameter:
    """Lazily materialized trainable tensor."""

    def __init__(self, shape, kind, seed_seq, dtype, fan_in=None, fan_out=None):
        self.shape = tuple(int(s) for s in shape)
        self.kind = kind
        self._seed_seq = seed_seq
        self.dtype = dtype
        self.fan_in = fan_in
        self.fan_out = fan_out
        self._tensor = None

    @property
    def size(self):
        return int(np.prod(self.shape)) if self.shape else 1

    @property
    def tensor(self) -> Tensor:
        if self._tensor is None:
            self._tensor = Tensor(self._init_data(), requires_grad=True)
        return self._tensor

    def _init_data(self):
        rng = np.random.Generator(np.random.PCG64(self._seed_seq))
        if self.kind == "zeros":
            return np.zeros(self.shape, dtype=self.dtype)
        if self.kind == "ones":
            return np.ones(self.shape, dtype=self.dtype)
        if self.kind == "he_normal":
            std = math.sqrt(2.0 / self.fan_in)
            return (rng.standard_normal(self.shape) * std).astype(self.dtype)
        if self.kind == "xavier_uniform":
            limit = math.sqrt(6.0 / (self.fan_in + self.fan_out))
            return rng.uniform(-limit, limit, self.shape).astype(self.dtype)
        if self.kind == "normal002":
            return (rng.standard_normal(self.shape) * 0.02).astype(self.dtype)
        raise ConfigError(f"unknown parameter init kind {self.kind!r}")

    def load(self, arr):
        arr = np.asarray(arr)
        if tuple(arr.shape) != self.shape:
            raise ShapeError(f"parameter shape {self.shape} cannot load array {arr.shape}")
        self._tensor = Tensor(arr.astype(self.dtype), requires_grad=True)


class ParamInit:
    """Factory handing each created parameter its own deterministic seed."""

    def __init__(self, seed=0, dtype=np.float32):
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        self._counter = 0

    def param(self, shape, kind, fan_in=None, fan_out=None):
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=(self._counter,))
        self._counter += 1
        return Parameter(shape, kind, seq, self.dtype, fan_in, fan_out)


class Module:
    """Composable layer with named parameters, buffers and children."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name, arr):
        self._buffers[name] = np.asarray(arr)
        object.__setattr__(self, name, self._buffers[name])

    def set_buffer(self, name, arr):
        self._buffers[name] = np.asarray(arr)
        object.__setattr__(self, name, self._buffers[name])

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield (prefix + name, p)
        for cname, child in self._modules.items():
            yield from child.named_parameters(prefix + cname + ".")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def named_buffers(self, prefix=""):
        for name in self._buffers:
            yield (prefix + name, getattr(self, name))
        for cname, child in self._modules.items():
            yield from child.named_buffers(prefix + cname + ".")

    def param_count(self):
        return sum(p.size for p in self.parameters())

    def state_dict(self):
        state = {name: p.tensor.data for name, p in self.named_parameters()}
        state.update({name: buf for name, buf in self.named_buffers()})
        return state

    def load_state_dict(self, state):
        """Load matching names; unmatched model tensors keep their init.

        Shape mismatches are collected and reported together. Returns the
        lists (loaded, missing_from_file, ignored_file_keys).
        """
        params = dict(self.named_parameters())
        mismatched, loaded = [], []
        for name, arr in state.items():
            if name in params:
                if tuple(arr.shape) != params[name].shape:
                    mismatched.append(f"{name}: file {tuple(arr.shape)} vs model {params[name].shape}")
                else:
                    params[name].load(arr)
                    loaded.append(name)
            else:
                target = self._find_buffer(name)
                if target is not None:
                    mod, bname = target
                    if tuple(arr.shape) != getattr(mod, bname).shape:
                        mismatched.append(f"{name}: buffer shape mismatch {tuple(arr.shape)}")
                    else:
                        mod.set_buffer(bname, arr.astype(getattr(mod, bname).dtype))
                        loaded.append(name)
        if mismatched:
            raise CheckpointError("shape mismatch loading checkpoint: " + "; ".join(mismatched))
        missing = [n for n in params if n not in state]
        ignored = [n for n in state if n not in params and self._find_buffer(n) is None]
        return loaded, missing, ignored

    def _find_buffer(self, dotted):
        mod = self
        parts = dotted.split(".")
        for part in parts[:-1]:
            mod = mod._modules.get(part)
            if mod is None:
                return None
        return (mod, parts[-1]) if parts[-1] in mod._buffers else None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def trace(self, in_shape, prefix=""):
        """Shape-propagate without running; returns (out_shape, [CostRow])."""
        raise NotImplementedError


class Sequential(Module):
    def __init__(self, *modules):
        super().__init__()
        self.items = list(modules)
        for i, m in enumerate(modules):
            self._modules[str(i)] = m

    def forward(self, x, ctx=EVAL_CTX):
        for m in self.items:
            x = m(x, ctx)
        return x

    def trace(self, in_shape, prefix=""):
        rows = []
        for i, m in enumerate(self.items):
            in_shape, r = m.trace(in_shape, f"{prefix}{i}.")
            rows.extend(r)
        return in_shape, rows


class Linear(Module):
    def __init__(self, in_features, out_features, init, bias=True):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = init.param((in_features, out_features), "xavier_uniform",
                                 fan_in=in_features, fan_out=out_features)
        self.bias = init.param((out_features,), "zeros") if bias else None

    def forward(self, x, ctx=EVAL_CTX):
        y = ag.matmul(x, self.weight.tensor)
        if self.bias is not None:
            y = y + self.bias.tensor
        return y

    def trace(self, in_shape, prefix=""):
        if in_shape[-1] != self.in_features:
            raise ShapeError(f"{prefix}linear expects last dim {self.in_features}, got {in_shape}")
        out_shape = in_shape[:-1] + (self.out_features,)
        macs = int(np.prod(in_shape[:-1], dtype=np.int64)) * self.in_features * self.out_features
        params = self.weight.size + (self.bias.size if self.bias else 0)
        return out_shape, [CostRow(prefix + "linear", "linear", macs, params)]


class Conv(Module):
    """N-d convolution layer (cross-correlation), bias-free by default."""

    def __init__(self, in_channels, out_channels, kernel, init, stride=1, padding=0,
                 dims=2, bias=False):
        super().__init__()
        self.dims = dims
        kernel = kernel if isinstance(kernel, tuple) else (kernel,) * dims
        self.kernel = kernel
        self.stride = stride if isinstance(stride, tuple) else (stride,) * dims
        self.padding = padding if isinstance(padding, tuple) else (padding,) * dims
        self.in_channels = in_channels
        self.out_channels = out_channels
        fan_in = in_channels * int(np.prod(kernel))
        self.weight = init.param((out_channels, in_channels) + kernel, "he_normal", fan_in=fan_in)
        self.bias = init.param((out_channels,), "zeros") if bias else None

    def forward(self, x, ctx=EVAL_CTX):
        y = ag.conv_nd(x, self.weight.tensor, self.stride, self.padding)
        if self.bias is not None:
            b = ag.reshape(self.bias.tensor, (self.out_channels,) + (1,) * self.dims)
            y = y + b
        return y

    def out_extents(self, spatial):
        out = []
        for d, k, s, p in zip(spatial, self.kernel, self.stride, self.padding):
            e = (d + 2 * p - k) // s + 1
            if e < 1:
                raise ShapeError(f"conv over spatial {spatial} with kernel {self.kernel} "
                                 f"stride {self.stride} padding {self.padding} yields extent < 1")
            out.append(e)
        return tuple(out)

    def trace(self, in_shape, prefix=""):
        if in_shape[0] != self.in_channels:
            raise ShapeError(f"{prefix}conv expects {self.in_channels} channels, got {in_shape}")
        out_sp = self.out_extents(in_shape[1:])
        macs = (int(np.prod(self.kernel)) * self.in_channels * self.out_channels
                * int(np.prod(out_sp, dtype=np.int64)))
        params = self.weight.size + (self.bias.size if self.bias else 0)
        return (self.out_channels,) + out_sp, [CostRow(prefix + "conv", "conv", macs, params)]


class BatchNorm(Module):
    """Batch normalization with running statistics (momentum 0.1).

    Training mode normalizes with batch statistics over (batch, spatial) and
    updates the running estimates; eval mode uses the frozen running values.
    """

    def __init__(self, channels, init, dims=2, eps=1e-5, momentum=0.1):
        super().__init__()
        self.channels = channels
        self.dims = dims
        self.eps = eps
        self.momentum = momentum
        self.gamma = init.param((channels,), "ones")
        self.beta = init.param((channels,), "zeros")
        self.register_buffer("running_mean", np.zeros(channels, dtype=np.float64))
        self.register_buffer("running_var", np.ones(channels, dtype=np.float64))

    def forward(self, x, ctx=EVAL_CTX):
        if ctx.training:
            axes = (0,) + tuple(range(2, 2 + self.dims))
            y, mu, var = ag.batch_norm(x, self.gamma.tensor, self.beta.tensor,
                                       axes, self.eps)
            m = self.momentum
            self.set_buffer("running_mean", (1 - m) * self.running_mean + m * mu)
            self.set_buffer("running_var", (1 - m) * self.running_var + m * var)
            return y
        # eval: fold the frozen statistics into one scale/shift pair
        bshape = (1, self.channels) + (1,) * self.dims
        inv = (1.0 / np.sqrt(self.running_var + self.eps)).reshape(bshape)
        rm = self.running_mean.reshape(bshape)
        scale = ag.reshape(self.gamma.tensor, bshape) * inv.astype(x.dtype)
        shift = ag.reshape(self.beta.tensor, bshape) - scale * rm.astype(x.dtype)
        return x * scale + shift

    def trace(self, in_shape, prefix=""):
        return in_shape, [CostRow(prefix + "bn", "norm", 0, self.gamma.size + self.beta.size)]


class LayerNormModule(Module):
    def __init__(self, dim, init, eps=1e-5):
        super().__init__()
        self.dim = dim
        self.eps = eps
        self.gamma = init.param((dim,), "ones")
        self.beta = init.param((dim,), "zeros")

    def forward(self, x, ctx=EVAL_CTX):
        return ag.layer_norm(x, self.gamma.tensor, self.beta.tensor, self.eps, axis=-1)

    def trace(self, in_shape, prefix=""):
        return in_shape, [CostRow(prefix + "ln", "norm", 0, 2 * self.dim)]


class Dropout(Module):
    def __init__(self, rate):
        super().__init__()
        self.rate = rate

    def forward(self, x, ctx=EVAL_CTX):
        if not ctx.training or self.rate == 0.0:
            return x
        if ctx.rng is None:
            raise ConfigError("training-mode dropout requires a ctx rng")
        return ag.dropout(x, self.rate, ctx.rng)

    def trace(self, in_shape, prefix=""):
        return in_shape, []
