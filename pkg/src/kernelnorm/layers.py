"""Stateful layer wrappers around the functional ops."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import knconv, norm, ops
from .autograd import Tensor
from .rng import Rng, dropout_mask


@dataclass
class Context:
    """Per-forward settings: mode, randomness, and sample identity.

    Dropout masks are keyed by ``(layer_id, step, sample_id)`` so a sample's
    mask does not depend on which batch it arrives in.
    """

    training: bool = False
    rng: Rng | None = None
    step: int = 0
    sample_ids: Sequence[int] | None = None

    def keys(self, layer_id: int):
        return (layer_id, self.step)


EVAL = Context()


class Module:
    layer_id = 0

    def children(self) -> list[tuple[str, "Module"]]:
        return []

    def own_parameters(self) -> list[tuple[str, Tensor]]:
        return []

    def own_buffers(self) -> list[tuple[str, np.ndarray]]:
        return []

    def modules(self, prefix="") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self.children():
            yield from child.modules(f"{prefix}{name}.")

    def named_parameters(self, prefix="") -> Iterator[tuple[str, Tensor]]:
        for mprefix, mod in self.modules(prefix):
            for name, p in mod.own_parameters():
                yield mprefix + name, p

    def named_buffers(self, prefix="") -> Iterator[tuple[str, np.ndarray]]:
        for mprefix, mod in self.modules(prefix):
            for name, b in mod.own_buffers():
                yield mprefix + name, b

    def init_parameters(self, gen: np.random.Generator, dtype) -> None:
        pass

    def out_shape(self, shape):
        return shape

    def __call__(self, x: Tensor, ctx: Context = EVAL) -> Tensor:
        return self.forward(x, ctx)

    def forward(self, x, ctx):
        raise NotImplementedError


def _he_normal(gen, shape, fan_in, dtype):
    return (gen.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv2d(Module):
    def __init__(self, ch_in, ch_out, kernel=3, stride=1, padding=0, bias=True):
        self.ch_in, self.ch_out = ch_in, ch_out
        self.kernel, self.stride, self.padding = ops._pair(kernel), ops._pair(stride), ops._pair(padding)
        self.use_bias = bias
        self.weight = self.bias = None

    def own_parameters(self):
        out = [("weight", self.weight)]
        if self.use_bias:
            out.append(("bias", self.bias))
        return out

    def init_parameters(self, gen, dtype):
        kh, kw = self.kernel
        self.weight = Tensor(_he_normal(gen, (self.ch_out, self.ch_in, kh, kw),
                                        self.ch_in * kh * kw, dtype), requires_grad=True)
        if self.use_bias:
            self.bias = Tensor(np.zeros(self.ch_out, dtype=dtype), requires_grad=True)

    def out_shape(self, shape):
        n, c, h, w = shape
        if c != self.ch_in:
            raise ValueError(f"channel mismatch: {c} into {type(self).__name__}({self.ch_in})")
        oh, ow = ops.window_grid(h, w, self.kernel, self.stride, self.padding)
        return (n, self.ch_out, oh, ow)

    def forward(self, x, ctx):
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class KNConv2d(Conv2d):
    """Kernel-normalized convolution; ``mode`` picks the naive or efficient form."""

    def __init__(self, ch_in, ch_out, kernel=3, stride=1, padding=0, dropout_p=0.0, bias=True,
                 eps=1e-5, mode="efficient"):
        super().__init__(ch_in, ch_out, kernel, stride, padding, bias)
        if mode not in ("efficient", "naive"):
            raise ValueError(f"unknown KNConv mode {mode!r}")
        self.dropout_p, self.eps, self.mode = dropout_p, eps, mode

    def params(self) -> knconv.KnConvParams:
        return knconv.KnConvParams(self.ch_in, self.ch_out, self.weight,
                                   self.bias if self.use_bias else None, self.kernel,
                                   self.stride, self.padding, self.dropout_p, self.eps)

    def forward(self, x, ctx):
        fn = knconv.knconv_efficient if self.mode == "efficient" else knconv.knconv_naive
        return fn(x, self.params(), ctx.rng, ctx.training, ctx.keys(self.layer_id), ctx.sample_ids)


class KernelNorm(Module):
    def __init__(self, kernel=2, stride=None, padding=0, dropout_p=0.0, eps=1e-5):
        self.cfg = norm.KernelNormConfig(kernel, stride if stride is not None else kernel,
                                         padding, dropout_p, eps)

    def out_shape(self, shape):
        n, c, h, w = shape
        return (n, c, *norm.kernel_norm_output_shape(h, w, self.cfg))

    def forward(self, x, ctx):
        return norm.kernel_norm(x, self.cfg, ctx.rng, ctx.training, ctx.keys(self.layer_id),
                                ctx.sample_ids)


class _AffineNorm(Module):
    def __init__(self, channels, eps=1e-5):
        self.channels, self.eps = channels, eps
        self.weight = self.bias = None

    def own_parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def init_parameters(self, gen, dtype):
        self.weight = Tensor(np.ones(self.channels, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(self.channels, dtype=dtype), requires_grad=True)

    def out_shape(self, shape):
        if shape[1] != self.channels:
            raise ValueError(f"channel mismatch: {shape[1]} into {type(self).__name__}({self.channels})")
        return shape


class BatchNorm2d(_AffineNorm):
    def __init__(self, channels, eps=1e-5, momentum=0.1):
        super().__init__(channels, eps)
        self.momentum = momentum
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def own_buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]

    def forward(self, x, ctx):
        return norm.batch_norm(x, self.weight, self.bias, self.running_mean, self.running_var,
                               ctx.training, self.momentum, self.eps)


class GroupNorm(_AffineNorm):
    """Group normalization; ``groups=1`` is LayerNorm, ``groups=channels`` InstanceNorm."""

    def __init__(self, channels, groups, eps=1e-5):
        super().__init__(channels, eps)
        if groups < 1 or channels % groups:
            raise ValueError(f"{channels} channels not divisible into {groups} groups")
        self.groups = groups

    def forward(self, x, ctx):
        return norm.group_norm(x, self.groups, self.weight, self.bias, self.eps)


class Linear(Module):
    def __init__(self, fan_in, fan_out, bias=True):
        self.fan_in, self.fan_out, self.use_bias = fan_in, fan_out, bias
        self.weight = self.bias = None

    def own_parameters(self):
        out = [("weight", self.weight)]
        if self.use_bias:
            out.append(("bias", self.bias))
        return out

    def init_parameters(self, gen, dtype):
        self.weight = Tensor(_he_normal(gen, (self.fan_out, self.fan_in), self.fan_in, dtype),
                             requires_grad=True)
        if self.use_bias:
            self.bias = Tensor(np.zeros(self.fan_out, dtype=dtype), requires_grad=True)

    def out_shape(self, shape):
        if shape[1] != self.fan_in:
            raise ValueError(f"linear expects {self.fan_in} features, got {shape[1]}")
        return (shape[0], self.fan_out)

    def forward(self, x, ctx):
        return ops.linear(x, self.weight, self.bias)


class Activation(Module):
    def __init__(self, kind="relu"):
        if kind not in ("relu", "mish"):
            raise ValueError(f"unknown activation {kind!r}")
        self.kind = kind

    def forward(self, x, ctx):
        return ops.relu(x) if self.kind == "relu" else ops.mish(x)


class MaxPool2d(Module):
    def __init__(self, kernel=2, stride=None, padding=0):
        self.kernel = ops._pair(kernel)
        self.stride = ops._pair(stride if stride is not None else kernel)
        self.padding = ops._pair(padding)

    def out_shape(self, shape):
        n, c, h, w = shape
        return (n, c, *ops.window_grid(h, w, self.kernel, self.stride, self.padding))

    def forward(self, x, ctx):
        return ops.maxpool2d(x, self.kernel, self.stride, self.padding)


class AdaptiveAvgPool2d(Module):
    def __init__(self, output_size=(1, 1)):
        self.output_size = ops._pair(output_size)

    def out_shape(self, shape):
        return (shape[0], shape[1], *self.output_size)

    def forward(self, x, ctx):
        return ops.adaptive_avg_pool2d(x, self.output_size)


class Flatten(Module):
    def out_shape(self, shape):
        return (shape[0], int(np.prod(shape[1:])))

    def forward(self, x, ctx):
        return ops.flatten(x)


class Dropout(Module):
    def __init__(self, p=0.5):
        self.p = p

    def forward(self, x, ctx):
        if not ctx.training or self.p == 0.0:
            return x
        mask = dropout_mask(ctx.rng, self.p, x.shape, ctx.keys(self.layer_id), ctx.sample_ids,
                            dtype=x.dtype)
        return ops.dropout(x, mask)


class Sequential(Module):
    def __init__(self, *layers, names: Sequence[str] | None = None):
        names = names or [str(i) for i in range(len(layers))]
        self.layers = list(zip(names, layers))

    def children(self):
        return self.layers

    def out_shape(self, shape):
        for _, layer in self.layers:
            shape = layer.out_shape(shape)
        return shape

    def forward(self, x, ctx):
        for _, layer in self.layers:
            x = layer(x, ctx)
        return x


class Residual(Module):
    """``main(x) + shortcut(x)``; a missing shortcut is the identity."""

    def __init__(self, main: Module, shortcut: Module | None = None, post: Module | None = None):
        self.main, self.shortcut, self.post = main, shortcut, post

    def children(self):
        out = [("main", self.main)]
        if self.shortcut is not None:
            out.append(("shortcut", self.shortcut))
        if self.post is not None:
            out.append(("post", self.post))
        return out

    def out_shape(self, shape):
        main = self.main.out_shape(shape)
        skip = self.shortcut.out_shape(shape) if self.shortcut is not None else shape
        if main != skip:
            raise ValueError(f"residual branches disagree: {main} vs {skip}")
        return self.post.out_shape(main) if self.post is not None else main

    def forward(self, x, ctx):
        skip = self.shortcut(x, ctx) if self.shortcut is not None else x
        out = ops.add(self.main(x, ctx), skip)
        return self.post(out, ctx) if self.post is not None else out
