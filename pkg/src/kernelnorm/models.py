"""VGG-9, ResNet-8, PreactResNet-18 and ResNet-18 in batch/group/layer/instance/kernel flavors."""
from __future__ import annotations

import json
import os
from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np

from .layers import (EVAL, Activation, AdaptiveAvgPool2d, BatchNorm2d, Context, Conv2d, Flatten,
                     GroupNorm, KernelNorm, KNConv2d, Linear, MaxPool2d, Module, Residual,
                     Sequential)
from .rng import Rng
from .serialize import load_tensor, save_tensor

NORM_KINDS = ("batch", "group", "layer", "instance", "kernel")
ARCHITECTURES = ("vgg9", "resnet8", "preact_resnet18", "resnet18")

FINAL_KN_DROPOUT = {"vgg9": 0.5, "preact_resnet18": 0.5, "resnet18": 0.5, "resnet8": 0.25}
INNER_KN_DROPOUT = 0.1
DEFAULT_CLASSES = {"vgg9": 100, "preact_resnet18": 100, "resnet18": 10, "resnet8": 10}
DEFAULT_INPUT = {"vgg9": 32, "preact_resnet18": 32, "resnet18": 160, "resnet8": 32}
_INIT_STREAM = 0x1A17


@dataclass
class ModelSpec:
    architecture: str = "resnet8"
    norm: str = "kernel"
    num_classes: int | None = None
    final_kn_dropout: float | None = None
    inner_kn_dropout: float = INNER_KN_DROPOUT
    group_size: int = 32
    width: float = 1.0
    input_size: int | None = None
    kn_mode: str = "efficient"

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.norm not in NORM_KINDS:
            raise ValueError(f"unknown norm kind {self.norm!r}")
        if self.num_classes is None:
            self.num_classes = DEFAULT_CLASSES[self.architecture]
        if self.final_kn_dropout is None:
            self.final_kn_dropout = FINAL_KN_DROPOUT[self.architecture]
        if self.input_size is None:
            self.input_size = DEFAULT_INPUT[self.architecture]

    def channels(self, c: int) -> int:
        return max(1, int(round(c * self.width)))


class LayerGraph:
    """A built model: module tree, parameter registry and buffers.

    Building assigns every module a stable ``layer_id`` (its position in the
    traversal), initializes parameters from the seed, and chain-checks shapes.
    """

    def __init__(self, root: Module, input_shape, seed: int = 0, dtype=np.float32,
                 spec: ModelSpec | None = None):
        self.root = root
        self.input_shape = tuple(input_shape)
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.spec = spec
        rng = Rng(seed)
        for idx, (_, mod) in enumerate(root.modules()):
            mod.layer_id = idx
            mod.init_parameters(rng.stream(_INIT_STREAM, idx), self.dtype)
        self.output_shape = root.out_shape(self.input_shape)

    def __call__(self, x, ctx: Context = EVAL):
        return self.root(x, ctx)

    forward = __call__

    def modules(self):
        return list(self.root.modules())

    def named_parameters(self) -> "OrderedDict[str, object]":
        return OrderedDict(self.root.named_parameters())

    def parameters(self):
        return list(self.named_parameters().values())

    def named_buffers(self):
        return OrderedDict(self.root.named_buffers())

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def count_modules(self, *types) -> int:
        return sum(isinstance(m, types) for _, m in self.root.modules())

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((k, p.data.copy()) for k, p in self.named_parameters().items())
        for k, b in self.named_buffers().items():
            state[k] = b.copy()
        return state

    def load_state_dict(self, state) -> None:
        params, buffers = self.named_parameters(), self.named_buffers()
        missing = set(params) | set(buffers)
        for k, v in state.items():
            if k in params:
                params[k].data = np.array(v, dtype=params[k].dtype).reshape(params[k].shape)
            elif k in buffers:
                buffers[k][...] = v
            else:
                raise KeyError(f"unexpected key {k!r} in state")
            missing.discard(k)
        if missing:
            raise KeyError(f"missing keys in state: {sorted(missing)}")


# ---------------------------------------------------------------- blocks

def norm_layer(kind: str, channels: int, group_size: int = 32) -> Module:
    if kind == "batch":
        return BatchNorm2d(channels)
    if kind == "group":
        return GroupNorm(channels, max(1, channels // group_size))
    if kind == "layer":
        return GroupNorm(channels, 1)
    if kind == "instance":
        return GroupNorm(channels, channels)
    raise ValueError(f"{kind!r} is not an affine norm kind")


def build_kn_vgg_block(ch_in, ch_out, with_maxpool=False, activation="relu",
                       dropout_p=INNER_KN_DROPOUT, kn_mode="efficient") -> Sequential:
    """3x3 KNConv (stride 1, pad 1) + activation; optionally KernelNorm + 2x2 max-pool."""
    layers = [KNConv2d(ch_in, ch_out, 3, 1, 1, dropout_p, mode=kn_mode), Activation(activation)]
    names = ["conv", "act"]
    if with_maxpool:
        layers += [KernelNorm(2, 2, 0, dropout_p), MaxPool2d(2)]
        names += ["norm", "pool"]
    return Sequential(*layers, names=names)


def build_kn_basic_block(ch_in, ch_out, shortcut="identity", activation="relu",
                         dropout_p=INNER_KN_DROPOUT, kn_mode="efficient") -> Residual:
    """Kernel-normalized residual block.

    identity: ``act(KNConv(act(KNConv(x)))) + x``.
    conv: the main path ends with KernelNorm and a 2x2 max-pool, and the skip
    path is a 2x2 stride-2 unpadded KNConv; both halve the spatial extent.
    """
    main = [KNConv2d(ch_in, ch_out, 3, 1, 1, dropout_p, mode=kn_mode), Activation(activation),
            KNConv2d(ch_out, ch_out, 3, 1, 1, dropout_p, mode=kn_mode), Activation(activation)]
    names = ["conv1", "act1", "conv2", "act2"]
    if shortcut == "identity":
        if ch_in != ch_out:
            raise ValueError("identity shortcut needs ch_in == ch_out")
        return Residual(Sequential(*main, names=names))
    if shortcut != "conv":
        raise ValueError(f"unknown shortcut {shortcut!r}")
    main += [KernelNorm(2, 2, 0, dropout_p), MaxPool2d(2)]
    names += ["norm", "pool"]
    skip = KNConv2d(ch_in, ch_out, 2, 2, 0, dropout_p, mode=kn_mode)
    return Residual(Sequential(*main, names=names), shortcut=skip)


def _spatial(layers, input_size) -> int:
    return Sequential(*layers).out_shape((1, 3, input_size, input_size))[2]


def _final_kernel_norm(size: int, dropout_p: float) -> KernelNorm:
    # 2x2 non-overlapping units; odd maps get one ring of zero padding
    return KernelNorm(2, 2, 0 if size % 2 == 0 else 1, dropout_p)


def _conv_norm_act(kind, cin, cout, act, gs, stride=1, kernel=3, padding=1):
    return [Conv2d(cin, cout, kernel, stride, padding, bias=False), norm_layer(kind, cout, gs),
            Activation(act)]


# ---------------------------------------------------------------- ResNet-8

def _resnet8(spec: ModelSpec) -> Module:
    c64, c128, c256 = spec.channels(64), spec.channels(128), spec.channels(256)
    kind, act, gs = spec.norm, "mish", spec.group_size

    if kind == "kernel":
        p = spec.inner_kn_dropout

        def unit(cin, cout):
            return [KNConv2d(cin, cout, 3, 1, 1, p, mode=spec.kn_mode), Activation(act)]

        def unit_names(prefix):
            return [f"{prefix}.conv", f"{prefix}.act"]
    else:
        def unit(cin, cout):
            return _conv_norm_act(kind, cin, cout, act, gs)

        def unit_names(prefix):
            return [f"{prefix}.conv", f"{prefix}.norm", f"{prefix}.act"]

    def res(c, name):
        return Residual(Sequential(*unit(c, c), *unit(c, c),
                                   names=unit_names("a") + unit_names("b")))

    layers = unit(3, c64) + unit(c64, c128) + [MaxPool2d(2), res(c128, "res1")]
    names = unit_names("l1") + unit_names("l2") + ["pool1", "res1"]
    layers += unit(c128, c256) + [MaxPool2d(2), res(c256, "res2"), MaxPool2d(2)]
    names += unit_names("l3") + ["pool2", "res2", "pool3"]
    if kind == "kernel":
        layers.append(_final_kernel_norm(_spatial(layers, spec.input_size),
                                         spec.final_kn_dropout))
        names.append("final_norm")
    layers += [AdaptiveAvgPool2d((2, 2)), Flatten(), Linear(c256 * 4, spec.num_classes)]
    names += ["avgpool", "flatten", "fc"]
    return Sequential(*layers, names=names)


# ---------------------------------------------------------------- VGG-9

_VGG9 = [64, "M", 128, "M", 256, 256, "M", 512, 512, "M", 512, 512]


def _vgg9(spec: ModelSpec) -> Module:
    layers, names = [], []
    cin = 3
    for i, v in enumerate(_VGG9):
        if v == "M":
            continue
        cout = spec.channels(v)
        pool = i + 1 < len(_VGG9) and _VGG9[i + 1] == "M"
        if spec.norm == "kernel":
            layers.append(build_kn_vgg_block(cin, cout, pool, "relu", spec.inner_kn_dropout,
                                             spec.kn_mode))
        else:
            block = _conv_norm_act(spec.norm, cin, cout, "relu", spec.group_size)
            if pool:
                block.append(MaxPool2d(2))
            layers.append(Sequential(*block, names=["conv", "norm", "act", "pool"][:len(block)]))
        names.append(f"block{len(names) + 1}")
        cin = cout
    size = _spatial(layers, spec.input_size)
    if spec.norm == "kernel":
        layers.append(_final_kernel_norm(size, spec.final_kn_dropout))
        names.append("final_norm")
    layers += [Flatten(), Linear(cin * size * size, spec.num_classes)]
    names += ["flatten", "fc"]
    return Sequential(*layers, names=names)


# ---------------------------------------------------------------- ResNet-18 family

def _stage_plan(spec):
    widths = [spec.channels(c) for c in (64, 128, 256, 512)]
    return widths, [1, 2, 2, 2]


def _preact_block(kind, cin, cout, stride, gs):
    pre = [norm_layer(kind, cin, gs), Activation("relu")]
    body = [Conv2d(cin, cout, 3, stride, 1, bias=False), norm_layer(kind, cout, gs),
            Activation("relu"), Conv2d(cout, cout, 3, 1, 1, bias=False)]
    body_names = ["conv1", "norm2", "act2", "conv2"]
    if stride != 1 or cin != cout:
        skip = Conv2d(cin, cout, 1, stride, 0, bias=False)
        return Sequential(Sequential(*pre, names=["norm1", "act1"]),
                          Residual(Sequential(*body, names=body_names), shortcut=skip),
                          names=["pre", "res"])
    return Residual(Sequential(*pre, *body, names=["norm1", "act1"] + body_names))


def _basic_block(kind, cin, cout, stride, gs):
    body = [Conv2d(cin, cout, 3, stride, 1, bias=False), norm_layer(kind, cout, gs),
            Activation("relu"), Conv2d(cout, cout, 3, 1, 1, bias=False), norm_layer(kind, cout, gs)]
    skip = None
    if stride != 1 or cin != cout:
        skip = Sequential(Conv2d(cin, cout, 1, stride, 0, bias=False), norm_layer(kind, cout, gs),
                          names=["conv", "norm"])
    return Residual(Sequential(*body, names=["conv1", "norm1", "act1", "conv2", "norm2"]),
                    shortcut=skip, post=Activation("relu"))


def _kn_stages(spec, cin, layers, names):
    widths, strides = _stage_plan(spec)
    for s, (cout, stride) in enumerate(zip(widths, strides)):
        for b in range(2):
            down = b == 0 and (stride != 1 or cin != cout)
            layers.append(build_kn_basic_block(cin, cout, "conv" if down else "identity", "relu",
                                               spec.inner_kn_dropout, spec.kn_mode))
            names.append(f"layer{s + 1}.{b}")
            cin = cout
    return cin


def _preact_resnet18(spec: ModelSpec) -> Module:
    kind, gs, size = spec.norm, spec.group_size, spec.input_size
    c0 = spec.channels(64)
    if kind == "kernel":
        layers = [KNConv2d(3, c0, 3, 1, 1, spec.inner_kn_dropout, mode=spec.kn_mode),
                  Activation("relu")]
        names = ["stem.conv", "stem.act"]
        cin = _kn_stages(spec, c0, layers, names)
        layers.append(_final_kernel_norm(_spatial(layers, size), spec.final_kn_dropout))
        names.append("final_norm")
    else:
        layers, names = [Conv2d(3, c0, 3, 1, 1, bias=False)], ["stem.conv"]
        cin = c0
        widths, strides = _stage_plan(spec)
        for s, (cout, stride) in enumerate(zip(widths, strides)):
            for b in range(2):
                layers.append(_preact_block(kind, cin, cout, stride if b == 0 else 1, gs))
                names.append(f"layer{s + 1}.{b}")
                cin = cout
        layers += [norm_layer(kind, cin, gs), Activation("relu")]
        names += ["final_norm", "final_act"]
    layers += [AdaptiveAvgPool2d(1), Flatten(), Linear(cin, spec.num_classes)]
    names += ["avgpool", "flatten", "fc"]
    return Sequential(*layers, names=names)


def _resnet18(spec: ModelSpec) -> Module:
    kind, gs, size = spec.norm, spec.group_size, spec.input_size
    c0 = spec.channels(64)
    if kind == "kernel":
        layers = [KNConv2d(3, c0, 7, 2, 3, spec.inner_kn_dropout, mode=spec.kn_mode),
                  Activation("relu")]
        layers += [_final_kernel_norm(_spatial(layers, size), spec.inner_kn_dropout),
                   MaxPool2d(3, 2, 1)]
        names = ["stem.conv", "stem.act", "stem.norm", "stem.pool"]
        cin = _kn_stages(spec, c0, layers, names)
        layers.append(_final_kernel_norm(_spatial(layers, size), spec.final_kn_dropout))
        names.append("final_norm")
    else:
        layers = _conv_norm_act(kind, 3, c0, "relu", gs, stride=2, kernel=7, padding=3)
        layers.append(MaxPool2d(3, 2, 1))
        names = ["stem.conv", "stem.norm", "stem.act", "stem.pool"]
        cin = c0
        widths, strides = _stage_plan(spec)
        for s, (cout, stride) in enumerate(zip(widths, strides)):
            for b in range(2):
                layers.append(_basic_block(kind, cin, cout, stride if b == 0 else 1, gs))
                names.append(f"layer{s + 1}.{b}")
                cin = cout
    layers += [AdaptiveAvgPool2d(1), Flatten(), Linear(cin, spec.num_classes)]
    names += ["avgpool", "flatten", "fc"]
    return Sequential(*layers, names=names)


_BUILDERS = {"resnet8": _resnet8, "vgg9": _vgg9, "preact_resnet18": _preact_resnet18,
             "resnet18": _resnet18}


def build_model(spec: ModelSpec, seed: int = 0, dtype=np.float32, batch: int = 1) -> LayerGraph:
    root = _BUILDERS[spec.architecture](spec)
    shape = (batch, 3, spec.input_size, spec.input_size)
    return LayerGraph(root, shape, seed, dtype, spec)


def build_resnet8(norm: str = "kernel", seed: int = 0, dtype=np.float32, **kw) -> LayerGraph:
    return build_model(ModelSpec("resnet8", norm, **kw), seed, dtype)


def build_vgg9(norm: str = "kernel", seed: int = 0, dtype=np.float32, **kw) -> LayerGraph:
    return build_model(ModelSpec("vgg9", norm, **kw), seed, dtype)


def build_preact_resnet18(norm: str = "kernel", seed: int = 0, dtype=np.float32, **kw) -> LayerGraph:
    return build_model(ModelSpec("preact_resnet18", norm, **kw), seed, dtype)


def build_resnet18(norm: str = "kernel", seed: int = 0, dtype=np.float32, **kw) -> LayerGraph:
    return build_model(ModelSpec("resnet18", norm, **kw), seed, dtype)


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(model: LayerGraph, directory, step: int = 0) -> None:
    os.makedirs(directory, exist_ok=True)
    state = model.state_dict()
    for name, value in state.items():
        save_tensor(os.path.join(directory, f"{name}.knt"), value)
    spec = model.spec
    manifest = {
        "architecture": spec.architecture if spec else None,
        "norm": spec.norm if spec else None,
        "seed": model.seed,
        "step": step,
        "dtype": model.dtype.name,
        "spec": asdict(spec) if spec else None,
        "tensors": list(state),
    }
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)


def load_checkpoint(directory) -> tuple[LayerGraph, dict]:
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    spec = ModelSpec(**manifest["spec"])
    model = build_model(spec, manifest["seed"], np.dtype(manifest["dtype"]))
    state = {name: load_tensor(os.path.join(directory, f"{name}.knt"))
             for name in manifest["tensors"]}
    model.load_state_dict(state)
    return model, manifest


__all__ = [
    "ModelSpec", "LayerGraph", "build_model", "build_resnet8", "build_vgg9",
    "build_preact_resnet18", "build_resnet18", "build_kn_vgg_block", "build_kn_basic_block",
    "norm_layer", "save_checkpoint", "load_checkpoint", "NORM_KINDS", "ARCHITECTURES",
]
