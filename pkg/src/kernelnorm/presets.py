"""Named run presets: tuned learning rates, clipping and batch sizes per setting.

Preset names read ``<dataset>-<arch>-b<batch>-<norm>`` (centralized and
federated) or ``cifar10-resnet8-dp-...`` for per-sample-gradient runs.
"""
from __future__ import annotations

_NORMS4 = ("batch", "group", "layer", "kernel")
_NORMS3 = ("group", "layer", "kernel")

# batch -> lr per norm, in _NORMS4 order
_VGG9 = {256: (1.0, 0.25, 0.25, 1.0), 32: (0.25, 0.0625, 0.0625, 0.125),
         2: (0.00390625, 0.00390625, 0.00390625, 0.0078125)}
_PREACT = {256: (0.1, 0.05, 0.05, 0.1), 32: (0.025, 0.0125, 0.0125, 0.05),
           2: (0.00078125, 0.0015625, 0.0015625, 0.0015625)}
_RESNET18_FED = {128: (0.1, 0.00625, 0.0125, 0.00625), 32: (0.1, 0.1, 0.00625, 0.003125),
                 8: (0.1, 0.003125, 0.003125, 0.003125)}
# _NORMS3 order; (lr, clip)
_DP_BATCH = {512: ((1.0, 1.0, 1.0), (1.0, 1.0, 1.0)),
             1024: ((2.0, 2.0, 1.5), (2.0, 2.0, 1.5)),
             2048: ((2.0, 2.0, 2.0), (2.0, 2.0, 2.0)),
             3072: ((2.0, 2.0, 2.0), (2.0, 2.0, 2.0))}
# epsilon -> (lr, clip, batch)
_DP_EPS = {2: ((2.0, 2.0, 2.0), (2.0, 2.0, 2.0), (2048, 2048, 4096)),
           4: ((2.0, 1.0, 2.0), (2.0, 1.5, 2.0), (1024, 1024, 3072)),
           6: ((1.5, 2.0, 2.0), (2.0, 2.0, 2.0), (1024, 2048, 2048)),
           8: ((2.0, 2.0, 2.0), (2.0, 2.0, 2.0), (2048, 1024, 3072))}

# Desk-scale budgets (CIFAR-10 subset, ResNet-8); not tuned beyond a smoke check.
_DESK_CENTRAL_LR = {"batch": 0.05, "group": 0.05, "layer": 0.05, "instance": 0.05, "kernel": 0.05}
_DESK_FED_LR = {"batch": 0.02, "group": 0.02, "layer": 0.02, "instance": 0.02, "kernel": 0.02}


def _build() -> dict[str, dict]:
    out: dict[str, dict] = {}
    central = dict(regime="train", momentum=0.9, weight_decay=1e-4, scheduler="cosine")
    for arch, table, data in (("vgg9", _VGG9, "cifar100"), ("preact_resnet18", _PREACT, "cifar100")):
        for b, lrs in table.items():
            for norm, lr in zip(_NORMS4, lrs):
                out[f"{data}-{arch}-b{b}-{norm}"] = dict(central, arch=arch, norm=norm, data=data,
                                                        batch=b, lr=lr)
    # Imagenette is not decoded here; these run on synthetic images at its 160-px geometry
    for b, lrs in _RESNET18_FED.items():
        for norm, lr in zip(_NORMS4, lrs):
            out[f"imagenette-resnet18-b{b}-{norm}"] = dict(
                regime="fed", arch="resnet18", norm=norm, data="synth", input_size=160,
                num_classes=10, batch=b, lr=lr, momentum=0.0, weight_decay=0.0,
                scheduler="constant", clients=10, labels_per_client=2)
    dp = dict(regime="dp", arch="resnet8", data="cifar10", momentum=0.0, weight_decay=0.0,
              scheduler="halving", milestones=[20, 40], epochs=50)
    for b, (lrs, clips) in _DP_BATCH.items():
        for norm, lr, clip in zip(_NORMS3, lrs, clips):
            out[f"cifar10-resnet8-dp-b{b}-{norm}"] = dict(dp, norm=norm, batch=b, lr=lr,
                                                         clip=clip, epsilon=8.0)
    for eps, (lrs, clips, batches) in _DP_EPS.items():
        for norm, lr, clip, b in zip(_NORMS3, lrs, clips, batches):
            out[f"cifar10-resnet8-dp-eps{eps}-{norm}"] = dict(dp, norm=norm, batch=b, lr=lr,
                                                             clip=clip, epsilon=float(eps))
    for norm, lr in _DESK_CENTRAL_LR.items():
        out[f"desk-cifar10-resnet8-b32-{norm}"] = dict(
            central, arch="resnet8", norm=norm, data="cifar10", batch=32, lr=lr, epochs=15,
            subset=5000)
    for norm, lr in _DESK_FED_LR.items():
        out[f"desk-fed-cifar10-resnet8-{norm}"] = dict(
            regime="fed", arch="resnet8", norm=norm, data="cifar10", batch=32, lr=lr,
            momentum=0.0, weight_decay=0.0, scheduler="constant", clients=10,
            labels_per_client=2, rounds=30, subset=5000)
    return out


PRESETS = _build()


def get_preset(name: str) -> dict:
    try:
        return dict(PRESETS[name])
    except KeyError:
        raise KeyError(f"unknown preset {name!r}") from None
