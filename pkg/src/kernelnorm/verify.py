"""Property suite: path equivalence, finite-difference gradients, batch
independence, per-sample gradients and the window-shape oracle.

Each check yields :class:`CheckResult` records; :func:`run_suite` gathers them
for the ``verify`` command and the tests.
"""
from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from . import knconv, norm, ops
from .autograd import Tensor, backward, no_grad
from .layers import Context
from .models import ModelSpec, build_model
from .rng import Rng

EQUIV_TOL = {"f64": 1e-9, "f32": 1e-4}
GRAD_TOL = 1e-5
FD_STEP = 1e-5
BATCH_IND_TOL = 1e-5
BATCH_DEP_MIN = 1e-3
PER_SAMPLE_TOL = 1e-6


@dataclass
class CheckResult:
    group: str
    name: str
    passed: bool
    value: float = float("nan")
    limit: float = float("nan")
    inputs: dict = field(default_factory=dict)


def rel_dev(a, b) -> float:
    """Normwise relative deviation ``max|a - b| / max|b|`` (0 when both vanish)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    num = float(np.max(np.abs(a - b))) if a.size else 0.0
    den = float(np.max(np.abs(b))) if b.size else 0.0
    if den == 0.0:
        return num
    return num / den


# ---------------------------------------------------------------- finite differences

def gradcheck(fn: Callable[..., Tensor], inputs: list[np.ndarray], seed=0, step=FD_STEP,
              wrt=None) -> float:
    """Worst relative error between tape gradients and central differences.

    The scalar probed is ``sum(fn(*inputs) * R)`` for a fixed random ``R``.
    ``wrt`` selects which inputs to differentiate (default: all).
    """
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    wrt = range(len(inputs)) if wrt is None else wrt
    tensors = [Tensor(x, requires_grad=True) for x in inputs]
    out = fn(*tensors)
    probe = np.random.default_rng(seed).standard_normal(out.shape)
    grads = backward(ops.sum(ops.mul(out, Tensor(probe))))

    def scalar():
        with no_grad():
            return float(np.sum(fn(*[Tensor(x) for x in inputs]).data * probe))

    worst = 0.0
    for i in wrt:
        x = inputs[i]
        analytic = grads.get(tensors[i], np.zeros_like(x))
        numeric = np.zeros_like(x)
        flat = x.reshape(-1)
        for j in range(flat.size):
            keep = flat[j]
            flat[j] = keep + step
            up = scalar()
            flat[j] = keep - step
            down = scalar()
            flat[j] = keep
            numeric.reshape(-1)[j] = (up - down) / (2 * step)
        worst = max(worst, rel_dev(analytic, numeric))
    return worst


def _grad_cases() -> Iterator[tuple[str, Callable, list, tuple | None]]:
    g = np.random.default_rng(7)
    r = g.standard_normal
    pos = lambda *s: g.uniform(0.5, 2.0, size=s)  # noqa: E731
    away = lambda *s: np.sign(r(s)) * g.uniform(0.2, 1.0, size=s)  # noqa: E731
    rng = Rng(3)

    yield "add", lambda a, b: ops.add(a, b), [r((2, 3, 4)), r((3, 1))], None
    yield "sub", lambda a, b: ops.sub(a, b), [r((2, 3)), r((2, 3))], None
    yield "mul", lambda a, b: ops.mul(a, b), [r((2, 3, 4)), r((1, 3, 1))], None
    yield "div", lambda a, b: ops.div(a, b), [r((3, 4)), pos(3, 4)], None
    yield "square", ops.square, [r((3, 4))], None
    yield "rsqrt", lambda a: ops.rsqrt(a, 1e-5), [pos(3, 4)], None
    yield "clamp_min", lambda a: ops.clamp_min(a, 0.0), [away(3, 4)], None
    yield "relu", ops.relu, [away(2, 3, 4)], None
    yield "mish", ops.mish, [r((2, 3, 4))], None
    yield "sum_axis", lambda a: ops.sum(a, axis=(1, 2)), [r((2, 3, 4))], None
    yield "mean", lambda a: ops.mean(a, axis=1, keepdims=True), [r((2, 3, 4))], None
    yield "reshape", lambda a: ops.reshape(a, (6, 4)), [r((2, 3, 4))], None
    yield "flatten", ops.flatten, [r((2, 3, 2, 2))], None
    yield "take_channel", lambda a: ops.take_channel(a, 1), [r((2, 3, 2, 2))], None
    yield "pad2d", lambda a: ops.pad2d(a, 1, 2), [r((1, 2, 3, 3))], None
    yield "crop2d", lambda a: ops.crop2d(a, 1, 1), [r((1, 2, 5, 5))], None
    yield "conv2d", lambda x, w, b: ops.conv2d(x, w, b, 2, 1), \
        [r((2, 3, 5, 5)), r((4, 3, 3, 3)), r(4)], None
    yield "maxpool2d", lambda x: ops.maxpool2d(x, 2, 2), [g.permutation(64).reshape(1, 4, 4, 4) / 8.0], None
    yield "maxpool2d_pad", lambda x: ops.maxpool2d(x, 3, 2, 1), [g.permutation(50).reshape(1, 2, 5, 5) / 8.0], None
    yield "avgpool2d", lambda x: ops.avgpool2d(x, 2, 1), [r((1, 2, 4, 4))], None
    yield "adaptive_avg_pool2d", lambda x: ops.adaptive_avg_pool2d(x, (2, 3)), [r((2, 2, 5, 7))], None
    yield "linear", lambda x, w, b: ops.linear(x, w, b), [r((3, 5)), r((4, 5)), r(4)], None
    yield "matmul", ops.matmul, [r((3, 5)), r((5, 2))], None
    yield "dropout", lambda x: ops.dropout(x, np.array([[2.0, 0.0, 2.0]])), [r((1, 3))], None
    labels = np.array([0, 2, 1, 2])
    yield "cross_entropy", lambda z: ops.cross_entropy(z, labels), [r((4, 3))], None

    cfg_a = norm.KernelNormConfig(3, 1, 1)
    cfg_b = norm.KernelNormConfig((2, 3), (2, 1), (0, 1))
    cfg_d = norm.KernelNormConfig(2, 2, 0, dropout_p=0.3)
    yield "window_moments", lambda x: norm.window_moments(x, cfg_a), [r((2, 2, 4, 4))], None
    yield "kn_mean_var", lambda x: ops.add(*norm.kn_mean_var(x, cfg_b)), [r((2, 3, 4, 5))], None
    yield "kernel_norm", lambda x: norm.kernel_norm(x, cfg_a), [r((1, 2, 4, 4))], None
    yield "kernel_norm_rect", lambda x: norm.kernel_norm(x, cfg_b), [r((2, 2, 4, 5))], None
    yield "kernel_norm_dropout", lambda x: norm.kernel_norm(x, cfg_d, rng, True, (1, 0)), \
        [r((2, 3, 4, 4))], None

    def bn(x, gm, bt):
        rm, rv = np.zeros(x.shape[1]), np.ones(x.shape[1])
        return norm.batch_norm(x, gm, bt, rm, rv, True, 0.1, 1e-5)

    def bn_eval(x, gm, bt):
        return norm.batch_norm(x, gm, bt, np.full(x.shape[1], 0.1), np.full(x.shape[1], 1.5),
                               False, 0.1, 1e-5)

    yield "batch_norm_train", bn, [r((3, 2, 3, 3)), pos(2), r(2)], None
    yield "batch_norm_eval", bn_eval, [r((3, 2, 3, 3)), pos(2), r(2)], None
    yield "group_norm", lambda x, gm, bt: norm.group_norm(x, 2, gm, bt), \
        [r((2, 4, 3, 3)), pos(4), r(4)], None
    yield "layer_norm", lambda x, gm, bt: norm.layer_norm(x, gm, bt), \
        [r((2, 3, 3, 3)), pos(3), r(3)], None
    yield "instance_norm", lambda x, gm, bt: norm.instance_norm(x, gm, bt), \
        [r((2, 3, 3, 3)), pos(3), r(3)], None

    for mode, fn in (("naive", knconv.knconv_naive), ("efficient", knconv.knconv_efficient)):
        for (k, s, p, drop) in ((3, 1, 1, 0.0), (2, 2, 0, 0.0), (3, 2, 1, 0.25)):
            def f(x, w, b, k=k, s=s, p=p, drop=drop, fn=fn):
                params = knconv.KnConvParams(3, 4, w, b, k, s, p, drop)
                return fn(x, params, rng, drop > 0, (5, 0))
            yield f"knconv_{mode}_k{k}s{s}p{p}d{drop}", f, \
                [r((2, 3, 5, 5)), r((4, 3, k, k)), r(4)], None


def check_gradients(name_filter: str | None = None) -> Iterator[CheckResult]:
    for name, fn, inputs, wrt in _grad_cases():
        if name_filter and name_filter not in name:
            continue
        err = gradcheck(fn, inputs, wrt=wrt)
        yield CheckResult("grad", name, err <= GRAD_TOL, err, GRAD_TOL,
                          {"shapes": [list(np.shape(x)) for x in inputs]})


# ---------------------------------------------------------------- equivalence

EQUIV_GRID = dict(k=(1, 2, 3, 5), s=(1, 2, 3), pad=(0, 1, 2), c=(1, 3, 16), f=(1, 8), n=(1, 4))


def equivalence_case(k, s, pad, c, f, n, dtype="f64", p=0.0, size=7, seed=0,
                     efficient=None) -> float:
    """Relative deviation between the two KNConv paths on one configuration."""
    np_dtype = {"f64": np.float64, "f32": np.float32}[dtype]
    gen = np.random.default_rng([seed, k, s, pad, c, f, n])
    x = Tensor((gen.standard_normal((n, c, size, size)) * 2.0 + 0.5).astype(np_dtype))
    params = knconv.KnConvParams.init(c, f, k, s, pad, dropout_p=p, dtype=np_dtype,
                                      rng=Rng(seed), stream=(k, s, pad, c, f))
    params.bias.data = gen.standard_normal(f).astype(np_dtype)
    rng, training = Rng(seed + 1), p > 0
    with no_grad():
        a = knconv.knconv_naive(x, params, rng, training, (9, 0))
        b = (efficient or knconv.knconv_efficient)(x, params, rng, training, (9, 0))
    return rel_dev(b.data, a.data)


def check_equivalence(dtypes=("f64", "f32"), dropout=(0.0, 0.1, 0.5), efficient=None,
                      grid=None) -> Iterator[CheckResult]:
    grid = grid or EQUIV_GRID
    for dtype in dtypes:
        for p in dropout:
            worst, worst_case = 0.0, None
            for k, s, pad, c, f, n in itertools.product(*grid.values()):
                dev = equivalence_case(k, s, pad, c, f, n, dtype, p, efficient=efficient)
                if not dev <= worst:
                    worst, worst_case = dev, dict(k=k, s=s, pad=pad, c=c, f=f, n=n)
            tol = EQUIV_TOL[dtype]
            yield CheckResult("equiv", f"knconv_{dtype}_p{p}", worst <= tol, worst, tol,
                              {"worst_case": worst_case, "dropout_p": p})


# ---------------------------------------------------------------- shape oracle

def _brute_windows(size, k, s, p) -> int:
    return sum(1 for start in range(-p, size + p) if start + k <= size + p and (start + p) % s == 0)


def check_shapes(max_hw=16, max_k=5, max_s=4, max_p=2) -> Iterator[CheckResult]:
    mismatches, cases = [], 0
    for h, w, k, s, p in itertools.product(range(1, max_hw + 1), range(1, max_hw + 1),
                                           range(1, max_k + 1), range(1, max_s + 1),
                                           range(max_p + 1)):
        cases += 1
        nh, nw = _brute_windows(h, k, s, p), _brute_windows(w, k, s, p)
        cfg = norm.KernelNormConfig(k, s, p)
        try:
            got = norm.kernel_norm_output_shape(h, w, cfg)
        except ValueError:
            got = None
        want = (k * nh, k * nw) if nh and nw else None
        if got != want:
            mismatches.append(dict(h=h, w=w, k=k, s=s, p=p, got=got, want=want))
    yield CheckResult("shape", f"kernel_norm_output_shape[{cases} cases]", not mismatches,
                      float(len(mismatches)), 0.0, {"first_mismatches": mismatches[:5]})


# ---------------------------------------------------------------- model-level

def desk_model(norm_kind, seed=0, dtype=np.float64, width=0.125, size=16, arch="resnet8",
               classes=10):
    spec = ModelSpec(arch, norm_kind, num_classes=classes, width=width, input_size=size,
                     group_size=4)
    return build_model(spec, seed, dtype)


def batch_dependence(model, x, training=True, seed=0) -> float:
    """Max deviation of each sample's joint-batch output from its solo output."""
    rng = Rng(seed)
    ids = list(range(len(x)))
    with no_grad():
        joint = model(Tensor(x), Context(training, rng, 0, ids)).data
        solo = np.concatenate([model(Tensor(x[i:i + 1]), Context(training, rng, 0, [i])).data
                               for i in ids])
    return float(np.max(np.abs(joint - solo)))


def per_sample_gap(model, x, labels, seed=0) -> float:
    """Relative gap between the batch gradient and the mean of per-sample gradients.

    Runs in training mode with per-sample keyed dropout; batch-norm models are
    evaluated too (the gap is what shows they are unusable here).
    """
    from .training import loss_and_grads

    rng = Rng(seed)
    ids = list(range(len(labels)))
    _, _, full = loss_and_grads(model, x, labels, Context(True, rng, 0, ids))
    state = model.state_dict()
    acc = {k: np.zeros_like(v) for k, v in full.items()}
    for i in ids:
        model.load_state_dict(state)  # undo running-stat drift between samples
        _, _, g = loss_and_grads(model, x[i:i + 1], labels[i:i + 1], Context(True, rng, 0, [i]))
        for k in acc:
            acc[k] += g[k] / len(ids)
    model.load_state_dict(state)
    flat_full = np.concatenate([v.ravel() for v in full.values()])
    flat_mean = np.concatenate([acc[k].ravel() for k in full])
    return rel_dev(flat_mean, flat_full)


def check_batch_independence(kinds=("kernel", "group", "layer", "instance", "batch"),
                             seed=0) -> Iterator[CheckResult]:
    x = np.random.default_rng(seed).standard_normal((4, 3, 16, 16))
    for kind in kinds:
        model = desk_model(kind, seed)
        dev = batch_dependence(model, x, training=True, seed=seed)
        if kind == "batch":
            yield CheckResult("batchind", f"{kind}_train_depends", dev >= BATCH_DEP_MIN, dev,
                              BATCH_DEP_MIN)
        else:
            yield CheckResult("batchind", f"{kind}_independent", dev <= BATCH_IND_TOL, dev,
                              BATCH_IND_TOL)


def check_per_sample(kinds=("kernel", "group", "layer", "instance", "batch"),
                     seed=0) -> Iterator[CheckResult]:
    gen = np.random.default_rng(seed + 1)
    x = gen.standard_normal((4, 3, 16, 16))
    labels = gen.integers(0, 10, size=4)
    for kind in kinds:
        model = desk_model(kind, seed)
        gap = per_sample_gap(model, x, labels, seed)
        if kind == "batch":
            yield CheckResult("persample", f"{kind}_mismatch", gap >= 1e-4, gap, 1e-4)
        else:
            yield CheckResult("persample", f"{kind}_consistent", gap <= PER_SAMPLE_TOL, gap,
                              PER_SAMPLE_TOL)


# ---------------------------------------------------------------- suite

SUITES = {
    "equiv": check_equivalence,
    "grad": check_gradients,
    "shape": check_shapes,
    "batchind": check_batch_independence,
    "persample": check_per_sample,
}


def run_suite(name_filter: str | None = None, log=None) -> list[CheckResult]:
    """Run the checks selected by ``name_filter``.

    A filter naming a group (``grad``, ``equiv``...) runs just that group;
    anything else runs every group and keeps checks whose name contains it.
    """
    groups = [g for g in SUITES if name_filter and name_filter in g] or list(SUITES)
    by_group = bool(name_filter) and groups != list(SUITES)
    results = []
    for group in groups:
        t0 = time.perf_counter()
        for res in SUITES[group]():
            if name_filter is None or by_group or name_filter in res.name:
                results.append(res)
                if log:
                    log(res)
        if log:
            log(f"{group}: {time.perf_counter() - t0:.1f}s")
    return results


def format_table(results) -> str:
    lines = [f"{'group':<10} {'check':<40} {'value':>12} {'limit':>10}  status"]
    for r in results:
        lines.append(f"{r.group:<10} {r.name:<40} {r.value:>12.3e} {r.limit:>10.1e}  "
                     f"{'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
