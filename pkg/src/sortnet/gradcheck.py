"""Central-difference audits of tape gradients.

:func:`grad_check` compares the tape gradient of a scalar function with
``(f(p + h) - f(p - h)) / 2h`` coordinate by coordinate. The suites below
build random instances of every primitive and fusion operator and run it.
"""

from __future__ import annotations

import copy
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from sortnet import ops
from sortnet.autodiff import DTYPE, Tape, Tensor, make_output
from sortnet.errors import NonFiniteLoss
from sortnet.fusion import BRANCH_SORT, FusionSpec, ablation_rows, residual_sort_fuse, residual_spec, sort_fuse

DEFAULT_H = 1e-5
DEFAULT_TOL = 1e-5


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tol: float
    h: float
    skipped: int = 0

    @property
    def max_rel_err(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``||a - n|| / max(||a||, ||n||)``, falling back to the absolute gap when both vanish."""
    diff = float(np.linalg.norm(analytic - numeric))
    scale = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)))
    return diff / scale if scale > 1e-12 else diff


def _scalar(f: Callable[[], Tensor]) -> tuple[float, tuple]:
    with ops.activation_pattern() as pattern:
        out = f()
    val = float(np.asarray(out.data).reshape(-1)[0])
    if not np.isfinite(val):
        raise NonFiniteLoss(f"function value is {val}")
    return val, tuple(pattern)


def numeric_grad(
    f: Callable[[], Tensor], t: Tensor, h: float = DEFAULT_H, stencil: int = 2, indices: Sequence[int] | None = None
) -> np.ndarray:
    """Finite-difference gradient of ``f`` with respect to ``t``.

    ``stencil=2`` is the central difference ``(f(p+h) - f(p-h)) / 2h``;
    ``stencil=4`` uses the fourth-order five-point formula. With ``indices``
    only those flat coordinates are evaluated and a 1-d array is returned.

    Coordinates whose stencil points switch any ReLU mask or max winner
    relative to the unperturbed input straddle a kink; they are set to NaN.
    """
    if stencil not in (2, 4):
        raise ValueError("stencil must be 2 or 4")
    base = t.data
    work = base.copy()
    t.data = work
    idx = range(work.size) if indices is None else list(indices)
    vals = np.zeros(len(idx), dtype=DTYPE)

    crossed = False

    def at(i, orig, offset):
        nonlocal crossed
        work.flat[i] = orig + offset
        val, pattern = _scalar(f)
        crossed = crossed or pattern != base_pattern
        return val

    try:
        _, base_pattern = _scalar(f)
        for j, i in enumerate(idx):
            orig = work.flat[i]
            crossed = False
            if stencil == 2:
                vals[j] = (at(i, orig, h) - at(i, orig, -h)) / (2 * h)
            else:
                vals[j] = (-at(i, orig, 2 * h) + 8 * at(i, orig, h) - 8 * at(i, orig, -h) + at(i, orig, -2 * h)) / (12 * h)
            if crossed:
                vals[j] = np.nan
            work.flat[i] = orig
    finally:
        t.data = base
    return vals.reshape(base.shape) if indices is None else vals


def numeric_directional(
    f: Callable[[], Tensor], t: Tensor, direction: np.ndarray, h: float = DEFAULT_H
) -> float:
    """Central difference of ``f`` along a unit ``direction`` in ``t``'s space; NaN across a kink."""
    base = t.data
    try:
        _, base_pattern = _scalar(f)
        t.data = base + h * direction
        fp, pat_p = _scalar(f)
        t.data = base - h * direction
        fm, pat_m = _scalar(f)
    finally:
        t.data = base
    if pat_p != base_pattern or pat_m != base_pattern:
        return float("nan")
    return (fp - fm) / (2 * h)


def tape_grads(f: Callable[[], Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    with Tape() as tape:
        out = f()
        if not np.all(np.isfinite(out.data)):
            raise NonFiniteLoss("function value is not finite")
        tape.backward(out)
    return [tape.grad(p) for p in params]


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = DEFAULT_H,
    tol: float = DEFAULT_TOL,
    names: Sequence[str] | None = None,
    stencil: int = 2,
    directions: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Relative error between tape and central-difference gradients, per parameter.

    ``f`` must be deterministic and read its inputs from ``params`` (which
    need ``requires_grad``) each time it is called. By default every
    coordinate is differenced. With ``directions=k`` each parameter is
    instead probed along ``k`` random unit directions ``v``, comparing
    ``grad . v`` with the central difference along ``v``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    analytic = tape_grads(f, params)
    errors = {}
    skipped = 0
    for i, (p, a) in enumerate(zip(params, analytic)):
        name = names[i] if names else (p.name or f"p{i}")
        a = a.reshape(-1)
        if directions:
            rng = rng or np.random.default_rng(0)
            vs = rng.normal(size=(directions, p.size))
            vs /= np.linalg.norm(vs, axis=1, keepdims=True)
            n = np.array([numeric_directional(f, p, v.reshape(p.shape), h) for v in vs])
            a = vs @ a
        else:
            n = numeric_grad(f, p, h, stencil).reshape(-1)
        ok = ~np.isnan(n)
        skipped += int((~ok).sum())
        errors[name] = rel_error(a[ok], n[ok])
    return GradCheckReport(errors, tol, h, skipped)


# -- random instances ------------------------------------------------------------------


def weighted_sum(t: Tensor, weights: np.ndarray) -> Tensor:
    """``sum(weights * t)`` as one tape node, so audits of ew_mul do not depend on ew_mul."""
    return make_output("weighted_sum", np.asarray((t.data * weights).sum()), (t,), lambda g: (g * weights,))


def _away_from_zero(rng, shape, lo=0.1, hi=2.0):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(lo, hi, size=shape)


def _distinct(rng, shape, spacing=0.05):
    n = int(np.prod(shape))
    return (rng.permutation(n) * spacing - n * spacing / 2).reshape(shape) + rng.uniform(-0.01, 0.01, size=shape)


def _leaf(x, name):
    return Tensor(np.asarray(x, dtype=DTYPE), requires_grad=True, name=name)


@dataclass
class Instance:
    f: Callable[[], Tensor]
    params: list[Tensor]


def _fuse_inputs(rng, spec: FusionSpec, shape):
    nonneg = spec.use_prod and spec.prod_wrapper == "sqrt_eps" and spec.prod_input_gate == "none"
    draw = (lambda: rng.uniform(0.1, 2.0, shape)) if nonneg else (lambda: _away_from_zero(rng, shape))
    a, b = draw(), draw()
    if spec.use_max:
        # keep the max comparison away from ties
        while np.any(close := np.abs(a - b) < 0.1):
            b = np.where(close, draw(), b)
    return a, b


def _instance_factories() -> dict[str, Callable[[np.random.Generator], Instance]]:
    def binary(op, sampler):
        def make(rng):
            shape = tuple(rng.integers(1, 5, size=2))
            a, b = sampler(rng, shape)
            ta, tb = _leaf(a, "a"), _leaf(b, "b")
            w = rng.normal(size=shape)
            return Instance(lambda: weighted_sum(op(ta, tb), w), [ta, tb])

        return make

    def unary(op, sampler, shape_fn=None):
        def make(rng):
            shape = shape_fn(rng) if shape_fn else tuple(rng.integers(1, 5, size=2))
            ta = _leaf(sampler(rng, shape), "a")
            probe = op(Tensor(ta.data))
            w = rng.normal(size=probe.shape)
            return Instance(lambda: weighted_sum(op(ta), w), [ta])

        return make

    def make_conv(rng):
        n, c, k = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
        kh = int(rng.integers(1, 4))
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        h = int(rng.integers(kh, 6))
        x = _leaf(rng.normal(size=(n, c, h, h)), "x")
        wt = _leaf(rng.normal(size=(k, c, kh, kh)), "w")
        b = _leaf(rng.normal(size=(k,)), "b")
        ho = ops.conv_output_size(h, kh, stride, pad)
        w = rng.normal(size=(n, k, ho, ho))
        return Instance(lambda: weighted_sum(ops.conv2d(x, wt, b, stride, pad), w), [x, wt, b])

    def make_pool(rng):
        n, c = rng.integers(1, 3), rng.integers(1, 3)
        k = int(rng.integers(2, 4))
        stride = int(rng.integers(1, 3))
        pad = int(rng.integers(0, k // 2 + 1))
        h = int(rng.integers(k, 7))
        x = _leaf(_distinct(rng, (n, c, h, h)), "x")
        ho = ops.conv_output_size(h, k, stride, pad)
        w = rng.normal(size=(n, c, ho, ho))
        return Instance(lambda: weighted_sum(ops.maxpool2d(x, k, stride, pad), w), [x])

    def make_fc(rng):
        n, d, k = (int(v) for v in rng.integers(1, 6, size=3))
        x, wt, b = _leaf(rng.normal(size=(n, d)), "x"), _leaf(rng.normal(size=(d, k)), "w"), _leaf(rng.normal(size=(k,)), "b")
        w = rng.normal(size=(n, k))
        return Instance(lambda: weighted_sum(ops.fc(x, wt, b), w), [x, wt, b])

    def make_bn(train):
        def make(rng):
            c = int(rng.integers(1, 4))
            shape = (int(rng.integers(4, 8)), c) if rng.random() < 0.5 else (int(rng.integers(2, 4)), c, 2, 3)
            x = _leaf(rng.normal(size=shape) * 2 + 1, "x")
            gamma, beta = _leaf(rng.uniform(0.5, 2, c), "gamma"), _leaf(rng.normal(size=c), "beta")
            state = ops.BatchNormState(c)
            state.running_mean = rng.normal(size=c)
            state.running_var = rng.uniform(0.5, 2, c)
            w = rng.normal(size=shape)

            def f():
                # fresh state copy so repeated evaluations see the same running stats
                st = ops.BatchNormState(c, running_mean=state.running_mean.copy(), running_var=state.running_var.copy())
                return weighted_sum(ops.batchnorm(x, gamma, beta, st, train), w)

            return Instance(f, [x, gamma, beta])

        return make

    def make_xent(rng):
        n, c = int(rng.integers(1, 6)), int(rng.integers(2, 6))
        z = _leaf(rng.normal(size=(n, c)) * 2, "logits")
        labels = rng.integers(0, c, size=n)
        return Instance(lambda: ops.softmax_xent(z, labels)[0], [z])

    def make_gap(rng):
        shape = tuple(int(v) for v in rng.integers(1, 4, size=4))
        x = _leaf(rng.normal(size=shape), "x")
        w = rng.normal(size=shape[:2])
        return Instance(lambda: weighted_sum(ops.global_avgpool(x), w), [x])

    return {
        "ew_add": binary(ops.add, lambda r, s: (r.normal(size=s), r.normal(size=s))),
        "ew_mul": binary(ops.mul, lambda r, s: (r.normal(size=s), r.normal(size=s))),
        "ew_max": binary(ops.maximum, lambda r, s: (lambda a: (a, a + _away_from_zero(r, s, 0.1, 1.0)))(r.normal(size=s))),
        "relu": unary(ops.relu, lambda r, s: _away_from_zero(r, s)),
        "ew_sqrt_shift": unary(lambda t: ops.sqrt_shift(t, 1e-4), lambda r, s: r.uniform(0.01, 4.0, s)),
        "conv2d": make_conv,
        "maxpool2d": make_pool,
        "fc": make_fc,
        "batchnorm_train": make_bn(True),
        "batchnorm_eval": make_bn(False),
        "global_avgpool": make_gap,
        "softmax_xent": make_xent,
    }


def fusion_specs() -> dict[str, FusionSpec]:
    specs = {}
    for row in ablation_rows(BRANCH_SORT):
        specs[f"sort_fuse[{row.label}]"] = row
    for row in ablation_rows(residual_spec()):
        if row.use_prod:
            specs[f"sort_fuse[{row.label},sqrt,relu]"] = row
    specs["sort_fuse[sum+prod,sqrt]"] = FusionSpec(prod_wrapper="sqrt_eps")
    specs["sort_fuse[sum+square]"] = FusionSpec(prod_operand="square")
    return specs


def _fusion_factories() -> dict[str, Callable[[np.random.Generator], Instance]]:
    def make_for(spec):
        def make(rng):
            shape = tuple(int(v) for v in rng.integers(1, 5, size=2))
            a, b = _fuse_inputs(rng, spec, shape)
            ta, tb = _leaf(a, "f1"), _leaf(b, "f2")
            w = rng.normal(size=shape)
            return Instance(lambda: weighted_sum(sort_fuse(ta, tb, spec), w), [ta, tb])

        return make

    out = {name: make_for(spec) for name, spec in fusion_specs().items()}

    def make_residual(rng):
        shape = tuple(int(v) for v in rng.integers(1, 5, size=2))
        x, fx = _leaf(_away_from_zero(rng, shape), "x"), _leaf(_away_from_zero(rng, shape), "fx")
        w = rng.normal(size=shape)
        return Instance(lambda: weighted_sum(residual_sort_fuse(x, fx), w), [x, fx])

    out["residual_sort_fuse"] = make_residual
    return out


@dataclass
class OpResult:
    op: str
    instances: int
    max_rel_err: float
    tol: float
    skipped: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


@dataclass
class SuiteReport:
    scope: str
    results: list[OpResult] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def failing(self) -> list[str]:
        return [r.op for r in self.results if not r.passed]

    def lines(self) -> list[str]:
        out = [f"{'op':<36} {'instances':>9} {'max_rel_err':>12} {'kink_skips':>10}  status"]
        for r in self.results:
            status = "PASS" if r.passed else "FAIL"
            out.append(f"{r.op:<36} {r.instances:>9d} {r.max_rel_err:>12.3e} {r.skipped:>10d}  {status}")
        verdict = "PASS" if self.passed else "FAIL: " + ", ".join(self.failing)
        out.append(f"scope={self.scope} ops={len(self.results)} time={self.seconds:.1f}s -> {verdict}")
        return out


def run_factories(
    factories: dict[str, Callable[[np.random.Generator], Instance]],
    instances: int,
    seed: int,
    h: float,
    tol: float,
) -> list[OpResult]:
    results = []
    for idx, (name, make) in enumerate(factories.items()):
        rng = np.random.default_rng([seed, idx])
        worst, skipped = 0.0, 0
        for _ in range(instances):
            inst = make(rng)
            try:
                rep = grad_check(inst.f, inst.params, h=h, tol=tol)
                worst, skipped = max(worst, rep.max_rel_err), skipped + rep.skipped
            except NonFiniteLoss:
                worst = float("inf")
        results.append(OpResult(name, instances, worst, tol, skipped))
    return results


def _tiny_lenet_star(sort: bool):
    from sortnet import netbuild as nb
    from sortnet.model import Network

    def make(rng):
        spec = nb.build_lenet(star=True, sort=sort, channels=(3, 4), hidden=6, input_shape=(3, 8, 8))
        net = Network(spec, seed=int(rng.integers(1 << 30)))
        return net, rng.normal(size=(3, 3, 8, 8)), rng.integers(0, 10, size=3), True

    return make


def _tiny_resnet(sort: bool):
    from sortnet import netbuild as nb
    from sortnet.model import Network

    def make(rng):
        spec = nb.build_resnet(1, 1, sort=sort, input_shape=(3, 6, 6), base_channels=2)
        net = Network(spec, seed=int(rng.integers(1 << 30)))
        return net, rng.normal(size=(4, 3, 6, 6)), rng.integers(0, 10, size=4), True

    return make


def full_net_instances() -> dict[str, Callable]:
    """Two-layer LeNet* networks (linear-sum and SORT fusion) for end-to-end audits."""
    return {"lenet*-2layer[sum]": _tiny_lenet_star(False), "lenet*-2layer[sum+prod]": _tiny_lenet_star(True)}


def residual_net_instances() -> dict[str, Callable]:
    """ResNet-8 (one block per stage, 2 base channels) with plain and SORT merges."""
    return {"resnet-8[sum]": _tiny_resnet(False), "resnet-8[residual-sort]": _tiny_resnet(True)}


def check_network(
    net,
    x,
    y,
    train: bool,
    h: float = DEFAULT_H,
    tol: float = DEFAULT_TOL,
    with_input: bool = True,
    stencil: int = 2,
    directions: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    xt = Tensor(x, requires_grad=True, name="input")

    # batchnorm running stats change on every train-mode call; they do not
    # affect train-mode outputs, but snapshotting keeps repeated calls pure
    def f():
        saved = copy.deepcopy(_bn_states(net))
        try:
            return ops.softmax_xent(net.forward(xt, train=train), y)[0]
        finally:
            _restore_bn(net, saved)

    params: list[Tensor] = list(net.params())
    if with_input:
        params.append(xt)
    return grad_check(f, params, h=h, tol=tol, stencil=stencil, directions=directions, rng=rng)


def _bn_states(net):
    from sortnet.model import _BatchNorm, _walk

    return [(layer.state.running_mean, layer.state.running_var) for layer in _walk(net.body) if isinstance(layer, _BatchNorm)]


def _restore_bn(net, saved):
    from sortnet.model import _BatchNorm, _walk

    layers = [layer for layer in _walk(net.body) if isinstance(layer, _BatchNorm)]
    for layer, (m, v) in zip(layers, saved):
        layer.state.running_mean, layer.state.running_var = m, v


def run_suite(
    scope: str,
    instances: int = 100,
    seed: int = 0,
    h: float = DEFAULT_H,
    tol: float = DEFAULT_TOL,
    net_directions: int = 1,
) -> SuiteReport:
    """Run one audit scope: ``fusion``, ``all-ops`` or ``full-net``.

    Each full-net instance is a fresh random network and batch; every
    parameter tensor (and the input) is probed along ``net_directions``
    random directions.
    """
    t0 = time.perf_counter()
    report = SuiteReport(scope)
    if scope == "fusion":
        report.results = run_factories(_fusion_factories(), instances, seed, h, tol)
    elif scope == "all-ops":
        factories = {**_instance_factories(), **_fusion_factories()}
        report.results = run_factories(factories, instances, seed, h, tol)
    elif scope == "full-net":
        for idx, (name, make) in enumerate(full_net_instances().items()):
            rng = np.random.default_rng([seed, 1000 + idx])
            worst, skipped = 0.0, 0
            for _ in range(instances):
                net, x, y, train = make(rng)
                try:
                    rep = check_network(net, x, y, train, h, tol, directions=net_directions, rng=rng)
                    worst, skipped = max(worst, rep.max_rel_err), skipped + rep.skipped
                except NonFiniteLoss:
                    worst = float("inf")
            report.results.append(OpResult(name, instances, worst, tol, skipped))
    else:
        raise ValueError(f"unknown gradcheck scope {scope!r}")
    report.seconds = time.perf_counter() - t0
    return report


def scopes() -> Iterable[str]:
    return ("fusion", "all-ops", "full-net")
