"""Runtime networks: parameters and forward passes for a NetworkSpec."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from sortnet import ops
from sortnet.autodiff import DTYPE, Param, Tensor
from sortnet.fusion import sort_fuse
from sortnet.netbuild import LayerSpec, NetworkSpec, validate


class _Layer:
    def params(self) -> Iterator[Param]:
        return iter(())

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        raise NotImplementedError


class _Conv(_Layer):
    def __init__(self, spec: LayerSpec, rng: np.random.Generator, name: str):
        fan_in = spec.channels_in * spec.k * spec.k
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), (spec.channels_out, spec.channels_in, spec.k, spec.k))
        self.w = Param(w, name=f"{name}.w")
        self.b = Param(np.zeros(spec.channels_out), name=f"{name}.b") if spec.bias else None
        self.stride, self.pad = spec.stride, spec.pad

    def params(self):
        yield self.w
        if self.b is not None:
            yield self.b

    def __call__(self, x, train):
        return ops.conv2d(x, self.w, self.b, self.stride, self.pad)


class _FC(_Layer):
    def __init__(self, spec: LayerSpec, rng: np.random.Generator, name: str):
        w = rng.normal(0.0, np.sqrt(2.0 / spec.channels_in), (spec.channels_in, spec.channels_out))
        self.w = Param(w, name=f"{name}.w")
        self.b = Param(np.zeros(spec.channels_out), name=f"{name}.b")

    def params(self):
        yield self.w
        yield self.b

    def __call__(self, x, train):
        return ops.fc(x, self.w, self.b)


class _BatchNorm(_Layer):
    def __init__(self, spec: LayerSpec, name: str):
        self.gamma = Param(np.ones(spec.channels_in), name=f"{name}.gamma")
        self.beta = Param(np.zeros(spec.channels_in), name=f"{name}.beta")
        self.state = ops.BatchNormState(spec.channels_in)

    def params(self):
        yield self.gamma
        yield self.beta

    def __call__(self, x, train):
        return ops.batchnorm(x, self.gamma, self.beta, self.state, train)


class _Fn(_Layer):
    def __init__(self, fn):
        self.fn = fn

    def __call__(self, x, train):
        return self.fn(x)


class _Seq(_Layer):
    def __init__(self, layers: list[_Layer]):
        self.layers = layers

    def params(self):
        for layer in self.layers:
            yield from layer.params()

    def __call__(self, x, train):
        for layer in self.layers:
            x = layer(x, train)
        return x


class _Branch(_Layer):
    def __init__(self, spec: LayerSpec, rng, name):
        self.b1 = _build(spec.branch, rng, f"{name}.b1")
        self.b2 = _build(spec.branch, rng, f"{name}.b2")
        self.fusion = spec.fusion

    def params(self):
        yield from self.b1.params()
        yield from self.b2.params()

    def __call__(self, x, train):
        return sort_fuse(self.b1(x, train), self.b2(x, train), self.fusion)


class _Residual(_Layer):
    def __init__(self, spec: LayerSpec, rng, name):
        self.body = _build(spec.body, rng, f"{name}.body")
        self.shortcut = _build(spec.shortcut, rng, f"{name}.short") if spec.shortcut else None
        self.fusion = spec.fusion

    def params(self):
        yield from self.body.params()
        if self.shortcut is not None:
            yield from self.shortcut.params()

    def __call__(self, x, train):
        identity = self.shortcut(x, train) if self.shortcut is not None else x
        return sort_fuse(identity, self.body(x, train), self.fusion)


def _make(spec: LayerSpec, rng: np.random.Generator, name: str) -> _Layer:
    kind = spec.kind
    if kind == "conv":
        return _Conv(spec, rng, name)
    if kind == "fc":
        return _FC(spec, rng, name)
    if kind == "batchnorm":
        return _BatchNorm(spec, name)
    if kind == "relu":
        return _Fn(ops.relu)
    if kind == "flatten":
        return _Fn(ops.flatten)
    if kind == "avgpool":
        return _Fn(ops.global_avgpool)
    if kind == "pool":
        k, s, p = spec.k, spec.stride, spec.pad
        return _Fn(lambda x: ops.maxpool2d(x, k, s, p))
    if kind == "branch_block":
        return _Branch(spec, rng, name)
    if kind == "residual_block":
        return _Residual(spec, rng, name)
    raise ValueError(kind)


def _build(layers, rng, prefix) -> _Seq:
    return _Seq([_make(spec, rng, f"{prefix}.{i}") for i, spec in enumerate(layers)])


class Network:
    """Parameters plus forward pass for a validated :class:`NetworkSpec`.

    Initialization draws from ``numpy.random.default_rng(seed)`` in layer
    order: He-scaled Gaussian weights, zero biases, unit BN scales.
    """

    def __init__(self, spec: NetworkSpec, seed: int = 0):
        validate(spec)
        self.spec = spec
        self.seed = seed
        self.body = _build(spec.layers, np.random.default_rng(seed), spec.name)
        self.param_list: list[Param] = list(self.body.params())

    def params(self) -> list[Param]:
        return self.param_list

    def num_params(self) -> int:
        return ops.param_count(self.param_list)

    def zero_grad(self) -> None:
        for p in self.param_list:
            p.zero_grad()

    def forward(self, x, train: bool = False) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=DTYPE))
        return self.body(x, train)

    __call__ = forward

    def predict(self, x, batch_size: int = 500) -> np.ndarray:
        x = np.asarray(x, dtype=DTYPE)
        out = [self.forward(x[i : i + batch_size]).data.argmax(axis=1) for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {p.name: p.data for p in self.param_list}
        for layer in _walk(self.body):
            if isinstance(layer, _BatchNorm):
                arrays[layer.gamma.name + ".running_mean"] = layer.state.running_mean
                arrays[layer.gamma.name + ".running_var"] = layer.state.running_var
        return arrays

    def save(self, path) -> None:
        np.savez(path, **self.state_arrays())


def _walk(layer: _Layer) -> Iterator[_Layer]:
    yield layer
    if isinstance(layer, _Seq):
        for sub in layer.layers:
            yield from _walk(sub)
    elif isinstance(layer, _Branch):
        yield from _walk(layer.b1)
        yield from _walk(layer.b2)
    elif isinstance(layer, _Residual):
        yield from _walk(layer.body)
        if layer.shortcut is not None:
            yield from _walk(layer.shortcut)

