"""Declarative network specs and the architectures used in the experiments.

A :class:`NetworkSpec` is a flat list of :class:`LayerSpec` entries. Two
kinds nest further specs:

* ``branch_block`` holds a ``branch`` template that is instantiated twice
  with independent parameters; the two outputs are combined by ``fusion``.
* ``residual_block`` holds a ``body`` (the residual path) and an optional
  ``shortcut`` (projection; empty means identity) merged by ``fusion``.

Specs are pure data. :func:`sortnet.model.Network` turns one into parameters.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

from sortnet.errors import EvenKernel, InvalidGeometry, ShapeMismatch
from sortnet.fusion import BRANCH_SORT, LINEAR_SUM, FusionSpec, residual_spec
from sortnet.ops import conv_output_size

KINDS = ("conv", "pool", "avgpool", "fc", "relu", "batchnorm", "flatten", "branch_block", "residual_block")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    k: int = 0
    channels_in: int = 0
    channels_out: int = 0
    stride: int = 1
    pad: int = 0
    bias: bool = True
    fusion: Optional[FusionSpec] = None
    branch: tuple["LayerSpec", ...] = ()
    body: tuple["LayerSpec", ...] = ()
    shortcut: tuple["LayerSpec", ...] = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("branch_block", "residual_block") and self.fusion is None:
            raise ValueError(f"{self.kind} needs a fusion spec")

    def to_dict(self) -> dict:
        d: dict = {"kind": self.kind}
        for name in ("k", "channels_in", "channels_out", "stride", "pad"):
            d[name] = getattr(self, name)
        if not self.bias:
            d["bias"] = False
        if self.fusion is not None:
            d["fusion"] = self.fusion.to_dict()
        for name in ("branch", "body", "shortcut"):
            sub = getattr(self, name)
            if sub:
                d[name] = [s.to_dict() for s in sub]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        d = dict(d)
        if d.get("fusion") is not None:
            d["fusion"] = FusionSpec.from_dict(d["fusion"])
        for name in ("branch", "body", "shortcut"):
            d[name] = tuple(cls.from_dict(s) for s in d.get(name, ()))
        return cls(**d)


def conv(cin: int, cout: int, k: int, stride: int = 1, pad: int | None = None, bias: bool = True) -> LayerSpec:
    pad = (k - 1) // 2 if pad is None else pad
    return LayerSpec("conv", k=k, channels_in=cin, channels_out=cout, stride=stride, pad=pad, bias=bias)


def pool(k: int = 3, stride: int = 2, pad: int = 1) -> LayerSpec:
    return LayerSpec("pool", k=k, stride=stride, pad=pad)


def fc(din: int, dout: int) -> LayerSpec:
    return LayerSpec("fc", channels_in=din, channels_out=dout)


def bn(c: int) -> LayerSpec:
    return LayerSpec("batchnorm", channels_in=c, channels_out=c)


RELU = LayerSpec("relu")
FLATTEN = LayerSpec("flatten")
AVGPOOL = LayerSpec("avgpool")


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    layers: tuple[LayerSpec, ...]
    num_classes: int
    input_shape: tuple[int, ...] = (3, 32, 32)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "num_classes": self.num_classes,
            "input_shape": list(self.input_shape),
            "layers": [layer.to_dict() for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(
            name=d["name"],
            layers=tuple(LayerSpec.from_dict(x) for x in d["layers"]),
            num_classes=int(d["num_classes"]),
            input_shape=tuple(d.get("input_shape", (3, 32, 32))),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_json(cls, text: str) -> "NetworkSpec":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "NetworkSpec":
        return cls.from_json(Path(path).read_text())


# -- shape chaining ---------------------------------------------------------------


def layer_output_shape(layer: LayerSpec, shape: tuple[int, ...]) -> tuple[int, ...]:
    kind = layer.kind
    if kind in ("relu",):
        return shape
    if kind == "batchnorm":
        if shape[0] != layer.channels_in:
            raise ShapeMismatch(f"batchnorm over {layer.channels_in} channels got input {shape}")
        return shape
    if kind == "flatten":
        n = 1
        for d in shape:
            n *= d
        return (n,)
    if kind == "avgpool":
        if len(shape) != 3:
            raise ShapeMismatch(f"avgpool needs a C×H×W input, got {shape}")
        return (shape[0],)
    if kind == "fc":
        if len(shape) != 1 or shape[0] != layer.channels_in:
            raise ShapeMismatch(f"fc expects ({layer.channels_in},) input, got {shape}")
        return (layer.channels_out,)
    if kind in ("conv", "pool"):
        if len(shape) != 3:
            raise ShapeMismatch(f"{kind} needs a C×H×W input, got {shape}")
        c, h, w = shape
        if kind == "conv" and c != layer.channels_in:
            raise ShapeMismatch(f"conv expects {layer.channels_in} channels, got {c}")
        ho = conv_output_size(h, layer.k, layer.stride, layer.pad)
        wo = conv_output_size(w, layer.k, layer.stride, layer.pad)
        if ho < 1 or wo < 1:
            raise InvalidGeometry(f"{kind} k={layer.k} pad={layer.pad} does not fit {h}×{w}")
        return (layer.channels_out if kind == "conv" else c, ho, wo)
    if kind == "branch_block":
        return chain_shapes(layer.branch, shape)[-1]
    if kind == "residual_block":
        out_body = chain_shapes(layer.body, shape)[-1]
        out_short = chain_shapes(layer.shortcut, shape)[-1] if layer.shortcut else shape
        if out_body != out_short:
            raise ShapeMismatch(f"residual body gives {out_body} but shortcut gives {out_short}")
        return out_body
    raise ValueError(kind)


def chain_shapes(layers: Sequence[LayerSpec], shape: tuple[int, ...]) -> list[tuple[int, ...]]:
    """Input shape followed by the output shape of every layer."""
    shapes = [tuple(shape)]
    for layer in layers:
        shapes.append(layer_output_shape(layer, shapes[-1]))
    return shapes


def validate(net: NetworkSpec, input_shape: Optional[tuple[int, ...]] = None) -> list[tuple[int, ...]]:
    shapes = chain_shapes(net.layers, input_shape or net.input_shape)
    if shapes[-1] != (net.num_classes,):
        raise ShapeMismatch(f"{net.name}: network ends in {shapes[-1]}, expected ({net.num_classes},)")
    return shapes


# -- receptive field ---------------------------------------------------------------


@dataclass
class RFEntry:
    index: int
    kind: str
    rf: int
    jump: int


def _rf_step(layer: LayerSpec, rf: int, jump: int) -> tuple[int, int]:
    if layer.kind in ("conv", "pool"):
        return rf + (layer.k - 1) * jump, jump * layer.stride
    if layer.kind == "branch_block":
        return _rf_chain(layer.branch, rf, jump)
    if layer.kind == "residual_block":
        body = _rf_chain(layer.body, rf, jump)
        short = _rf_chain(layer.shortcut, rf, jump) if layer.shortcut else (rf, jump)
        return max(body[0], short[0]), body[1]
    return rf, jump


def _rf_chain(layers: Sequence[LayerSpec], rf: int, jump: int) -> tuple[int, int]:
    for layer in layers:
        rf, jump = _rf_step(layer, rf, jump)
    return rf, jump


def receptive_field(net: NetworkSpec | Sequence[LayerSpec]) -> list[RFEntry]:
    """Per-layer receptive field via ``rf' = rf + (k-1)*jump``, ``jump' = jump*stride``.

    Global pooling and dense layers leave the recorded value untouched; the
    table is meaningful up to the last spatial layer.
    """
    layers = net.layers if isinstance(net, NetworkSpec) else tuple(net)
    table = []
    rf, jump = 1, 1
    for i, layer in enumerate(layers):
        rf, jump = _rf_step(layer, rf, jump)
        table.append(RFEntry(i, layer.kind, rf, jump))
    return table


# -- chain -> two-branch transform ---------------------------------------------------


def shrink_kernel(k: int) -> int:
    if k < 1 or k % 2 == 0:
        raise EvenKernel(f"kernel size must be odd and positive, got {k}")
    return (k + 1) // 2


def branch_transform(layer: LayerSpec, fusion: FusionSpec = BRANCH_SORT, batchnorm: bool = False) -> LayerSpec:
    """Replace a conv (+ReLU) by two branches of two cascaded convs with shrunken kernels.

    Each branch computes ``relu(conv2(relu(conv1(x))))``. The pair's paddings
    add up to the original padding and the stride moves to the second conv,
    so the block matches the original conv's output size and receptive field.
    """
    if layer.kind != "conv":
        raise ValueError(f"branch_transform needs a conv layer, got {layer.kind}")
    k2 = shrink_kernel(layer.k)
    if layer.k < 3:
        raise EvenKernel("branch_transform needs k >= 3")
    p1 = (layer.pad + 1) // 2
    p2 = layer.pad - p1
    c_in, c_out = layer.channels_in, layer.channels_out
    first = LayerSpec("conv", k=k2, channels_in=c_in, channels_out=c_out, stride=1, pad=p1, bias=not batchnorm)
    second = LayerSpec("conv", k=k2, channels_in=c_out, channels_out=c_out, stride=layer.stride, pad=p2, bias=not batchnorm)
    branch: list[LayerSpec] = [first]
    if batchnorm:
        branch.append(bn(c_out))
    branch.append(RELU)
    branch.append(second)
    if batchnorm:
        branch.append(bn(c_out))
    branch.append(RELU)
    return LayerSpec("branch_block", channels_in=c_in, channels_out=c_out, fusion=fusion, branch=tuple(branch))


def _starify(layers: Sequence[LayerSpec], fusion: FusionSpec, batchnorm: bool = False) -> tuple[LayerSpec, ...]:
    """Turn every ``conv, [batchnorm], relu`` run into a branch block."""
    out: list[LayerSpec] = []
    i = 0
    while i < len(layers):
        layer = layers[i]
        if layer.kind == "conv":
            j = i + 1
            if j < len(layers) and layers[j].kind == "batchnorm":
                j += 1
            if j < len(layers) and layers[j].kind == "relu":
                j += 1
            out.append(branch_transform(layer, fusion, batchnorm=batchnorm))
            i = j
        else:
            out.append(layer)
            i += 1
    return tuple(out)


# -- architectures -------------------------------------------------------------------


def build_lenet(
    star: bool = False,
    sort: bool = False,
    channels: Sequence[int] = (32, 32, 64),
    hidden: int = 64,
    num_classes: int = 10,
    input_shape: tuple[int, int, int] = (3, 32, 32),
    fusion: Optional[FusionSpec] = None,
) -> NetworkSpec:
    """Three 5×5 convs (pad 2) each followed by 3×3/2 pooling, then two fc layers.

    ``star`` replaces every conv by a two-branch block; ``sort`` adds the
    product term to those blocks. ``fusion`` overrides both for ablations.
    """
    c, h, w = input_shape
    layers: list[LayerSpec] = []
    cin = c
    for cout in channels:
        layers += [conv(cin, cout, 5, pad=2), RELU, pool(3, 2, 1)]
        cin = cout
        h, w = conv_output_size(h, 3, 2, 1), conv_output_size(w, 3, 2, 1)
    layers += [FLATTEN, fc(cin * h * w, hidden), RELU, fc(hidden, num_classes)]
    if star or fusion is not None:
        spec = fusion if fusion is not None else (BRANCH_SORT if sort else LINEAR_SUM)
        layers = list(_starify(layers, spec))
    name = "lenet" + ("*" if star or fusion is not None else "") + ("+sort" if sort and fusion is None else "")
    net = NetworkSpec(name, tuple(layers), num_classes, tuple(input_shape))
    validate(net)
    return net


def residual_block(cin: int, cout: int, stride: int, fusion: FusionSpec) -> LayerSpec:
    body = (conv(cin, cout, 3, stride, bias=False), bn(cout), RELU, conv(cout, cout, 3, 1, bias=False), bn(cout))
    shortcut: tuple[LayerSpec, ...] = ()
    if stride != 1 or cin != cout:
        shortcut = (conv(cin, cout, 1, stride, pad=0, bias=False), bn(cout))
    return LayerSpec("residual_block", channels_in=cin, channels_out=cout, stride=stride, fusion=fusion, body=body, shortcut=shortcut)


def build_resnet(
    n_blocks_per_stage: int = 3,
    width: int = 1,
    sort: bool = False,
    num_classes: int = 10,
    input_shape: tuple[int, int, int] = (3, 32, 32),
    base_channels: int = 16,
    fusion: Optional[FusionSpec] = None,
) -> NetworkSpec:
    """CIFAR-style ResNet with ``6n+2`` weighted layers; ``width`` multiplies every stage."""
    if n_blocks_per_stage < 1:
        raise ValueError("n_blocks_per_stage must be >= 1")
    merge = fusion if fusion is not None else (residual_spec() if sort else LINEAR_SUM)
    c0 = base_channels
    layers: list[LayerSpec] = [conv(input_shape[0], c0, 3, bias=False), bn(c0), RELU]
    cin = c0
    for stage, mult in enumerate((1, 2, 4)):
        cout = base_channels * mult * width
        for i in range(n_blocks_per_stage):
            stride = 2 if stage > 0 and i == 0 else 1
            layers.append(residual_block(cin, cout, stride, merge))
            cin = cout
    layers += [AVGPOOL, fc(cin, num_classes)]
    depth = 6 * n_blocks_per_stage + 2
    prefix = "wrn" if width > 1 else "resnet"
    name = f"{prefix}-{depth}" + (f"x{width}" if width > 1 else "") + ("+sort" if sort and fusion is None else "")
    net = NetworkSpec(name, tuple(layers), num_classes, tuple(input_shape))
    validate(net)
    return net


def build_vggish(
    depth: int = 10,
    width: int = 32,
    star: bool = False,
    sort: bool = False,
    num_classes: int = 10,
    input_shape: tuple[int, int, int] = (3, 32, 32),
    fusion: Optional[FusionSpec] = None,
    batchnorm: bool = False,
) -> NetworkSpec:
    """Approximate stand-in for the unspecified deep chain network: ``depth`` 3×3 convs
    spread over three pooled stages (channels ``width``, ``2*width``, ``4*width``) and three fc layers.

    ``batchnorm`` inserts BN after every conv (and inside every branch when starred).
    """
    if depth < 3:
        raise ValueError("depth must be >= 3")
    per_stage = [depth // 3 + (1 if s < depth % 3 else 0) for s in range(3)]
    c, h, w = input_shape
    layers: list[LayerSpec] = []
    cin = c
    for s, n in enumerate(per_stage):
        cout = width * 2**s
        for _ in range(n):
            layers += [conv(cin, cout, 3, bias=not batchnorm)] + ([bn(cout)] if batchnorm else []) + [RELU]
            cin = cout
        layers.append(pool(3, 2, 1))
        h, w = conv_output_size(h, 3, 2, 1), conv_output_size(w, 3, 2, 1)
    hidden = 8 * width
    layers += [FLATTEN, fc(cin * h * w, hidden), RELU, fc(hidden, hidden), RELU, fc(hidden, num_classes)]
    if star or fusion is not None:
        spec = fusion if fusion is not None else (BRANCH_SORT if sort else LINEAR_SUM)
        layers = list(_starify(layers, spec, batchnorm=batchnorm))
    net = NetworkSpec(f"vggish-{depth}" + ("*" if star or fusion is not None else ""), tuple(layers), num_classes, tuple(input_shape))
    validate(net)
    return net


def build_mlp(
    in_dim: int = 2,
    hidden: int = 16,
    num_classes: int = 2,
    star: bool = False,
    sort: bool = False,
    fusion: Optional[FusionSpec] = None,
    depth: int = 1,
) -> NetworkSpec:
    """``depth`` hidden layers; with ``star`` each is two fc+ReLU branches fused."""
    if depth < 1:
        raise ValueError("depth must be >= 1")
    spec = None
    if star or fusion is not None:
        spec = fusion if fusion is not None else (BRANCH_SORT if sort else LINEAR_SUM)
    hidden_layers: list[LayerSpec] = []
    din = in_dim
    for _ in range(depth):
        if spec is None:
            hidden_layers += [fc(din, hidden), RELU]
        else:
            hidden_layers.append(LayerSpec("branch_block", channels_in=din, channels_out=hidden, fusion=spec, branch=(fc(din, hidden), RELU)))
        din = hidden
    name = "mlp" + (f"-{depth}" if depth > 1 else "") + ("*" if spec is not None else "")
    net = NetworkSpec(name, tuple(hidden_layers) + (fc(hidden, num_classes),), num_classes, (in_dim,))
    validate(net)
    return net


def with_fusion(net: NetworkSpec, fusion: FusionSpec) -> NetworkSpec:
    """Copy of ``net`` with every block's merge replaced by ``fusion``."""

    def swap(layers):
        out = []
        for layer in layers:
            if layer.kind in ("branch_block", "residual_block"):
                layer = replace(layer, fusion=fusion)
            out.append(layer)
        return tuple(out)

    return replace(net, layers=swap(net.layers))


def iter_layers(layers: Sequence[LayerSpec]):
    """Depth-first walk over layers including those nested in blocks (branches counted twice)."""
    for layer in layers:
        yield layer
        if layer.kind == "branch_block":
            for _ in range(2):
                yield from iter_layers(layer.branch)
        elif layer.kind == "residual_block":
            yield from iter_layers(layer.body)
            yield from iter_layers(layer.shortcut)


def count_params(net: NetworkSpec) -> int:
    total = 0
    for layer in iter_layers(net.layers):
        if layer.kind == "conv":
            total += layer.channels_out * layer.channels_in * layer.k * layer.k + (layer.channels_out if layer.bias else 0)
        elif layer.kind == "fc":
            total += layer.channels_in * layer.channels_out + layer.channels_out
        elif layer.kind == "batchnorm":
            total += 2 * layer.channels_in
    return total


def weighted_depth(net: NetworkSpec) -> int:
    """Conv/fc layers along the longest path (shortcut projections excluded)."""

    def depth(layers):
        d = 0
        for layer in layers:
            if layer.kind in ("conv", "fc"):
                d += 1
            elif layer.kind == "branch_block":
                d += depth(layer.branch)
            elif layer.kind == "residual_block":
                d += depth(layer.body)
        return d

    return depth(net.layers)


def build_network(name: str, **kw) -> NetworkSpec:
    builders = {"lenet": build_lenet, "resnet": build_resnet, "vggish": build_vggish, "mlp": build_mlp}
    if name not in builders:
        raise ValueError(f"unknown network {name!r}; choose from {sorted(builders)}")
    return builders[name](**kw)

