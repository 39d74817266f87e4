import numpy as np
import pytest

from sortnet.autodiff import Tape, Tensor
from sortnet.errors import EvenKernel, ShapeMismatch
from sortnet.fusion import BRANCH_SORT, LINEAR_SUM, residual_spec
from sortnet.model import Network, _build
from sortnet.netbuild import (
    NetworkSpec,
    branch_transform,
    build_lenet,
    build_mlp,
    build_network,
    build_resnet,
    build_vggish,
    chain_shapes,
    conv,
    count_params,
    fc,
    iter_layers,
    layer_output_shape,
    pool,
    receptive_field,
    shrink_kernel,
    validate,
    weighted_depth,
    with_fusion,
)


def oracle_support(layers, lo: int, hi: int) -> tuple[int, int]:
    """Input index interval feeding output positions ``[lo, hi]``, found by walking
    every layer backwards and enumerating kernel taps (unclipped by borders)."""
    for layer in reversed(layers):
        if layer.kind in ("conv", "pool"):
            lo, hi = lo * layer.stride - layer.pad, hi * layer.stride - layer.pad + layer.k - 1
        elif layer.kind == "branch_block":
            lo, hi = oracle_support(layer.branch, lo, hi)
        elif layer.kind == "residual_block":
            b = oracle_support(layer.body, lo, hi)
            s = oracle_support(layer.shortcut, lo, hi) if layer.shortcut else (lo, hi)
            lo, hi = min(b[0], s[0]), max(b[1], s[1])
    return lo, hi


def oracle_rf(layers) -> int:
    lo, hi = oracle_support(list(layers), 0, 0)
    return hi - lo + 1


def spatial_prefix(net: NetworkSpec):
    layers = []
    for layer in net.layers:
        if layer.kind in ("flatten", "avgpool", "fc"):
            break
        layers.append(layer)
    return layers


def empirical_rf(block, channels: int, size: int = 31) -> int:
    """Width of the input region with nonzero gradient for the centre output pixel."""
    seq = _build((block,), np.random.default_rng(0), "rf")
    for p in seq.params():
        p.data = np.abs(p.data) + 0.1
    x = Tensor(np.ones((1, channels, size, size)), requires_grad=True)
    with Tape() as tape:
        out = seq(x, False)
    c = out.shape[2] // 2
    g = np.zeros(out.shape)
    g[0, 0, c, c] = 1.0
    tape.backward(out, g)
    rows = np.flatnonzero(np.abs(tape.grad(x)[0]).sum(axis=(0, 2)))
    return int(rows[-1] - rows[0] + 1)


class TestShrinkKernel:
    @pytest.mark.parametrize("k,expected", [(5, 3), (3, 2), (1, 1), (7, 4)])
    def test_values(self, k, expected):
        assert shrink_kernel(k) == expected

    @pytest.mark.parametrize("k", [0, 2, 4, -3])
    def test_even_or_nonpositive(self, k):
        with pytest.raises(EvenKernel):
            shrink_kernel(k)


class TestReceptiveField:
    def test_single_conv(self):
        assert receptive_field([conv(3, 8, 5)])[-1].rf == 5

    def test_two_stacked_convs(self):
        assert receptive_field([conv(3, 8, 3), conv(8, 8, 3)])[-1].rf == 5

    def test_conv_then_pool(self):
        # rf = 3 + (3 - 1) * 1 = 5; the jump of 2 only affects later layers
        layers = [conv(3, 8, 3), pool(3, 2, 1)]
        assert receptive_field(layers)[-1].rf == 5 == oracle_rf(layers)

    def test_pool_then_conv(self):
        layers = [pool(3, 2, 1), conv(3, 8, 3)]
        assert receptive_field(layers)[-1].rf == 7 == oracle_rf(layers)

    @pytest.mark.parametrize(
        "net",
        [
            build_lenet(),
            build_lenet(star=True),
            build_lenet(star=True, sort=True),
            build_resnet(3),
            build_resnet(3, sort=True),
            build_resnet(1, width=4),
            build_vggish(),
            build_vggish(star=True, sort=True),
        ],
        ids=lambda n: n.name,
    )
    def test_recurrence_matches_oracle(self, net):
        prefix = spatial_prefix(net)
        table = receptive_field(prefix)
        for i in range(len(prefix)):
            assert table[i].rf == oracle_rf(prefix[: i + 1])


class TestBranchTransform:
    @pytest.mark.parametrize("k", [3, 5, 7])
    @pytest.mark.parametrize("stride", [1, 2])
    def test_preserves_shape_and_rf(self, k, stride):
        c = conv(3, 6, k, stride)
        block = branch_transform(c)
        assert layer_output_shape(block, (3, 17, 17)) == layer_output_shape(c, (3, 17, 17))
        assert receptive_field([block])[-1].rf == receptive_field([c])[-1].rf == k
        assert receptive_field([block])[-1].jump == stride
        assert oracle_rf([block]) == k

    @pytest.mark.parametrize("k", [3, 5, 7])
    def test_empirical_rf_from_gradients(self, k):
        assert empirical_rf(branch_transform(conv(2, 2, k)), 2) == k
        assert empirical_rf(conv(2, 2, k), 2) == k

    def test_five_becomes_two_threes_per_branch(self):
        block = branch_transform(conv(3, 8, 5))
        convs = [l for l in block.branch if l.kind == "conv"]
        assert [l.k for l in convs] == [3, 3]
        assert block.fusion == BRANCH_SORT
        assert [l.kind for l in block.branch] == ["conv", "relu", "conv", "relu"]

    def test_three_becomes_two_twos(self):
        block = branch_transform(conv(3, 8, 3))
        assert [l.k for l in block.branch if l.kind == "conv"] == [2, 2]

    def test_channels_preserved(self):
        block = branch_transform(conv(3, 8, 5))
        convs = [l for l in block.branch if l.kind == "conv"]
        assert (convs[0].channels_in, convs[-1].channels_out) == (3, 8)

    def test_batchnorm_variant_drops_biases(self):
        block = branch_transform(conv(3, 8, 3), batchnorm=True)
        assert [l.kind for l in block.branch] == ["conv", "batchnorm", "relu", "conv", "batchnorm", "relu"]
        assert not any(l.bias for l in block.branch if l.kind == "conv")

    def test_rejects_even_and_non_conv(self):
        with pytest.raises(EvenKernel):
            branch_transform(conv(3, 8, 4))
        with pytest.raises(ValueError):
            branch_transform(pool())


class TestArchitectures:
    def test_lenet_layout(self):
        net = build_lenet()
        kinds = [l.kind for l in net.layers]
        assert kinds.count("conv") == 3 and kinds.count("pool") == 3 and kinds.count("fc") == 2
        assert all(l.k == 5 and l.pad == 2 for l in net.layers if l.kind == "conv")
        assert all(l.k == 3 and l.stride == 2 for l in net.layers if l.kind == "pool")

    def test_lenet_star_has_twelve_convs(self):
        net = build_lenet(star=True)
        convs = [l for l in iter_layers(net.layers) if l.kind == "conv"]
        assert len(convs) == 12 and all(l.k == 3 for l in convs)
        assert all(l.fusion == LINEAR_SUM for l in net.layers if l.kind == "branch_block")

    def test_lenet_sort_toggles_product(self):
        plain, sort = build_lenet(star=True), build_lenet(star=True, sort=True)
        assert with_fusion(plain, BRANCH_SORT).layers == sort.layers

    def test_resnet20(self):
        net = build_resnet(3)
        assert weighted_depth(net) == 20
        blocks = [l for l in net.layers if l.kind == "residual_block"]
        assert len(blocks) == 9
        assert [b.channels_out for b in blocks[::3]] == [16, 32, 64]
        assert sum(1 for b in blocks if b.stride == 2) == 2

    def test_resnet_sort_merge(self):
        net = build_resnet(3, sort=True)
        assert all(l.fusion == residual_spec() for l in net.layers if l.kind == "residual_block")

    def test_wrn_width(self):
        net = build_resnet(1, width=4)
        assert [l.channels_out for l in net.layers if l.kind == "residual_block"] == [64, 128, 256]

    def test_resnet_needs_blocks(self):
        with pytest.raises(ValueError):
            build_resnet(0)

    def test_vggish_has_ten_convs_three_pools_three_fc(self):
        kinds = [l.kind for l in build_vggish().layers]
        assert (kinds.count("conv"), kinds.count("pool"), kinds.count("fc")) == (10, 3, 3)

    @pytest.mark.parametrize(
        "make",
        [
            lambda s: build_lenet(star=True, sort=s),
            lambda s: build_resnet(3, sort=s),
            lambda s: build_resnet(2, width=2, sort=s),
            lambda s: build_vggish(star=True, sort=s),
            lambda s: build_vggish(star=True, sort=s, batchnorm=True),
            lambda s: build_mlp(star=True, sort=s),
        ],
    )
    def test_parameter_parity(self, make):
        plain, sort = make(False), make(True)
        assert count_params(plain) == count_params(sort)
        assert Network(plain).num_params() == Network(sort).num_params() == count_params(plain)

    @pytest.mark.parametrize("name", ["lenet", "resnet", "vggish"])
    def test_builds_validate_for_cifar_input(self, name):
        shapes = validate(build_network(name))
        assert shapes[0] == (3, 32, 32) and shapes[-1] == (10,)

    def test_unknown_network(self):
        with pytest.raises(ValueError):
            build_network("alexnet")


class TestSpecs:
    def test_shape_chaining_error(self):
        with pytest.raises(ShapeMismatch):
            validate(NetworkSpec("bad", (conv(3, 4, 3), fc(10, 10)), 10))

    def test_chain_shapes(self):
        shapes = chain_shapes([conv(3, 4, 3, 2), pool(3, 2, 1)], (3, 32, 32))
        assert shapes == [(3, 32, 32), (4, 16, 16), (4, 8, 8)]

    @pytest.mark.parametrize("net", [build_lenet(star=True, sort=True), build_resnet(1, sort=True), build_mlp(star=True)])
    def test_json_round_trip(self, net, tmp_path):
        assert NetworkSpec.from_json(net.to_json()) == net
        net.save(tmp_path / "net.json")
        assert NetworkSpec.load(tmp_path / "net.json") == net
