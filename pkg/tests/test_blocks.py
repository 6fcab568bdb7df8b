import numpy as np
import pytest

from lmobilenet import kernels as K
from lmobilenet.analysis import count_params, op_census
from lmobilenet.blocks import (
    LmbConfig,
    lmb_conv_weight_count,
    make_lmb_s1,
    make_lmb_s2,
    make_mbv2_bottleneck,
    make_snv2_unit,
    parallel_branches,
)
from lmobilenet.errors import ConfigurationError
from lmobilenet.graph import ModelGraph
from lmobilenet.kernels import BnParams, ConvParams


def as_graph(frag, c, hw=8):
    return ModelGraph(frag.nodes, (c, hw, hw), "frag")


def conv_weights(graph):
    return sum(int(np.prod(graph.slots[f"{n.id}.weight"])) for n in graph.nodes if n.kind in ("conv", "dwconv"))


def test_lmb_s1_shape_and_expansion():
    frag = make_lmb_s1(LmbConfig(32, 1))
    g = as_graph(frag, 32)
    assert g.shapes[frag.exit] == (32, 8, 8)
    assert g.shapes[frag.by_kind("concat")[0].id][0] == 128
    assert frag.out_channels == 32 and frag.scale == 1


def test_lmb_s1_weight_count():
    g = as_graph(make_lmb_s1(LmbConfig(32, 1)), 32)
    assert conv_weights(g) == 2 * (32 * 64) + 9 * 64 + 128 * 32 == 8768
    assert lmb_conv_weight_count(32, 1) == 8768


def test_lmb_s1_census_and_structure():
    frag = make_lmb_s1(LmbConfig(16, 1))
    census = op_census(as_graph(frag, 16))
    # 4 convs, each with BN; ReLU on all but the linear projection
    assert (census.BatchNorm, census.ReLU, census.Eltwise, census.Concat) == (4, 3, 1, 1)
    assert census.Conv == 3 and census.DepthwiseConv == 1
    assert parallel_branches(frag) == 2
    proj = frag.by_kind("eltwise")[0]
    assert frag.entry in proj.inputs


def test_lmb_s2_shape_and_params():
    frag = make_lmb_s2(LmbConfig(24, 2))
    g = as_graph(frag, 24, 32)
    assert g.shapes[frag.exit] == (48, 16, 16)
    pool = frag.by_kind("maxpool")[0]
    assert pool.attrs["kernel"] == (3, 3) and pool.attrs["stride"] == (2, 2)
    assert conv_weights(g) == 24 * 24 + 9 * 24 == lmb_conv_weight_count(24, 2)
    census = op_census(g)
    assert (census.BatchNorm, census.ReLU, census.Eltwise, census.Concat) == (4, 3, 0, 1)
    assert parallel_branches(frag) == 2


@pytest.mark.parametrize("maker,stride", [(make_lmb_s1, 2), (make_lmb_s2, 1)])
def test_lmb_wrong_stride(maker, stride):
    with pytest.raises(ConfigurationError):
        maker(LmbConfig(8, stride))


def test_lmb_has_no_grouped_conv():
    for frag in (make_lmb_s1(LmbConfig(16, 1)), make_lmb_s2(LmbConfig(16, 2))):
        for n in frag.nodes:
            if n.kind in ("conv", "dwconv"):
                assert n.conv.groups in (1, n.conv.in_channels)


def test_lmb_avgpool_option():
    frag = make_lmb_s2(LmbConfig(8, 2, pool="avg"))
    assert frag.by_kind("avgpool") and not frag.by_kind("maxpool")
    with pytest.raises(ConfigurationError):
        LmbConfig(8, 2, pool="median")


def test_mbv2_examples():
    frag = make_mbv2_bottleneck(32, 32, 1, 6)
    assert op_census(as_graph(frag, 32)).Eltwise == 1
    assert parallel_branches(frag) == 2
    frag = make_mbv2_bottleneck(32, 64, 2, 6)
    g = as_graph(frag, 32, 8)
    assert op_census(g).Eltwise == 0 and g.shapes[frag.exit] == (64, 4, 4)
    frag = make_mbv2_bottleneck(16, 16, 1, 1)
    expand = frag.nodes[0]
    assert expand.conv.in_channels == expand.conv.out_channels == 16 and expand.conv.kernel == (1, 1)
    with pytest.raises(ConfigurationError):
        make_mbv2_bottleneck(8, 8, 3, 6)


def test_mbv2_projection_is_linear():
    frag = make_mbv2_bottleneck(8, 8, 1, 6)
    ids = [n.id for n in frag.nodes]
    proj_bn = ids.index("mbv2.proj_bn")
    assert frag.nodes[proj_bn + 1].kind == "eltwise"


def test_snv2_examples():
    frag = make_snv2_unit(48, 1)
    g = as_graph(frag, 48)
    c = op_census(g)
    assert g.shapes[frag.exit] == (48, 8, 8)
    assert (c.Concat, c.Eltwise, c.Shuffle) == (1, 0, 1)
    assert parallel_branches(frag) == 2
    frag = make_snv2_unit(48, 2)
    g = as_graph(frag, 48, 8)
    assert g.shapes[frag.exit] == (96, 4, 4)
    assert parallel_branches(frag) == 2
    with pytest.raises(ConfigurationError):
        make_snv2_unit(47, 1)


def test_snv2_width_change_at_stride_one():
    frag = make_snv2_unit(24, 1, out_ch=116, downsample=True)
    assert as_graph(frag, 24).shapes[frag.exit] == (116, 8, 8)


def _bn(c):
    return BnParams.identity(c, np.float64, mode="inference")


def test_lmb_s1_forward_matches_hand_composition(rng):
    c = 4
    frag = make_lmb_s1(LmbConfig(c, 1))
    g = as_graph(frag, c, 5)
    g.init_params(3, np.float64)
    x = rng.standard_normal((2, c, 5, 5))
    W = lambda name: g.params[f"lmb.{name}.weight"]
    cv = lambda t, name, p: K.batch_norm(K.conv2d_forward(t, W(name), None, p), _bn(p.out_channels))
    a = K.relu(cv(x, "a_pw", ConvParams(c, 2 * c)))
    b = K.relu(cv(x, "b_pw", ConvParams(c, 2 * c)))
    b = K.relu(cv(b, "b_dw", ConvParams(2 * c, 2 * c, 3, 1, 1, 2 * c)))
    y = cv(K.concat_channels([a, b]), "proj", ConvParams(4 * c, c)) + x
    np.testing.assert_allclose(g.forward(x), y, rtol=1e-12, atol=1e-12)


def test_lmb_s2_forward_matches_hand_composition(rng):
    c = 4
    frag = make_lmb_s2(LmbConfig(c, 2))
    g = as_graph(frag, c, 6)
    g.init_params(5, np.float64)
    x = rng.standard_normal((2, c, 6, 6))
    W = lambda name: g.params[f"lmb.{name}.weight"]
    a = K.batch_norm(K.maxpool2d(x, 3, 2, 1)[0], _bn(c))
    b = K.relu(K.batch_norm(K.conv2d_forward(x, W("b_pw"), None, ConvParams(c, c)), _bn(c)))
    b = K.relu(K.batch_norm(K.conv2d_forward(b, W("b_dw"), None, ConvParams(c, c, 3, 2, 1, c)), _bn(c)))
    y = K.relu(K.batch_norm(K.concat_channels([a, b]), _bn(2 * c)))
    np.testing.assert_allclose(g.forward(x), y, rtol=1e-12, atol=1e-12)


def test_pool_branch_is_parameter_free():
    frag = make_lmb_s2(LmbConfig(8, 2))
    g = as_graph(frag, 8)
    pool = frag.by_kind("maxpool")[0].id
    assert not [k for k in g.slots if k.startswith(pool + ".")]
    assert count_params(g) > 0
