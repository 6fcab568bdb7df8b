import math

import numpy as np
import pytest

from lmobilenet import kernels
from lmobilenet.dataio import Dataset
from lmobilenet.errors import ConfigurationError, DataError, NumericError, StateError
from lmobilenet.gradcheck import battery_graphs
from lmobilenet.graph import ModelGraph
from lmobilenet.kernels import ConvParams
from lmobilenet.nodes import INPUT, NodeSpec, conv_node
from lmobilenet.presets import lmobilenet_narrow_config
from lmobilenet.training import (
    OptimConfig,
    OptimState,
    evaluate,
    fit,
    grad_check,
    lr_at_epoch,
    nag_step,
    softmax_xent,
    xavier_init,
)


def test_xavier_bound_and_determinism():
    w = xavier_init((16, 16, 3, 3), 7)
    bound = math.sqrt(6 / 288)
    assert abs(bound - 0.14434) < 1e-5
    assert np.abs(w).max() <= bound and np.abs(w).max() > 0.9 * bound
    assert np.array_equal(w, xavier_init((16, 16, 3, 3), 7))
    assert not np.array_equal(w, xavier_init((16, 16, 3, 3), 8))


def test_xavier_mean_statistics():
    w = xavier_init((64, 64, 3, 3), 0, dtype=np.float64)  # 36864 draws
    bound = math.sqrt(6 / (2 * 9 * 64))
    sigma_mean = bound / math.sqrt(3) / math.sqrt(w.size)
    assert abs(w.mean()) < 3 * sigma_mean


def test_xavier_fc_and_rank_errors():
    w = xavier_init((256, 10), 0)
    assert np.abs(w).max() <= math.sqrt(6 / 266)
    with pytest.raises(ConfigurationError):
        xavier_init((3, 3, 3), 0)


def test_softmax_xent_examples():
    loss, d = softmax_xent(np.zeros((4, 10)), np.arange(4))
    assert loss == pytest.approx(math.log(10), abs=1e-12)
    np.testing.assert_allclose(d.sum(axis=1), 0, atol=1e-15)
    logits = np.array([[1000.0, 0.0, 0.0]])
    loss, _ = softmax_xent(logits, np.array([0]))
    assert loss == pytest.approx(0.0, abs=1e-12)
    loss, _ = softmax_xent(logits, np.array([1]))
    assert loss == pytest.approx(1000.0)
    with pytest.raises(DataError):
        softmax_xent(np.zeros((2, 3)), np.array([0, 3]))


def test_softmax_xent_gradient_finite_differences(rng):
    z = rng.standard_normal((3, 5))
    y = np.array([0, 4, 2])
    _, d = softmax_xent(z, y)
    eps = 1e-6
    for idx in np.ndindex(z.shape):
        zp, zm = z.copy(), z.copy()
        zp[idx] += eps
        zm[idx] -= eps
        num = (softmax_xent(zp, y)[0] - softmax_xent(zm, y)[0]) / (2 * eps)
        assert d[idx] == pytest.approx(num, abs=1e-8)


def test_nag_hand_evaluated():
    p = {"w": np.array([1.0])}
    state = OptimState()
    nag_step(p, {"w": np.array([0.5])}, state, OptimConfig(momentum=0.9, weight_decay=0.0), 0.1)
    assert state.velocity["w"][0] == pytest.approx(0.5)
    assert p["w"][0] == pytest.approx(0.905)


def test_nag_degenerates_to_sgd(rng):
    theta = rng.standard_normal(5)
    g = rng.standard_normal(5)
    p = {"w": theta.copy()}
    state = OptimState()
    for _ in range(3):
        nag_step(p, {"w": g}, state, OptimConfig(momentum=0.0, weight_decay=0.0), 0.05)
    np.testing.assert_allclose(p["w"], theta - 3 * 0.05 * g)


def test_nag_weight_decay_shrinks():
    p = {"w": np.array([10.0])}
    state = OptimState()
    cfg = OptimConfig(weight_decay=1e-2)
    prev = 10.0
    for _ in range(20):
        nag_step(p, {"w": np.array([0.0])}, state, cfg, 0.1)
        assert 0 < p["w"][0] < prev
        prev = p["w"][0]


def test_nag_shape_mismatch():
    with pytest.raises(StateError):
        nag_step({"w": np.zeros(3)}, {"w": np.zeros(4)}, OptimState(), OptimConfig(), 0.1)


@pytest.mark.parametrize("epoch,lr", [(0, 0.1), (149, 0.1), (150, 0.01), (224, 0.01), (225, 0.001), (319, 0.001)])
def test_lr_schedule(epoch, lr):
    assert lr_at_epoch(epoch) == pytest.approx(lr)


@pytest.mark.parametrize("epoch", [-1, 320])
def test_lr_schedule_range(epoch):
    with pytest.raises(ConfigurationError):
        lr_at_epoch(epoch)


def test_optim_defaults():
    cfg = OptimConfig()
    assert (cfg.lr0, cfg.momentum, cfg.weight_decay, cfg.batch_size) == (0.1, 0.9, 1e-4, 64)
    with pytest.raises(ConfigurationError):
        OptimConfig(drop_epochs=(225, 150))


# -- gradient checking ---------------------------------------------------------


def _checked(name, seed=0):
    g = battery_graphs()[name]
    g.init_params(seed, np.float64)
    rng = np.random.default_rng(seed)
    for key in g.params:
        if key.endswith((".gamma", ".beta", ".bias")):
            g.params[key][...] = rng.uniform(0.5, 1.5, g.params[key].shape)
    x = rng.standard_normal((4, *g.input_shape))
    y = rng.integers(0, 3, 4)
    return g, x, y


def test_grad_check_single_conv():
    g, x, y = _checked("conv")
    rep = grad_check(g, x, y, 1e-4)
    assert rep.passed and set(rep.per_kind) == {"conv", "fc", "input"}


def test_grad_check_lmb_block():
    g, x, y = _checked("lmb_block")
    rep = grad_check(g, x, y, 1e-4, samples=60)
    assert rep.passed, rep.per_kind
    assert {"conv", "dwconv", "bn", "fc", "input"} <= set(rep.per_kind)


def test_grad_check_detects_sign_flip(monkeypatch):
    g, x, y = _checked("conv")
    real = kernels.op_backward

    def corrupted(kind, grad_out, ctx):
        gin, gp = real(kind, grad_out, ctx)
        if kind == "conv":
            gp = {k: -v for k, v in gp.items()}
        return gin, gp

    monkeypatch.setattr(kernels, "op_backward", corrupted)
    rep = grad_check(g, x, y, 1e-4)
    assert not rep.passed and rep.worst[0] == "conv"


def test_grad_check_impossible_tolerance():
    g, x, y = _checked("relu")
    assert not grad_check(g, x, y, 1e-12).passed


def test_grad_check_requires_float64():
    g, x, y = _checked("conv")
    with pytest.raises(ConfigurationError):
        grad_check(g.astype(np.float32), x, y)


def test_grad_check_non_finite():
    g, x, y = _checked("conv")
    x[0, 0, 0, 0] = np.nan
    with pytest.raises(NumericError):
        grad_check(g, x, y)


# -- fitting ---------------------------------------------------------------------


def stripes(n, seed, amplitude=0.5):
    """Two classes: horizontal versus vertical sinusoidal stripes in noise."""
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    yy, xx = np.mgrid[0:32, 0:32]
    f = rng.uniform(0.3, 0.6, n)[:, None, None]
    ph = rng.uniform(0, 2 * np.pi, n)[:, None, None]
    axis = np.where(y[:, None, None] == 1, yy, xx)
    x = rng.standard_normal((n, 3, 32, 32)) + amplitude * np.sin(f * axis + ph)[:, None]
    return Dataset(x.astype(np.float32), y, 2, "train")


def tiny_graph():
    nodes = [
        conv_node("c", INPUT, ConvParams(3, 4, 3, 2, 1)),
        NodeSpec("bn", "bn", ("c",)),
        NodeSpec("r", "relu", ("bn",)),
        NodeSpec("gap", "gap", ("r",)),
        NodeSpec("fc", "fc", ("gap",), {"classes": 2}),
    ]
    return ModelGraph(nodes, (3, 32, 32), "tiny").init_params(0)


def test_zero_lr_freezes_parameters():
    g = tiny_graph()
    before = {k: v.copy() for k, v in g.params.items()}
    fit(g, stripes(64, 0), OptimConfig(weight_decay=0.0, batch_size=16), epochs=1, lr_override=0.0)
    for k in g.learnable_keys():
        assert np.array_equal(before[k], g.params[k]), k
    # running statistics still track the batches
    assert not np.array_equal(before["bn.running_mean"], g.params["bn.running_mean"])


def test_fit_is_deterministic():
    logs = []
    for _ in range(2):
        g = tiny_graph()
        recs = fit(g, stripes(96, 1), OptimConfig(batch_size=16), epochs=2, rng_seed=5)
        logs.append(([(r.epoch, r.lr, r.train_loss, r.train_acc) for r in recs], g.params["fc.weight"].tobytes()))
    assert logs[0] == logs[1]


def test_single_small_step_lowers_loss():
    g = tiny_graph().astype(np.float64)
    ds = stripes(32, 2)
    x, y = ds.images.astype(np.float64), ds.labels
    before = softmax_xent(g.copy().forward(x, "training"), y)[0]
    from lmobilenet.training import train_step

    train_step(g, x, y, OptimState(), OptimConfig(weight_decay=0.0), 1e-2)
    after = softmax_xent(g.forward(x, "training"), y)[0]
    assert after < before


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_fit_errors():
    g = tiny_graph()
    with pytest.raises(ConfigurationError):
        fit(g, stripes(8, 0), OptimConfig(batch_size=1))
    with pytest.raises(StateError):
        fit(ModelGraph(g.nodes, g.input_shape), stripes(8, 0))
    with pytest.raises(NumericError, match="epoch 0, step 0"):
        bad = stripes(8, 0)
        bad.images[:] = np.inf
        fit(g, bad, OptimConfig(batch_size=4))


def test_narrow_network_learns_synthetic_two_class_task():
    """Trainability proxy: narrow network, default optimizer settings."""
    g = lmobilenet_narrow_config(2).build().init_params(0)
    recs = fit(g, stripes(384, 3), OptimConfig(), epochs=3, rng_seed=0)
    assert recs[-1].train_acc >= 0.85
    assert recs[-1].train_loss < recs[0].train_loss
    test = stripes(256, 4)
    assert evaluate(g, test.images, test.labels) >= 0.85


def test_random_init_is_chance_level():
    g = lmobilenet_narrow_config(10).build().init_params(0)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1000, 3, 32, 32)).astype(np.float32)
    y = rng.integers(0, 10, 1000)
    assert abs(evaluate(g, x, y) - 0.10) <= 0.05
