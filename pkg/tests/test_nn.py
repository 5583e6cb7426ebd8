"""Fusion network layers: structure parsing, forward semantics, backprop."""

import numpy as np
import pytest

from ppcn.errors import ConfigError, ShapeError, StateError
from ppcn.nn import (BatchNorm, Conv1x1, PpcnModel, ReLU, StructureSpec,
                     init_params, parameter_count, parse_structure)

STOKES_WEIGHT = np.array([
    [1.0, 0.0, 1.0, 0.0],     # s0 = i0 + i90
    [1.0, 0.0, -1.0, 0.0],    # s1 = i0 - i90
    [0.0, 1.0, 0.0, -1.0],    # s2 = i45 - i135
])


# ---------------------------------------------------------------------------
# structure strings and counting

def test_parse_structure_basic():
    assert parse_structure("4-8-16-8-3").sizes == (4, 8, 16, 8, 3)
    assert parse_structure("4-3").sizes == (4, 3)


@pytest.mark.parametrize("bad", ["4", "4-0-3", "4--3", "4-x-3", "", "4-3.5"])
def test_parse_structure_rejects(bad):
    with pytest.raises(ConfigError):
        parse_structure(bad)


@pytest.mark.parametrize("text,count", [
    ("4-3", 15),
    ("4-8-16-8-3", 347),
    ("4-48-96-32-3", 8147),
    ("4-96-128-64-32-3", 23331),
    ("4-128-96-48-32-3", 19347),
])
def test_parameter_count_closed_form(text, count):
    assert parameter_count(parse_structure(text)) == count


@pytest.mark.parametrize("text", ["4-3", "4-8-16-8-3", "4-48-96-32-3",
                                  "4-96-128-64-32-3", "4-128-96-48-32-3"])
def test_counts_match_allocated_scalars(text):
    spec = parse_structure(text)
    model = PpcnModel(spec)
    allocated = sum(getattr(layer, attr).size
                    for _, layer, attr in model.parameters())
    assert allocated == parameter_count(spec)
    assert model.parameter_count() == parameter_count(spec)


# ---------------------------------------------------------------------------
# conv1x1

def test_conv1x1_identity():
    layer = Conv1x1(3, 3, dtype=np.float64)
    layer.w = np.eye(3)
    layer.b = np.zeros(3)
    x = np.random.default_rng(0).standard_normal((2, 3, 4, 4))
    assert np.allclose(layer.forward(x, train=False), x)


def test_conv1x1_computes_stokes_planes():
    rng = np.random.default_rng(1)
    raw = rng.uniform(0, 1, (1, 4, 5, 5))
    layer = Conv1x1(4, 3, dtype=np.float64)
    layer.w = STOKES_WEIGHT.copy()
    layer.b = np.zeros(3)
    y = layer.forward(raw, train=False)
    assert np.allclose(y[0, 0], raw[0, 0] + raw[0, 2])
    assert np.allclose(y[0, 1], raw[0, 0] - raw[0, 2])
    assert np.allclose(y[0, 2], raw[0, 1] - raw[0, 3])


@pytest.mark.parametrize("seed", range(5))
def test_conv1x1_matches_per_pixel_matvec(seed):
    rng = np.random.default_rng(seed)
    layer = Conv1x1(3, 2, dtype=np.float64)
    layer.w = rng.standard_normal((2, 3))
    layer.b = rng.standard_normal(2)
    x = rng.standard_normal((1, 3, 2, 2))
    y = layer.forward(x, train=False)
    for i in range(2):
        for j in range(2):
            assert np.allclose(y[0, :, i, j], layer.w @ x[0, :, i, j] + layer.b,
                               atol=1e-12)


def test_conv1x1_backward_worked_cases():
    rng = np.random.default_rng(2)
    layer = Conv1x1(3, 3, dtype=np.float64)
    layer.w = np.eye(3)
    layer.b = np.zeros(3)
    x = rng.standard_normal((2, 3, 4, 4))
    layer.forward(x, train=True)
    g = rng.standard_normal((2, 3, 4, 4))
    gx = layer.backward(g)
    assert np.allclose(gx, g)                     # identity weight passes grads
    assert np.allclose(layer.gb, g.sum(axis=(0, 2, 3)))

    layer.forward(x, train=True)
    gx = layer.backward(np.zeros_like(g))
    assert np.allclose(gx, 0) and np.allclose(layer.gw, 0) and np.allclose(layer.gb, 0)


def test_conv1x1_channel_mismatch():
    layer = Conv1x1(4, 3)
    with pytest.raises(ShapeError):
        layer.forward(np.zeros((1, 5, 4, 4), np.float32), train=False)


def test_backward_before_forward_is_a_state_error():
    layer = Conv1x1(3, 3)
    with pytest.raises(StateError):
        layer.backward(np.zeros((1, 3, 2, 2), np.float32))


def test_infer_forward_does_not_arm_backward():
    layer = Conv1x1(3, 3)
    layer.forward(np.zeros((1, 3, 2, 2), np.float32), train=False)
    with pytest.raises(StateError):
        layer.backward(np.zeros((1, 3, 2, 2), np.float32))


# ---------------------------------------------------------------------------
# relu

def test_relu_worked_example():
    layer = ReLU()
    x = np.array([[[[-1.0, 0.0, 2.0]]]])
    assert layer.forward(x, train=True).ravel().tolist() == [0.0, 0.0, 2.0]
    g = layer.backward(np.full_like(x, 5.0))
    assert g.ravel().tolist() == [0.0, 0.0, 5.0]   # subgradient 0 at the kink


# ---------------------------------------------------------------------------
# batch norm

def test_batchnorm_one_two_three():
    layer = BatchNorm(1, dtype=np.float64)
    x = np.array([1.0, 2.0, 3.0]).reshape(3, 1, 1, 1)
    y = layer.forward(x, train=True).ravel()
    expect = (np.array([1.0, 2.0, 3.0]) - 2.0) / np.sqrt(2.0 / 3.0 + 1e-5)
    assert np.allclose(y, expect, atol=1e-12)
    assert abs(y[0] + 1.22474) < 1e-4
    assert abs(y[2] - 1.22474) < 1e-4


def test_batchnorm_constant_channel_maps_to_zero():
    layer = BatchNorm(2, dtype=np.float64)
    x = np.full((2, 2, 3, 3), 7.0)
    assert np.allclose(layer.forward(x, train=True), 0.0)


@pytest.mark.parametrize("seed", range(6))
def test_batchnorm_train_statistics(seed):
    rng = np.random.default_rng(seed)
    layer = BatchNorm(4, dtype=np.float64)
    x = rng.standard_normal((3, 4, 5, 5)) * 3.0 + 1.0
    y = layer.forward(x, train=True)
    mean = y.mean(axis=(0, 2, 3))
    var = y.var(axis=(0, 2, 3))
    assert np.abs(mean).max() < 1e-10
    assert np.abs(var - 1.0).max() < 1e-4     # eps keeps it just below 1


def test_batchnorm_running_stats_update():
    layer = BatchNorm(2, dtype=np.float64)
    rng = np.random.default_rng(3)
    x = rng.standard_normal((4, 2, 3, 3)) + 5.0
    batch_mean = x.mean(axis=(0, 2, 3))
    batch_var = x.var(axis=(0, 2, 3))          # biased, matching normalization
    layer.forward(x, train=True)
    assert np.allclose(layer.running_mean, 0.1 * batch_mean, atol=1e-10)
    assert np.allclose(layer.running_var, 0.9 * 1.0 + 0.1 * batch_var, atol=1e-10)


def test_batchnorm_infer_uses_running_stats_without_mutation():
    layer = BatchNorm(2, dtype=np.float64)
    rng = np.random.default_rng(4)
    layer.forward(rng.standard_normal((4, 2, 3, 3)), train=True)
    rm = layer.running_mean.copy()
    rv = layer.running_var.copy()
    x = rng.standard_normal((2, 2, 3, 3))
    y = layer.forward(x, train=False)
    expect = (x - rm[None, :, None, None]) / np.sqrt(rv[None, :, None, None] + 1e-5)
    assert np.allclose(y, expect, atol=1e-12)
    assert np.array_equal(layer.running_mean, rm)
    assert np.array_equal(layer.running_var, rv)


def test_batchnorm_single_element_batch_rejected():
    layer = BatchNorm(3)
    with pytest.raises(ConfigError):
        layer.forward(np.zeros((1, 3, 1, 1), np.float32), train=True)


# ---------------------------------------------------------------------------
# the assembled model

def test_minimal_model_computes_stokes():
    model = PpcnModel(StructureSpec((4, 3)), dtype=np.float64)
    out_layer = dict((name, layer) for name, layer in model._chain)["out"]
    out_layer.w = STOKES_WEIGHT.copy()
    out_layer.b = np.zeros(3)
    rng = np.random.default_rng(5)
    raw = rng.uniform(0, 1, (2, 4, 6, 6))
    y = model.forward(raw, train=False)
    assert np.allclose(y[:, 0], raw[:, 0] + raw[:, 2])
    assert np.allclose(y[:, 1], raw[:, 0] - raw[:, 2])
    assert np.allclose(y[:, 2], raw[:, 1] - raw[:, 3])


def test_fusion_unit_order_is_conv_relu_bn():
    names = [name for name, _ in PpcnModel(parse_structure("4-8-3"))._chain]
    assert names == ["fusion0.conv", "fusion0.relu", "fusion0.bn", "out"]
    names = [name for name, _ in
             PpcnModel(parse_structure("4-8-3"), bn_before_relu=True)._chain]
    assert names == ["fusion0.conv", "fusion0.bn", "fusion0.relu", "out"]


def test_unit_order_flag_changes_outputs():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((4, 4, 5, 5)).astype(np.float32)
    outs = []
    for flag in (False, True):
        model = PpcnModel(parse_structure("4-8-3"), bn_before_relu=flag)
        init_params(model, seed=0)
        outs.append(model.forward(x, train=True))
    assert not np.allclose(outs[0], outs[1])


@pytest.mark.parametrize("seed", range(4))
def test_model_is_pixel_wise(seed):
    """Infer-mode output at a pixel depends only on input at that pixel."""
    rng = np.random.default_rng(seed)
    model = PpcnModel(parse_structure("4-8-6-3"), dtype=np.float64)
    init_params(model, seed=seed)
    x = rng.standard_normal((1, 4, 6, 6))
    base = model.forward(x, train=False)
    bumped = x.copy()
    bumped[0, :, 2, 3] += 0.5
    delta = model.forward(bumped, train=False) - base
    changed = np.abs(delta[0]).sum(axis=0) > 0
    assert changed[2, 3]
    changed[2, 3] = False
    assert not changed.any()


def test_model_matches_per_pixel_oracle():
    rng = np.random.default_rng(7)
    model = PpcnModel(parse_structure("4-5-3"), dtype=np.float64)
    init_params(model, seed=1)
    # make infer-mode stats non-trivial first
    model.forward(rng.standard_normal((4, 4, 3, 3)), train=True)
    x = rng.standard_normal((1, 4, 4, 4))
    full = model.forward(x, train=False)
    for i in range(4):
        for j in range(4):
            pixel = x[:, :, i:i + 1, j:j + 1]
            assert np.allclose(model.forward(pixel, train=False)[0, :, 0, 0],
                               full[0, :, i, j], atol=1e-10)


def test_spatial_permutation_equivariance():
    rng = np.random.default_rng(8)
    model = PpcnModel(parse_structure("4-8-3"), dtype=np.float64)
    init_params(model, seed=2)
    x = rng.standard_normal((1, 4, 3, 5))
    perm = rng.permutation(15)
    y = model.forward(x, train=False)
    x_p = x.reshape(1, 4, 15)[:, :, perm].reshape(1, 4, 3, 5)
    y_p = model.forward(x_p, train=False)
    assert np.allclose(y.reshape(1, 3, 15)[:, :, perm],
                       y_p.reshape(1, 3, 15), atol=1e-12)


def test_forward_leaves_input_unmodified():
    rng = np.random.default_rng(9)
    model = PpcnModel(parse_structure("4-6-3"))
    init_params(model, seed=3)
    x = rng.standard_normal((2, 4, 4, 4)).astype(np.float32)
    snapshot = x.copy()
    y = model.forward(x, train=True)
    model.backward(np.ones_like(y))
    assert np.array_equal(x, snapshot)


def test_infer_forward_is_bit_stable():
    rng = np.random.default_rng(10)
    model = PpcnModel(parse_structure("4-8-3"))
    init_params(model, seed=4)
    x = rng.standard_normal((2, 4, 5, 5)).astype(np.float32)
    a = model.forward(x, train=False)
    b = model.forward(x, train=False)
    assert a.tobytes() == b.tobytes()


def test_model_channel_mismatch():
    model = PpcnModel(parse_structure("4-8-3"))
    with pytest.raises(ShapeError):
        model.forward(np.zeros((1, 3, 4, 4), np.float32), train=False)


def test_zero_grad_out_gives_zero_grads():
    model = PpcnModel(parse_structure("4-6-3"), dtype=np.float64)
    init_params(model, seed=5)
    x = np.random.default_rng(11).standard_normal((2, 4, 3, 3))
    y = model.forward(x, train=True)
    gx = model.backward(np.zeros_like(y))
    assert np.allclose(gx, 0)
    for _, layer, attr in model.parameters():
        assert np.allclose(getattr(layer, "g" + attr), 0)


def test_conv_grads_accumulate_over_half_batches():
    # for the bare linear model (no BN), the two half-batch gradients sum
    # to the full-batch gradient
    rng = np.random.default_rng(12)
    model = PpcnModel(StructureSpec((4, 3)), dtype=np.float64)
    init_params(model, seed=6)
    x = rng.standard_normal((4, 4, 3, 3))
    gy = rng.standard_normal((4, 3, 3, 3))

    model.forward(x, train=True)
    model.backward(gy)
    full = [(getattr(layer, "g" + attr)).copy()
            for _, layer, attr in model.parameters()]

    halves = []
    for sl in (slice(0, 2), slice(2, 4)):
        model.forward(x[sl], train=True)
        model.backward(gy[sl])
        halves.append([(getattr(layer, "g" + attr)).copy()
                       for _, layer, attr in model.parameters()])
    for f, a, b in zip(full, *halves):
        assert np.allclose(f, a + b, atol=1e-12)


# ---------------------------------------------------------------------------
# finite-difference gradient checks (a handful of seeds; the long-haul
# multi-seed sweep lives in the acceptance suite)

@pytest.mark.parametrize("seed", range(5))
def test_conv1x1_gradients_match_finite_differences(seed):
    from ppcn.losses import grad_check
    rng = np.random.default_rng(seed)
    layer = Conv1x1(3, 2, dtype=np.float64)
    layer.w = rng.standard_normal((2, 3))
    layer.b = rng.standard_normal(2)
    x = rng.standard_normal((2, 3, 2, 2))

    def loss_and_grads():
        y = layer.forward(x, train=True)
        loss = 0.5 * float(np.square(y).sum())
        gx = layer.backward(y.copy())
        return loss, [layer.gw, layer.gb, gx]

    assert grad_check(loss_and_grads, [layer.w, layer.b, x], step=1e-5) < 1e-6


@pytest.mark.parametrize("seed", range(5))
def test_batchnorm_input_gradient_matches_finite_differences(seed):
    from ppcn.losses import grad_check
    rng = np.random.default_rng(seed)
    layer = BatchNorm(2, dtype=np.float64)
    x = rng.standard_normal((3, 2, 2, 2))
    probe = rng.standard_normal((3, 2, 2, 2))

    def loss_and_grads():
        y = layer.forward(x, train=True)
        loss = float((probe * y).sum())
        gx = layer.backward(probe)
        return loss, [gx]

    assert grad_check(loss_and_grads, [x], step=1e-5) < 1e-6


@pytest.mark.parametrize("seed", range(5))
def test_composed_model_gradients_match_finite_differences(seed):
    from ppcn.losses import grad_check
    rng = np.random.default_rng(seed)
    model = PpcnModel(parse_structure("4-5-3"), dtype=np.float64)
    init_params(model, seed=seed)
    x = rng.standard_normal((3, 4, 3, 3))
    # linear probe keeps every parameter direction non-degenerate (with zero
    # biases and a batch-normalized penultimate layer, sum(y) alone vanishes)
    probe = rng.standard_normal((3, 3, 3, 3))
    params = [getattr(layer, attr) for _, layer, attr in model.parameters()]

    def loss_and_grads():
        y = model.forward(x, train=True)
        loss = 0.5 * float(np.square(y).sum()) + float((probe * y).sum())
        model.backward(y + probe)
        return loss, [getattr(layer, "g" + attr)
                      for _, layer, attr in model.parameters()]

    assert grad_check(loss_and_grads, params, step=1e-5) < 1e-4


# ---------------------------------------------------------------------------
# initialization

def test_init_is_seed_deterministic():
    a = PpcnModel(parse_structure("4-8-16-8-3"))
    b = PpcnModel(parse_structure("4-8-16-8-3"))
    init_params(a, seed=42)
    init_params(b, seed=42)
    for (_, la, attr), (_, lb, _) in zip(a.parameters(), b.parameters()):
        assert np.array_equal(getattr(la, attr), getattr(lb, attr))
    c = PpcnModel(parse_structure("4-8-16-8-3"))
    init_params(c, seed=43)
    assert not np.array_equal(a._chain[0][1].w, c._chain[0][1].w)


def test_init_biases_zero_and_he_scale():
    model = PpcnModel(parse_structure("4-96-128-3"))
    init_params(model, seed=7)
    for name, layer, attr in model.parameters():
        if attr == "b":
            assert not getattr(layer, attr).any()
    big = dict((name, layer) for name, layer in model._chain)["fusion1.conv"]
    var = float(np.var(big.w.astype(np.float64)))
    assert abs(var - 2.0 / 96) < 0.2 * 2.0 / 96
