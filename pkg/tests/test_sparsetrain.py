import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sparseflow import dfengine, netspec
from sparseflow import sparsetrain as sp


def small_net(kind, seed, channels=3):
    """Two conv layers (the second recurrent) plus the head, with a random first kernel."""
    rng = np.random.default_rng(seed)
    spec = netspec.firenet(kind, channels=channels, seed=seed, threshold=0.3)
    first, rec = spec.layers[0], spec.layers[1]
    first = netspec.LayerSpec(first.kind, rng.normal(size=(3, 3, 2, channels)) * 0.5, first.bias,
                              first.thresholds, first.leaks)
    spec.layers = [first, rec, spec.layers[-1]]
    net = sp.ToyNet.from_spec(spec)
    for d in net.layers:
        d["T"] = rng.uniform(0.1, 0.5, channels)
    return net


def test_surrogate_at_threshold_is_one_over_pi():
    assert sp.surrogate_grad(0.0) == pytest.approx(1 / math.pi, abs=1e-15)
    gx, gt = sp.fatrelu_surrogate_backward(0.7, 0.7, 2.0)
    assert gt == pytest.approx(-2.0 * 0.7 / math.pi, abs=1e-15)


def test_surrogate_vanishes_far_below():
    _, gt = sp.fatrelu_surrogate_backward(1.0, 1.0 + 1e3, 1.0)
    assert abs(gt) < 1e-6


@given(st.floats(-3, 3), st.floats(0.01, 3), st.floats(0.25, 2))
def test_threshold_gradient_matches_finite_difference(x, t, width):
    # relaxed scalar loss L(T) = x * S(x - T); its exact derivative is the surrogate expression
    def loss(tt):
        return x * sp.relaxed_step(x - tt, width)

    h = 1e-6
    num = (loss(t + h) - loss(t - h)) / (2 * h)
    _, ana = sp.fatrelu_surrogate_backward(x, t, 1.0, width)
    assert abs(ana - num) <= 1e-5 * max(abs(ana), abs(num), 1e-6)


def test_relaxed_step_derivative_is_surrogate():
    d = np.linspace(-2, 2, 9)
    h = 1e-6
    num = (sp.relaxed_step(d + h) - sp.relaxed_step(d - h)) / (2 * h)
    assert np.allclose(num, sp.surrogate_grad(d), rtol=1e-7)


def test_sparsification_loss_examples():
    assert sp.sparsification_loss([np.array([1.0, -2.0, 3.0])], [np.array([2.0])], [1.0]) == 4.25
    tiny = sp.sparsification_loss([np.array([-1.0, -5.0])], [np.array([1e12])], [1.0])
    assert 0 <= tiny < 1e-20
    a = sp.sparsification_loss([np.array([1.0]), np.array([2.0])], [[1.0], [1.0]], [1.0, 1.0])
    b = sp.sparsification_loss([np.array([1.0]), np.array([2.0])], [[1.0], [1.0]], [2.0, 1.0])
    assert b - a == 2.0


def test_threshold_init_medians():
    got = sp.init_thresholds_from_activations([[np.array([1, 2, 3, 4, 5.0]), np.array([1, 2, 3, 4.0]), np.array([])]])
    assert got[0].tolist() == [3.0, 2.5, 1e-6]


def test_one_cycle_schedule():
    lrs = [sp.one_cycle_lr(e, 50, 0.1) for e in range(50)]
    peak = int(np.argmax(lrs))
    assert lrs[peak] == pytest.approx(0.1)
    assert all(a <= b for a, b in zip(lrs[:peak], lrs[1 : peak + 1]))
    assert all(a >= b for a, b in zip(lrs[peak:], lrs[peak + 1 :]))
    assert lrs[-1] < 1e-4


def test_im2col_adjoint(rng):
    x = rng.normal(size=(2, 5, 4, 3))
    g = rng.normal(size=(2, 5, 4, 27))
    assert np.sum(sp.im2col(x, 3) * g) == pytest.approx(np.sum(x * sp.col2im(g, 3, 3)), rel=1e-12)


@pytest.mark.parametrize("kind", ["ann", "snn"])
@pytest.mark.parametrize("seed", [0, 1])
def test_gradient_check(kind, seed):
    net = small_net(kind, seed)
    data = sp.synthetic_flow_dataset(2, 3, 6, 6, seed=seed)
    rep = sp.grad_check(net, data.frames, data.targets, lambda_s=1e-2, seed=seed)
    assert {"W", "R", "T", "Whead", "bhead"} <= set(rep.max_rel_error)
    assert rep.worst < 1e-4, rep.max_rel_error


def test_exact_forward_in_training_loss():
    # the unrelaxed loss uses a hard threshold: densities are multiples of 1 / neurons
    net = small_net("snn", 0)
    data = sp.synthetic_flow_dataset(1, 2, 6, 6, seed=0)
    parts, _ = sp.loss_and_grad(net, data.frames, data.targets, 0.0, need_grad=False)
    assert (parts.neuron_density * 2 * 2 * 36 * 3) == pytest.approx(round(parts.neuron_density * 2 * 2 * 36 * 3))


def test_projection():
    net = small_net("snn", 0)
    net.layers[0]["T"][:] = -1
    net.layers[1]["lam"][:] = [0.0, 0.5, 2.0]
    net.project()
    assert np.all(net.layers[0]["T"] == sp.T_MIN)
    assert net.layers[1]["lam"].tolist() == [sp.LEAK_MIN, 0.5, sp.LEAK_MAX]


@pytest.fixture(scope="module")
def toy_runs():
    data = sp.synthetic_flow_dataset(2, 4, 10, 10, seed=3)
    spec = netspec.firenet("snn", channels=4, seed=3, threshold=0.5)
    out = {}
    for ls in (0.0, 1e-2):
        out[ls] = sp.train(spec, data, sp.TrainConfig(lambda_s=ls, epochs=15, seed=3))
    return spec, data, out


def test_training_is_deterministic(toy_runs):
    spec, data, out = toy_runs
    again, _ = sp.train(spec, data, sp.TrainConfig(lambda_s=1e-2, epochs=15, seed=3))
    assert netspec.dump_network(again) == netspec.dump_network(out[1e-2][0])


def test_thresholds_move_more_with_sparsification(toy_runs):
    spec, data, out = toy_runs
    init = sp.calibrate_thresholds(sp.ToyNet.from_spec(spec), data.frames)

    def drift(trained):
        return sum(np.abs(l.thresholds - d["T"]).sum() for l, d in zip(trained.layers, init.layers))

    assert drift(out[0.0][0]) < drift(out[1e-2][0])


def test_exported_network_runs_in_engine(toy_runs):
    _, data, out = toy_runs
    trained = out[1e-2][0].validate()
    res = dfengine.run_network([data.frames[0, t] for t in range(2)], trained)
    assert res.flows[0].shape == (10, 10, 2)


def test_log_columns(toy_runs):
    import io

    _, _, out = toy_runs
    fh = io.StringIO()
    sp.write_log_header(fh)
    for e, p in enumerate(out[0.0][1]):
        fh.write(sp.log_row(e, p))
    lines = fh.getvalue().splitlines()
    assert lines[0] == "epoch,loss,proxy,ls,mean_neuron_density,mean_pixel_density"
    assert len(lines) == 1 + 16


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_detected():
    data = sp.synthetic_flow_dataset(1, 2, 6, 6, seed=0)
    data.frames[0, 0, 0, 0, 0] = np.inf
    spec = netspec.firenet("ann", channels=2, seed=0)
    with pytest.raises(sp.DivergenceError):
        sp.train(spec, data, sp.TrainConfig(epochs=2, threshold_init="keep"))


def test_config_validation():
    with pytest.raises(ValueError):
        sp.TrainConfig(lambda_s=-1)
    with pytest.raises(ValueError):
        sp.TrainConfig(lambda_i=(1.0, 0.0))
