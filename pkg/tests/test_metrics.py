import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from sparseflow import metrics


def test_density_worked_examples():
    t = np.zeros((5, 5, 8))
    t[0, 0] = 1
    t[3, 2] = 1
    assert metrics.neuron_density(t) == 0.08
    assert metrics.pixel_density(t) == 0.08
    u = np.zeros((5, 5, 8))
    u.reshape(25, 8)[np.arange(16), np.arange(16) % 8] = 1
    assert metrics.neuron_density(u) == 0.08
    assert metrics.pixel_density(u) == 0.64


def test_density_extremes():
    assert metrics.neuron_density(np.zeros((3, 3, 4))) == 0
    assert metrics.pixel_density(np.zeros((3, 3, 4))) == 0
    assert metrics.neuron_density(np.ones((3, 3, 4))) == 1


tensors = hnp.arrays(np.int8, hnp.array_shapes(min_dims=3, max_dims=3, min_side=1, max_side=6),
                     elements=st.sampled_from([0, 0, 0, 1, -2]))


@given(tensors)
def test_density_bounds(t):
    n, p = metrics.neuron_density(t), metrics.pixel_density(t)
    assert n <= p + 1e-12
    assert p <= min(1.0, t.shape[2] * n) + 1e-12


@given(tensors, st.integers(0, 2**31))
def test_density_permutation_invariant(t, seed):
    rng = np.random.default_rng(seed)
    flat = t.reshape(-1, t.shape[2])[rng.permutation(t.shape[0] * t.shape[1])]
    s = flat.reshape(t.shape)[:, :, rng.permutation(t.shape[2])]
    assert metrics.neuron_density(s) == metrics.neuron_density(t)
    assert metrics.pixel_density(s) == metrics.pixel_density(t)


def test_aee_examples():
    gt = np.zeros((4, 4, 2))
    mask = np.ones((4, 4), bool)
    e = metrics.aee(gt, gt, mask)
    assert (e.aee, e.outlier_pct) == (0.0, 0.0)
    pred = gt.copy()
    pred[1, 2] = (3, 4)
    one = np.zeros((4, 4), bool)
    one[1, 2] = True
    e = metrics.aee(pred, gt, one)
    assert (e.aee, e.outlier_pct, e.n_pixels) == (5.0, 100.0, 1)
    e = metrics.aee(pred, gt, np.zeros((4, 4), bool))
    assert e.flag == metrics.NO_VALID_PIXELS and e.aee is None


def test_aee_event_mask_and_threshold():
    gt = np.zeros((2, 2, 2))
    pred = np.zeros((2, 2, 2))
    pred[0, 0] = (2, 0)
    events = np.array([[True, False], [True, False]])
    e = metrics.aee(pred, gt, np.ones((2, 2), bool), events)
    assert e.n_pixels == 2 and e.aee == 1.0 and e.outlier_pct == 0.0
    assert metrics.aee(pred, gt, np.ones((2, 2), bool), events, outlier_px=1.5).outlier_pct == 50.0


@given(hnp.arrays(np.float64, (3, 3, 2), elements=st.floats(-50, 50)),
       hnp.arrays(np.float64, (3, 3, 2), elements=st.floats(-50, 50)),
       st.floats(-100, 100), st.floats(-100, 100))
def test_aee_translation_consistent(pred, gt, vx, vy):
    mask = np.ones((3, 3), bool)
    v = np.array([vx, vy])
    assert metrics.aee(pred + v, gt + v, mask).aee == pytest.approx(metrics.aee(pred, gt, mask).aee, abs=1e-9)


def test_mean_flow_error_skips_empty_frames():
    errs = [metrics.FlowError(1.0, 0.0, 3), metrics.FlowError(None, None, 0, metrics.NO_VALID_PIXELS),
            metrics.FlowError(3.0, 50.0, 1)]
    assert metrics.mean_flow_error(errs) == (2.0, 25.0, 2)


def test_density_report_excludes_input_and_head():
    layers = [np.ones((2, 2, 2)), np.zeros((2, 2, 4)), np.ones((2, 2, 4)), np.ones((2, 2, 2))]
    rep = metrics.density_report([layers, layers])
    assert rep.sparse_layers == (1, 2)
    assert rep.mean_neuron_density == 0.5


def test_density_map_levels(tmp_path):
    t = np.zeros((1, 3, 16))
    t[0, 1, :8] = 1
    t[0, 2, :4] = 1
    path = tmp_path / "d.ppm"
    metrics.density_map_image(t, path, "config_hash=abc")
    img = metrics.read_ppm(path)
    assert img[0, :, 0].tolist() == [0, 255, 127]
    assert b"config_hash=abc" in path.read_bytes()[:40]


def test_zero_tensor_black_image(tmp_path):
    path = tmp_path / "z.ppm"
    metrics.density_map_image(np.zeros((4, 5, 3)), path)
    assert not metrics.read_ppm(path).any()


def test_flow_colors():
    flow = np.array([[[1.0, 0.0], [0.0, 0.0], [-1.0, 0.0]]])
    rgb = metrics.flow_to_rgb(flow)
    assert rgb[0, 0].tolist() == [255, 0, 0]  # hue 0 for flow pointing right
    assert rgb[0, 1].tolist() == [0, 0, 0]  # no motion is black
    assert rgb[0, 2].tolist() == [0, 255, 255]
