import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sparseflow import codec, costsim, dfengine, netspec
from sparseflow.dfengine import Core, EngineConfig, MemoryBudgetError, OrderError, RowBuffer
from sparseflow.netspec import CONV_FATRELU, CONV_LIF, LayerSpec
from sparseflow.tensorcore import bf16_bits, bf16_round, dense_conv2d, fatrelu

from conftest import random_frames, random_spec


def bits_equal(a, b):
    return a.shape == b.shape and np.array_equal(bf16_bits(a), bf16_bits(b))


def ann_layer(rng, cin=8, cout=8, thr=0.05):
    return LayerSpec(CONV_FATRELU, rng.normal(size=(3, 3, cin, cout)) * 0.3, rng.normal(size=cout) * 0.1,
                     np.full(cout, thr))


@pytest.mark.parametrize("n, rounds", [(1, 1), (4, 1), (6, 2), (10, 3)])
def test_group_rounds(n, rounds):
    groups = dfengine.make_groups(0, 0, np.arange(n), np.ones(n))
    assert len(groups) == dfengine.n_groups(n) == rounds
    assert all(len(g.chans) <= dfengine.GROUP_SIZE for g in groups)
    assert all(len(g.padded()[0]) == dfengine.GROUP_SIZE for g in groups)


def single_pixel_cost(rng, n):
    layer = ann_layer(rng, cin=16, cout=16)
    core = Core(0, layer, 8, 8, codec.AER, codec.AER, False)
    core.begin_frame(0)
    core.receive(4, 4, np.arange(n), np.ones(n, np.float32), n)
    core.sync()
    return core.trace, costsim.simulate_frame([core.trace], costsim.default_params()).counters[0]


def test_grouping_reads_each_block_once(rng):
    tr, cnt = single_pixel_cost(rng, 4)
    assert tr.in_groups == [1] and tr.in_blocks == [9]
    v = dfengine.n_vectors(16)
    fire_rw = 64 * v  # every pixel's state is read once when it fires
    assert cnt["state_blocks_rw"] == 9 * v + fire_rw
    _, cnt6 = single_pixel_cost(rng, 6)
    assert cnt6["state_blocks_rw"] == 2 * 9 * v + fire_rw


def test_single_entry_group_matches_ungrouped(rng):
    w = bf16_round(rng.normal(size=(3, 3, 4, 5)).astype(np.float32))
    buf = RowBuffer(5, 5, 5, 5)
    buf.integrate_group(dfengine.SpikeGroup(2, 2, np.array([3]), np.float32([1.5])), w)
    padded = RowBuffer(5, 5, 5, 5)
    c, v = dfengine.SpikeGroup(2, 2, np.array([3]), np.float32([1.5])).padded()
    padded.integrate_group(dfengine.SpikeGroup(2, 2, c, v), w)
    x = np.zeros((5, 5, 4), np.float32)
    x[2, 2, 3] = 1.5
    assert bits_equal(buf.state, padded.state)
    assert bits_equal(buf.state, dense_conv2d(x, w))


def test_sync_fires_every_pixel_once(rng):
    core = Core(0, ann_layer(rng), 6, 7, codec.AER, codec.AER, False)
    core.begin_frame(0)
    core.receive(0, 0, np.array([1]), np.float32([1.0]), 1)
    assert len(core.trace.fire_trigger) == 0  # nothing is complete after the first pixel
    core.sync()
    assert len(core.trace.fire_trigger) == 42
    assert core.trace.fire_trigger.count(1) == 42  # all by the sync


def test_silent_pixels_emit_nothing(rng):
    layer = ann_layer(rng, thr=1e9)
    core = Core(0, layer, 4, 4, codec.AER, codec.AER, False)
    core.begin_frame(0)
    core.receive(1, 1, np.array([0, 2]), np.float32([1, 1]), 2)
    assert core.sync() == []
    assert sum(core.trace.fire_emit_words) == 0


def test_single_spike_at_origin_matches_oracle(rng):
    layer = ann_layer(rng, cin=2, cout=4)
    spec = netspec.NetworkSpec([layer, LayerSpec(netspec.FLOW_HEAD, np.ones((1, 1, 4, 2)), np.zeros(2))])
    counts = np.zeros((5, 5, 2), np.int32)
    counts[0, 0, 1] = 1
    res = dfengine.run_network([counts], spec)
    want = fatrelu(bf16_round(dense_conv2d(counts.astype(np.float32), layer.kernel) + layer.bias), layer.thresholds)
    assert bits_equal(res.layer_outputs[0][1], want)


def test_firing_frontier():
    layer = LayerSpec(CONV_FATRELU, np.zeros((3, 3, 1, 1)), np.zeros(1), np.ones(1))
    core = Core(0, layer, 6, 6, codec.AER, codec.AER, False)
    core.begin_frame(0)
    core.receive(3, 4, np.array([0]), np.float32([1]), 1)
    # rows <= 1 are complete, plus row 2 left of column 3
    assert len(core.trace.fire_trigger) == 2 * 6 + 3


def test_zero_frame_zero_flow():
    spec = netspec.firenet("ann", channels=4, seed=3, bias_scale=0.0)
    res = dfengine.run_network([np.zeros((6, 6, 2), np.int32)], spec)
    assert not np.any(res.flows[0])


@pytest.mark.parametrize("kind", ["ann", "snn"])
def test_firenet_matches_oracle(kind, rng):
    spec = netspec.firenet(kind, channels=6, seed=5, threshold=0.05 if kind == "ann" else 0.3)
    frames = random_frames(rng, 3, 10, 12)
    res = dfengine.run_network(frames, spec)
    ref = netspec.reference_forward(spec, frames)
    for f in range(3):
        for got, want in zip(res.layer_outputs[f][1:], ref[f]):
            assert bits_equal(got, want)


@given(st.integers(0, 2**31), st.sampled_from(["ann", "snn"]), st.booleans())
def test_oracle_equivalence_property(seed, kind, pool):
    rng = np.random.default_rng(seed)
    h, w = 2 * int(rng.integers(2, 6)), 2 * int(rng.integers(2, 6))
    ch = int(rng.integers(1, 9))
    n_conv = int(rng.integers(1, 4))
    spec = random_spec(rng, kind, ch, n_conv=n_conv, pool_at=int(rng.integers(0, n_conv)) if pool else None)
    frames = random_frames(rng, 2, h, w)
    res = dfengine.run_network(frames, spec)
    ref = netspec.reference_forward(spec, frames)
    for f in range(2):
        assert all(bits_equal(g, r) for g, r in zip(res.layer_outputs[f][1:], ref[f]))


def test_snn_second_frame_uses_membranes(rng):
    spec = random_spec(rng, "snn", 4, n_conv=2, recurrent=False)
    frames = random_frames(rng, 2, 8, 8, density=0.8)
    two = dfengine.run_network(frames, spec).layer_outputs[1]
    one = dfengine.run_network(frames[1:], spec).layer_outputs[0]
    ref = netspec.reference_forward(spec, frames)[1]
    assert all(bits_equal(g, r) for g, r in zip(two[1:], ref))
    assert not all(np.array_equal(a, b) for a, b in zip(two, one))


def test_memory_bound_and_single_fire(rng):
    spec = netspec.firenet("ann", channels=4, seed=1)
    res = dfengine.run_network(random_frames(rng, 2, 12, 9), spec)
    for i, layer in enumerate(spec.layers):
        if layer.recurrent:
            assert res.peak_resident_rows[i] <= 12
        else:
            assert res.peak_resident_rows[i] <= layer.k + 1
    snn = netspec.firenet("snn", channels=4, seed=1, threshold=0.3)
    cores = dfengine.build_cores(snn, 12, 9, codec.BITMASK)
    assert all(c.buffer.state.shape[0] == 12 for c in cores if c.layer.kind == CONV_LIF)
    for tr in res.traces[0]:
        assert len(tr.fire_trigger) == 12 * 9  # each pixel fires once
        assert tr.fire_trigger == sorted(tr.fire_trigger)


def test_emitted_headers_in_row_major_order(rng):
    spec = netspec.firenet("snn", channels=4, seed=2, threshold=0.2)
    cores = dfengine.build_cores(spec, 8, 8, codec.BITMASK)
    out = dfengine._run_frame_serial(cores, random_frames(rng, 1, 8, 8)[0], 0)
    for packets in out:
        order = [y * 8 + x for y, x, _, _ in packets]
        assert order == sorted(set(order))


def test_unsorted_input_rejected(rng):
    core = Core(0, ann_layer(rng), 4, 4, codec.AER, codec.AER, False)
    core.begin_frame(0)
    core.receive(2, 2, np.array([0]), np.float32([1]), 1)
    with pytest.raises(OrderError):
        core.receive(1, 3, np.array([0]), np.float32([1]), 1)


def test_memory_budget(rng):
    with pytest.raises(MemoryBudgetError):
        dfengine.build_cores(netspec.firenet("snn", channels=32, threshold=1.0), 256, 256, codec.BITMASK,
                             memory_bytes=64 * 1024)


def test_ann_bitmask_rejected():
    with pytest.raises(ValueError):
        dfengine.run_network([np.zeros((4, 4, 2))], netspec.firenet("ann", channels=4), codec.BITMASK)


@pytest.mark.parametrize("kind", ["ann", "snn"])
def test_threads_match_serial(kind, rng):
    spec = netspec.firenet(kind, channels=5, seed=4, threshold=0.05 if kind == "ann" else 0.3)
    frames = random_frames(rng, 2, 9, 10)
    a = dfengine.run_network(frames, spec)
    b = dfengine.run_network(frames, spec, config=EngineConfig(threads=True))
    for fa, fb in zip(a.layer_outputs, b.layer_outputs):
        assert all(bits_equal(x, y) for x, y in zip(fa, fb))
    assert costsim.report_json(a.ledger) == costsim.report_json(b.ledger)


def test_activity_log(tmp_path, rng):
    spec = netspec.firenet("snn", channels=3, threshold=0.3)
    res = dfengine.run_network(random_frames(rng, 1, 5, 5), spec)
    path = tmp_path / "act.csv"
    dfengine.write_activity_log(path, res.layer_outputs)
    lines = path.read_text().splitlines()
    assert lines[0] == "frame,layer,y,x,channel,value"
    assert len(lines) - 1 == sum(np.count_nonzero(t) for t in res.layer_outputs[0])
