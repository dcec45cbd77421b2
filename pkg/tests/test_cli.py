import filecmp
import os

import numpy as np
import pytest

from sparseflow import cli, costsim, evio, fixtures, netspec

DATA = os.path.dirname(fixtures.data_path("profiles.json"))


def data(name):
    return os.path.join(DATA, name)


def run(*argv):
    return cli.main([str(a) for a in argv])


def same_tree(a, b):
    names = sorted(os.listdir(a))
    assert names == sorted(os.listdir(b))
    return all(filecmp.cmp(os.path.join(a, n), os.path.join(b, n), shallow=False) for n in names)


def read_csv_rows(path):
    return [l.split(",") for l in open(path).read().splitlines() if not l.startswith("#")][1:]


@pytest.fixture
def fresh_snn(tmp_path):
    path = tmp_path / "snn.sfnw"
    netspec.save_network(netspec.firenet("snn", channels=4, seed=0, threshold=0.5, height=8, width=8), path)
    return path


def test_zero_event_frame(tmp_path, fresh_snn):
    events = tmp_path / "empty.txt"
    events.write_text("")
    assert run("infer", "--net", fresh_snn, "--events", events, "--out", tmp_path / "o") == 0
    flows, digest = cli.read_flow_file(tmp_path / "o" / "flow.sffp")
    assert flows.shape == (1, 8, 8, 2) and not flows.any() and len(digest) == 64
    dens = read_csv_rows(tmp_path / "o" / "density.csv")
    assert all(float(r[2]) == 0 and float(r[3]) == 0 for r in dens if r[1] not in ("0", "8"))


def test_infer_outputs_carry_config_hash(tmp_path):
    out = tmp_path / "o"
    assert run("infer", "--net", data("toy_snn.sfnw"), "--events", data("toy_events.txt"), "--gt",
               data("toy_gt.sfgt"), "--out", out, "--images", "--log-activity") == 0
    _, digest = cli.read_flow_file(out / "flow.sffp")
    for name in os.listdir(out):
        if name.endswith(".csv"):
            if name == "activity.csv":
                continue
            assert open(out / name).readline().strip() == f"# config_hash={digest}", name
        elif name.endswith(".ppm"):
            assert f"config_hash={digest}".encode() in open(out / name, "rb").read(100)
    assert f'"config_hash": "{digest}"' in open(out / "cost.json").read()
    rows = read_csv_rows(out / "accuracy.csv")
    assert rows[-1][0] == "mean" and float(rows[-1][1]) >= 0


def test_infer_deterministic_with_threads(tmp_path):
    args = ["infer", "--net", data("toy_ann.sfnw"), "--events", data("toy_events.txt"), "--images"]
    assert run(*args, "--out", tmp_path / "a") == 0
    assert run(*args, "--out", tmp_path / "b") == 0
    assert run(*args, "--threads", "--out", tmp_path / "c") == 0
    assert same_tree(tmp_path / "a", tmp_path / "b")
    # threading changes the config hash but not the numbers
    fa, _ = cli.read_flow_file(tmp_path / "a" / "flow.sffp")
    fc, _ = cli.read_flow_file(tmp_path / "c" / "flow.sffp")
    assert np.array_equal(fa, fc)
    strip = lambda p: [l for l in open(p) if not l.startswith("#")]
    assert strip(tmp_path / "a" / "cost.csv") == strip(tmp_path / "c" / "cost.csv")


def test_infer_framing_options(tmp_path):
    base = ["infer", "--net", data("toy_snn.sfnw"), "--events", data("toy_events.txt")]
    assert run(*base, "--frame-count", "500", "--out", tmp_path / "a") == 0
    n_spikes = len(evio.read_spikes(data("toy_events.txt")))
    flows, _ = cli.read_flow_file(tmp_path / "a" / "flow.sffp")
    assert flows.shape[0] == -(-n_spikes // 500)
    assert run(*base, "--resolution", "8x8", "--downsample", "2", "--out", tmp_path / "b") == 0
    assert cli.read_flow_file(tmp_path / "b" / "flow.sffp")[0].shape[1:3] == (8, 8)


@pytest.mark.parametrize("argv", [
    ["infer", "--events", "x.txt"],
    ["infer", "--net", "missing.sfnw", "--events", "missing.txt"],
    ["infer", "--net", "NET", "--events", "EV", "--scheme", "bitmask"],
    ["infer", "--net", "NET", "--events", "EV", "--resolution", "12by12"],
    ["infer", "--net", "NET", "--events", "EV", "--profile", "missing.json"],
    ["infer", "--net", "EV", "--events", "EV"],
    ["train", "--channels", "64"],
    ["frobnicate"],
    [],
])
def test_config_errors_exit_2(tmp_path, argv):
    argv = [a.replace("NET", data("toy_ann.sfnw")).replace("EV", data("toy_events.txt")) for a in argv]
    if argv and argv[0] in ("infer", "train"):
        argv += ["--out", str(tmp_path / "o")]
    assert run(*argv) == 2


def test_events_outside_sensor_is_config_error(tmp_path):
    events = tmp_path / "e.txt"
    events.write_text("0 40 1 0\n")
    assert run("infer", "--net", data("toy_snn.sfnw"), "--events", events, "--out", tmp_path / "o") == 2


def test_controlled_sweep_csv(tmp_path):
    assert run("controlled", "--out", tmp_path / "a") == 0
    assert run("controlled", "--out", tmp_path / "b") == 0
    assert same_tree(tmp_path / "a", tmp_path / "b")
    rows = read_csv_rows(tmp_path / "a" / "controlled.csv")
    assert len(rows) == 2 * (len(costsim.SWEEP_PIXELS) + len(costsim.SWEEP_COUNTS))
    for kind in ("ann", "snn"):
        px = [(int(r[2]), float(r[5])) for r in rows if r[0] == kind and r[1] == "pixels"]
        assert px[0][0] == 0 and px[0][1] == min(t for _, t in px)


def test_train_smoke_and_infer(tmp_path):
    out = tmp_path / "t"
    assert run("train", "--kind", "snn", "--epochs", "1", "--resolution", "8x8", "--channels", "3",
               "--sequences", "1", "--frames", "2", "--out", out) == 0
    spec = netspec.load_network(out / "weights.sfnw")
    assert (spec.height, spec.width) == (8, 8)
    log = open(out / "train_log.csv").read().splitlines()
    assert log[0].startswith("# config_hash=") and len(log) == 2 + 2
    events = tmp_path / "e.txt"
    events.write_text("0 1 1 0\n5 3 2 1\n")
    assert run("infer", "--net", out / "weights.sfnw", "--events", events, "--out", tmp_path / "i") == 0


def test_train_divergence_exit_3(tmp_path, monkeypatch):
    from sparseflow import sparsetrain

    def boom(*a, **k):
        raise sparsetrain.DivergenceError("nan")

    monkeypatch.setattr(sparsetrain, "train", boom)
    assert run("train", "--epochs", "1", "--out", tmp_path / "t") == 3


def test_selftest_exit_codes(monkeypatch, capsys):
    assert run("selftest") == 0
    assert capsys.readouterr().out.count("PASS") == len(cli._selftest_checks())
    monkeypatch.setattr(cli, "_selftest_checks", lambda: [("always fails", lambda: False)])
    assert run("selftest") == 4


def test_flow_file_format(tmp_path):
    flows = np.arange(2 * 3 * 4 * 2, dtype=np.float32).reshape(2, 3, 4, 2)
    path = tmp_path / "f.sffp"
    cli.write_flow_file(path, flows, "ab" * 32)
    raw = path.read_bytes()
    assert raw[:4] == b"SFFP" and len(raw) == 4 + 12 + 32 + flows.nbytes
    back, digest = cli.read_flow_file(path)
    assert np.array_equal(back, flows) and digest == "ab" * 32
