"""``sparseflow`` command line: infer, controlled, train, selftest, fixtures.

Exit codes: 0 success, 2 configuration error, 3 runtime error, 4 self-test failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import struct
import sys

import numpy as np

from . import _accel, codec, costsim, dfengine, evio, fixtures, metrics, netspec, sparsetrain

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_SELFTEST = 0, 2, 3, 4
FLOW_MAGIC = b"SFFP"


class ConfigError(Exception):
    pass


def _resolution(text):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    if h <= 0 or w <= 0:
        raise argparse.ArgumentTypeError("resolution must be positive")
    return h, w


def _file_digest(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def config_hash(args, inputs=()):
    """SHA-256 over the canonical JSON of the arguments (minus the output directory)
    and the contents of the input files."""
    cfg = {k: v for k, v in sorted(vars(args).items()) if k not in ("out", "func")}
    cfg["_inputs"] = {k: _file_digest(p) for k, p in inputs if p}
    text = json.dumps(cfg, sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()


def _require(path, what):
    if path is None:
        raise ConfigError(f"{what} is required")
    if not os.path.isfile(path):
        raise ConfigError(f"{what} {path!r} does not exist")
    return path


def write_flow_file(path, flows, digest):
    """``SFFP`` | u32 frames, H, W | 32-byte config digest | f32 LE flow[frames][H][W][2]."""
    flows = np.asarray(flows, dtype="<f4")
    n, h, w = flows.shape[:3] if flows.ndim == 4 else (0, 0, 0)
    with open(path, "wb") as fh:
        fh.write(FLOW_MAGIC + struct.pack("<III", n, h, w) + bytes.fromhex(digest))
        fh.write(flows.tobytes())


def read_flow_file(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != FLOW_MAGIC:
        raise ValueError(f"{path}: not a flow prediction file")
    n, h, w = struct.unpack_from("<III", data, 4)
    digest = data[16:48].hex()
    flows = np.frombuffer(data, dtype="<f4", offset=48).reshape(n, h, w, 2)
    return flows, digest


# ------------------------------------------------------------------ infer


def _load_frames(args, spec):
    spikes = evio.read_spikes(args.events)
    height, width = args.resolution or (spec.height, spec.width)
    if not height:
        raise ConfigError("network declares no resolution; pass --resolution HxW")
    factor = args.downsample
    sensor = args.sensor or (height * factor, width * factor)
    if len(spikes) and (spikes["x"].max() >= sensor[1] or spikes["y"].max() >= sensor[0]):
        raise ConfigError(f"events fall outside the {sensor[0]}x{sensor[1]} sensor")
    if args.frame_count:
        frames = evio.build_frames(spikes, *sensor, count=args.frame_count)
    else:
        frames = evio.build_frames(spikes, *sensor, window=args.frame_window)
    if not frames:
        frames = [evio.EventFrame(np.zeros(sensor + (2,), dtype=np.int32), 0, 0)]
    if sensor != (height * factor, width * factor) or factor != 1:
        frames = [evio.downsample(f, factor, (height * factor, width * factor)) for f in frames]
    return frames


def cmd_infer(args):
    _require(args.net, "--net")
    _require(args.events, "--events")
    if args.gt:
        _require(args.gt, "--gt")
    if args.profile:
        _require(args.profile, "--profile")
    try:
        spec = netspec.load_network(args.net)
        params = costsim.load_params(args.profile, args.profile_name)
        frames = _load_frames(args, spec)
        gt = evio.load_flow_gt(args.gt) if args.gt else None
    except (netspec.WeightFileError, netspec.NetworkError, costsim.ProfileError, evio.EventFileError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    scheme = args.scheme or dfengine.default_scheme(spec)
    if spec.kind == "ann" and scheme == codec.BITMASK:
        raise ConfigError("ANN activations need the AER scheme")
    digest = config_hash(args, [("net", args.net), ("events", args.events), ("gt", args.gt), ("profile", args.profile)])
    cfg = dfengine.EngineConfig(scheme=scheme, memory_bytes=args.memory_kb * 1024, threads=args.threads,
                                cost_params=params)
    try:
        res = dfengine.run_network(frames, spec, scheme, cfg)
    except dfengine.MemoryBudgetError as exc:
        raise ConfigError(str(exc)) from None
    os.makedirs(args.out, exist_ok=True)
    head = [f"config_hash={digest}"]
    out = lambda name: os.path.join(args.out, name)
    write_flow_file(out("flow.sffp"), np.stack(res.flows) * np.float32(args.flow_scale), digest)
    rep = metrics.density_report(res.layer_outputs)
    metrics.write_density_csv(out("density.csv"), rep, head)
    costsim.write_report_csv(out("cost.csv"), res.ledger, head)
    costsim.write_intervals_csv(out("intervals.csv"), res.ledger, head)
    with open(out("cost.json"), "w") as fh:
        fh.write(costsim.report_json(res.ledger, {"config_hash": digest, "scheme": scheme}) + "\n")
    if gt is not None:
        with open(out("accuracy.csv"), "w") as fh:
            fh.write(f"# config_hash={digest}\nframe,aee,outlier_pct,n_pixels,flag\n")
            errs = []
            for f, (flow, frame) in enumerate(zip(res.flows, frames)):
                if gt.flow.shape != flow.shape:
                    raise ConfigError(f"ground truth is {gt.flow.shape[:2]}, predictions are {flow.shape[:2]}")
                e = metrics.aee(flow * args.flow_scale, gt.flow, gt.valid_mask, frame.counts.sum(axis=2) > 0)
                errs.append(e)
                fh.write(f"{f},{e.aee!r},{e.outlier_pct!r},{e.n_pixels},{e.flag}\n")
            m_aee, m_out, n_ok = metrics.mean_flow_error(errs)
            fh.write(f"mean,{m_aee!r},{m_out!r},{n_ok},\n")
    if args.images:
        for f, layers in enumerate(res.layer_outputs):
            for l, t in enumerate(layers[:-1]):
                metrics.density_map_image(t, out(f"density_f{f}_l{l}.ppm"), f"config_hash={digest}")
            metrics.flow_image(res.flows[f], out(f"flow_f{f}.ppm"), f"config_hash={digest}")
    if args.log_activity:
        dfengine.write_activity_log(out("activity.csv"), res.layer_outputs)
    print(f"latency_us={res.ledger.latency_us:.3f} total_time_us={res.ledger.total_time_us:.3f} "
          f"energy_uj={res.ledger.energy_uj:.3f} mean_neuron_density={rep.mean_neuron_density:.4f} "
          f"mean_pixel_density={rep.mean_pixel_density:.4f}")
    return EXIT_OK


# ------------------------------------------------------------------ controlled


def cmd_controlled(args):
    if args.profile:
        _require(args.profile, "--profile")
    try:
        params = costsim.load_params(args.profile, args.profile_name)
    except costsim.ProfileError as exc:
        raise ConfigError(str(exc)) from None
    digest = config_hash(args, [("profile", args.profile)])
    rows = costsim.controlled_sweep(params, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "controlled.csv"), "w") as fh:
        fh.write(f"# config_hash={digest}\n")
        fh.write("kind,sweep,active_pixels,per_pixel,acsp,time_us,energy_uj\n")
        for kind, sweep, p, n, total, t, e in rows:
            fh.write(f"{kind},{sweep},{p},{n},{total},{float(t)!r},{float(e)!r}\n")
    return EXIT_OK


# ------------------------------------------------------------------ train


def cmd_train(args):
    h, w = args.resolution or (fixtures.TOY_SIZE, fixtures.TOY_SIZE)
    if h > 32 or w > 32 or args.channels > 8:
        raise ConfigError("the toy trainer handles at most 32x32 pixels and 8 channels")
    try:
        cfg = sparsetrain.TrainConfig(lambda_s=args.lambda_s, epochs=args.epochs, max_lr=args.lr, seed=args.seed,
                                      bptt=args.bptt, surrogate_width=args.surrogate_width)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    digest = config_hash(args)
    data = sparsetrain.synthetic_flow_dataset(args.sequences, args.frames, h, w, seed=args.seed)
    init = netspec.firenet(args.kind, channels=args.channels, seed=args.seed, threshold=0.5, height=h, width=w)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "train_log.csv"), "w") as fh:
        sparsetrain.write_log_header(fh, [f"config_hash={digest}"])
        spec, hist = sparsetrain.train(init, data, cfg, log=lambda e, p: fh.write(sparsetrain.log_row(e, p)))
    netspec.save_network(spec, os.path.join(args.out, "weights.sfnw"))
    print(f"final loss={hist[-1].loss:.6g} neuron_density={hist[-1].neuron_density:.4f}")
    return EXIT_OK


# ------------------------------------------------------------------ selftest


def _selftest_checks():
    from .tensorcore import bf16_bits

    def oracle():
        rng = np.random.default_rng(0)
        for trial in range(6):
            kind = ("ann", "snn")[trial % 2]
            spec = netspec.firenet(kind, channels=4, seed=trial, threshold=0.05 if kind == "ann" else 0.3)
            frames = [rng.poisson(0.6, (8, 8, 2)) * (rng.random((8, 8, 1)) < 0.4) for _ in range(2)]
            got = dfengine.run_network(frames, spec).layer_outputs
            want = netspec.reference_forward(spec, frames)
            for g, r in zip(got, want):
                if not all(np.array_equal(bf16_bits(a), bf16_bits(b)) for a, b in zip(g[1:], r)):
                    return False
        return True

    def grouping():
        from .dfengine import n_groups

        return [n_groups(n) for n in (1, 4, 6, 10)] == [1, 1, 2, 3]

    def anchors():
        p = costsim.default_params()
        pts = [(codec.AER, 1, 2.52), (codec.AER, 28, 8.14), (codec.BITMASK, 1, 5.14), (codec.BITMASK, 28, 8.04)]
        return all(abs(p.decode_time(s, n) - t) < 1e-6 for s, n, t in pts) and costsim.decode_crossover(p) == 28

    def densities():
        a = np.zeros((5, 5, 8))
        a[0, 0] = a[1, 1] = 1
        b = np.zeros((5, 5, 8))
        b.reshape(25, 8)[np.arange(16), 0] = 1
        return (metrics.neuron_density(a), metrics.pixel_density(a), metrics.pixel_density(b)) == (0.08, 0.08, 0.64)

    def codec_roundtrip():
        rng = np.random.default_rng(1)
        for _ in range(500):
            chans = np.flatnonzero(rng.random(32) < 0.3)
            vals = np.ones(len(chans), np.float32)
            for scheme in codec.SCHEMES:
                c, v = codec.decode_events(codec.encode_events(chans, vals, scheme), scheme)
                if not (np.array_equal(c, chans) and np.array_equal(v, vals)):
                    return False
        return True

    def gradients():
        data = sparsetrain.synthetic_flow_dataset(2, 3, 6, 6, seed=0)
        spec = netspec.firenet("snn", channels=3, seed=0, threshold=0.3)
        spec.layers = [spec.layers[1], spec.layers[2], spec.layers[-1]]
        spec.layers[0] = netspec.LayerSpec(netspec.CONV_LIF, np.random.default_rng(0).normal(size=(3, 3, 2, 3)) * 0.5,
                                           None, np.full(3, 0.3), np.full(3, 0.5), spec.layers[0].rec_kernel)
        net = sparsetrain.ToyNet.from_spec(spec)
        return sparsetrain.grad_check(net, data.frames, data.targets, lambda_s=1e-2).worst < 1e-4

    return [("oracle equivalence", oracle), ("grouping rounds", grouping), ("decode anchors", anchors),
            ("density examples", densities), ("codec round-trip", codec_roundtrip), ("surrogate gradients", gradients)]


def cmd_selftest(args):
    ok = True
    for name, check in _selftest_checks():
        passed = bool(check())
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} {name}")
    return EXIT_OK if ok else EXIT_SELFTEST


def cmd_fixtures(args):
    for p in fixtures.generate(args.out, seed=args.seed):
        print(p)
    return EXIT_OK


# ------------------------------------------------------------------ entry point


def build_parser():
    ap = argparse.ArgumentParser(prog="sparseflow", description=__doc__.splitlines()[0])
    ap.add_argument("--backend-info", action="store_true", help="print the kernel backend and exit")
    sub = ap.add_subparsers(dest="command")

    def common(p, out_required=True):
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--profile", help="cost profile JSON (default: bundled)")
        p.add_argument("--profile-name", default="default")

    p = sub.add_parser("infer", help="run event frames through the simulated cores")
    common(p)
    p.add_argument("--net", help="weight file")
    p.add_argument("--events", help="spike text file 't_us x y p'")
    p.add_argument("--gt", help="flow ground truth (SFGT)")
    p.add_argument("--scheme", choices=codec.SCHEMES)
    p.add_argument("--resolution", type=_resolution, help="network input HxW (default: from weight file)")
    p.add_argument("--sensor", type=_resolution, help="event sensor HxW (default: resolution x downsample)")
    p.add_argument("--downsample", type=int, default=1, help="central crop then block-sum by this factor")
    p.add_argument("--frame-count", type=int, help="spikes per frame (default: time windows)")
    p.add_argument("--frame-window", type=int, default=fixtures.FRAME_WINDOW_US, help="frame length in us")
    p.add_argument("--flow-scale", type=float, default=1.0, help="pixels per frame per unit network output")
    p.add_argument("--memory-kb", type=int, default=dfengine.DEFAULT_CORE_MEMORY // 1024)
    p.add_argument("--threads", action="store_true", help="one thread per simulated core")
    p.add_argument("--images", action="store_true", help="write density maps and flow images (PPM)")
    p.add_argument("--log-activity", action="store_true", help="dump every nonzero ac./sp. to activity.csv")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("controlled", help="single-layer cost sweep over pixel counts and per-pixel counts")
    common(p)
    p.set_defaults(func=cmd_controlled)

    p = sub.add_parser("train", help="toy sparsity-aware training on synthetic flow")
    common(p)
    p.add_argument("--kind", choices=("ann", "snn"), default="snn")
    p.add_argument("--resolution", type=_resolution)
    p.add_argument("--channels", type=int, default=fixtures.TOY_CHANNELS)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--lambda-s", type=float, default=1e-3)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--bptt", type=int, default=5)
    p.add_argument("--surrogate-width", type=float, default=1.0)
    p.add_argument("--sequences", type=int, default=4)
    p.add_argument("--frames", type=int, default=6)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("selftest", help="run the built-in invariant checks")
    p.set_defaults(func=cmd_selftest)

    p = sub.add_parser("fixtures", help="regenerate the bundled fixture files")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_fixtures)
    return ap


def main(argv=None):
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    if args.backend_info:
        print(_accel.backend_name())
        return EXIT_OK
    if not getattr(args, "func", None):
        ap.print_help()
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except sparsetrain.DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
