"""Numba vs numpy kernels: wall time of one profile-fixture inference per backend.

Each backend runs in a fresh interpreter so SPARSEFLOW_NO_NUMBA takes effect
at import. Usage: python3 benchmarks/bench_kernels.py [--kind snn|ann] [--repeat N]
"""
import argparse
import json
import os
import subprocess
import sys

CHILD = r"""
import json, sys, time
from sparseflow import backend_name, dfengine, evio, fixtures, netspec
kind, repeat = sys.argv[1], int(sys.argv[2])
spec = netspec.load_network(fixtures.data_path(f"profile_{kind}.sfnw"))
spikes = evio.read_spikes(fixtures.data_path(f"profile_{kind}_events.txt"))
frames = evio.build_frames(spikes, spec.height, spec.width, window=fixtures.FRAME_WINDOW_US)
dfengine.run_network(frames[:1], spec)  # warm-up (numba compile or cache load)
times = []
for _ in range(repeat):
    t = time.perf_counter()
    res = dfengine.run_network(frames, spec)
    times.append(time.perf_counter() - t)
print(json.dumps({"backend": backend_name(), "best_s": min(times), "latency_us": res.ledger.latency_us}))
"""


def run(kind, repeat, no_numba):
    env = dict(os.environ)
    env.pop("SPARSEFLOW_NO_NUMBA", None)
    if no_numba:
        env["SPARSEFLOW_NO_NUMBA"] = "1"
    out = subprocess.run([sys.executable, "-c", CHILD, kind, str(repeat)], env=env, capture_output=True,
                         text=True, check=True)
    return json.loads(out.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--kind", choices=("snn", "ann"), default="snn")
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    fast = run(args.kind, args.repeat, False)
    slow = run(args.kind, args.repeat, True)
    # both backends must agree on the simulated result, not just finish
    assert fast["latency_us"] == slow["latency_us"], (fast, slow)
    for r in (fast, slow):
        print(f"{r['backend']:>6}: {r['best_s']:.3f} s per run (3 frames, 56x56x32, {args.kind})")
    print(f"speed-up: {slow['best_s'] / fast['best_s']:.1f}x")


if __name__ == "__main__":
    main()
