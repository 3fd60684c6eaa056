"""Compare the compiled pooling kernels with the numpy fallback, and fused with repeated pooling.

Run from the repo root after building the extension::

    python3 benchmarks/bench_pool.py --size full --runs 20

Each backend runs in its own interpreter because the backend is fixed at import.
"""
import argparse
import json
import os
import subprocess
import sys

CHILD = r"""
import json, sys
from bevsan.pooling import BACKEND, BenchConfig, pool_benchmark
slices, size, runs, warmup = json.loads(sys.argv[1])
rep = pool_benchmark(BenchConfig(slices=tuple(slices), size=size, runs=runs, warmup=warmup))
out = {"backend": BACKEND}
for S in slices:
    out[str(S)] = {k: rep.median(k, S) / 1e6 for k in ("reference", "fused")}
print(json.dumps(out))
"""


def run_backend(pure: bool, args) -> dict:
    env = dict(os.environ)
    env.pop("BEVSAN_PURE_PYTHON", None)
    if pure:
        env["BEVSAN_PURE_PYTHON"] = "1"
    payload = json.dumps([args.slices, args.size, args.runs, args.warmup])
    res = subprocess.run([sys.executable, "-c", CHILD, payload], env=env, capture_output=True, text=True, check=True)
    return json.loads(res.stdout)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--slices", type=lambda s: [int(x) for x in s.split(",")], default=[1, 3, 6, 9])
    ap.add_argument("--size", default="full", choices=["tiny", "small", "medium", "full"])
    ap.add_argument("--runs", type=int, default=20)
    ap.add_argument("--warmup", type=int, default=3)
    args = ap.parse_args()

    results = [run_backend(False, args), run_backend(True, args)]
    print(f"{'backend':>10} {'S':>3} {'reference ms':>13} {'fused ms':>9} {'fused/ref':>9}")
    for r in results:
        for S in args.slices:
            m = r[str(S)]
            print(f"{r['backend']:>10} {S:>3} {m['reference']:>13.2f} {m['fused']:>9.2f} "
                  f"{m['fused'] / m['reference']:>9.3f}")
    if results[0]["backend"] != results[1]["backend"]:
        for S in args.slices:
            a, b = results[0][str(S)], results[1][str(S)]
            print(f"S={S}: compiled speedup over fallback, reference {b['reference'] / a['reference']:.1f}x, "
                  f"fused {b['fused'] / a['fused']:.1f}x")
    else:
        print("compiled extension not available; both runs used the fallback")


if __name__ == "__main__":
    main()
