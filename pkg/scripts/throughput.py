"""CPU throughput of the bert-base preset at several pruning depths.

Each depth runs in a fresh process so allocator state does not leak between
measurements.

    python scripts/throughput.py --zs 0,2,6,11 --timed 5
"""

import argparse
import json
import subprocess
import sys


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--zs", default="0,2,6,11")
    ap.add_argument("--batch", type=int, default=64)
    ap.add_argument("--seq-len", type=int, default=128)
    ap.add_argument("--warmup", type=int, default=1)
    ap.add_argument("--timed", type=int, default=5)
    ap.add_argument("--out")
    args = ap.parse_args()

    results = {}
    for z in args.zs.split(","):
        cmd = [sys.executable, "-m", "headroute", "bench", "--preset", "bert-base", "--z", z,
               "--batch", str(args.batch), "--seq-len", str(args.seq_len),
               "--warmup", str(args.warmup), "--timed", str(args.timed), "--json"]
        res = json.loads(subprocess.run(cmd, check=True, capture_output=True, text=True).stdout)
        results[z] = res
        print(f"Z={z:>2}: {res['throughput']:8.2f} ex/s  {res['latency_ms']:8.2f} ms/ex", flush=True)
    base = results[args.zs.split(",")[0]]["throughput"]
    for z, res in results.items():
        print(f"Z={z:>2}: {res['throughput'] / base:.2f}x")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(results, fh, indent=2)


if __name__ == "__main__":
    main()
