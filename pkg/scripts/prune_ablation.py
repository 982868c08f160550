"""Pre/post-prune accuracy for Top-1 and Top-k routing over several seeds.

    python scripts/prune_ablation.py --config scripts/configs/toy_ablation.json --ks 1,3
"""

import argparse
import dataclasses
import json
import statistics

from headroute.cli import ablate, load_config


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", required=True)
    ap.add_argument("--ks", default="1,3")
    ap.add_argument("--m", type=int, default=1)
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--out")
    args = ap.parse_args()
    base = load_config(args.config)
    ks = [int(k) for k in args.ks.split(",")]

    rows = []
    for seed in (int(s) for s in args.seeds.split(",")):
        rc = dataclasses.replace(
            base,
            encoder=dataclasses.replace(base.encoder, seed=seed),
            train=dataclasses.replace(base.train, seed=seed),
            data={"synthetic": {**base.data["synthetic"], "seed": seed}},
        )
        for r in ablate(rc, ks, [args.m]):
            rows.append({"seed": seed, **r})
            print(f"seed {seed} k={r['k']} pre {r['pre']:.4f} post {r['post']:.4f} "
                  f"diff {r['diff']:+.4f}", flush=True)
    for k in ks:
        diffs = [r["diff"] for r in rows if r["k"] == k]
        print(f"k={k}: mean diff {statistics.mean(diffs):+.4f}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
