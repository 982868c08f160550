"""Expert usage at the end of Stage 1, with and without the balance term.

    python scripts/balance_sweep.py --config scripts/configs/toy_balance.json --seeds 0,1,2
"""

import argparse
import dataclasses
import json

from headroute.cli import load_config, load_data
from headroute.data import SyntheticTaskSpec, gen_cluster_task
from headroute.encoder import Encoder
from headroute.training import TrainConfig, train


def run(rc, seed, lam):
    spec = SyntheticTaskSpec.from_dict({**rc.data["synthetic"], "seed": seed})
    tr, va = gen_cluster_task(spec)
    model = Encoder(dataclasses.replace(rc.encoder, seed=seed))
    cfg = TrainConfig.from_dict({**rc.train.to_dict(), "lam": lam, "seed": seed})
    res = train(model, tr, cfg, valid=va)
    return res.epochs


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", required=True)
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--lams", default="0.1,0")
    ap.add_argument("--out")
    args = ap.parse_args()
    rc = load_config(args.config)
    if "synthetic" not in rc.data:
        ap.error("the sweep reseeds the synthetic task; use a synthetic data config")
    load_data(rc)  # fail early on a bad data section

    rows = []
    for lam in (float(x) for x in args.lams.split(",")):
        for seed in (int(s) for s in args.seeds.split(",")):
            epochs = run(rc, seed, lam)
            stage1 = [e for e in epochs if e["stage"] == 1][-1]
            peak = max(max(f) for f in stage1["usage"].values())
            final = max(max(f) for f in epochs[-1]["usage"].values())
            rows.append({"lam": lam, "seed": seed, "max_usage_stage1": peak,
                         "max_usage_final": final, "valid_accuracy": epochs[-1]["valid_accuracy"]})
            print(f"lam={lam:<4} seed={seed} max usage end of stage 1 {peak:.3f}, "
                  f"final {final:.3f}, valid acc {epochs[-1]['valid_accuracy']:.3f}", flush=True)
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
