"""Parameter/FLOP table for the bert-base preset at several pruning depths.

    python scripts/cost_table.py --m 1 --seq-len 128 --out cost_table.json
"""

import argparse
import json

from headroute.accounting import table1_row
from headroute.cli import format_table
from headroute.encoder import Encoder, EncoderConfig


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--zs", default="0,2,4,6,8,10,11")
    ap.add_argument("--m", type=int, default=1)
    ap.add_argument("--seq-len", type=int, default=128)
    ap.add_argument("--out")
    args = ap.parse_args()

    cfg = EncoderConfig.bert_base()
    baseline = Encoder(cfg, skeleton=True)
    rows = [table1_row(cfg, int(z), args.m, args.seq_len, baseline) for z in args.zs.split(",")]
    print(format_table(rows))
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({"m": args.m, "seq_len": args.seq_len, "rows": rows}, fh, indent=2)


if __name__ == "__main__":
    main()
