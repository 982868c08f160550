"""Command-line entry point: ``headroute <command> ...``.

Exit codes: 0 success, 2 configuration error, 3 numeric failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from dataclasses import dataclass
from pathlib import Path

from . import accounting, model_io, pruning, usage
from .data import DataError, Dataset, SyntheticTaskSpec, Vocab, gen_cluster_task, load_tsv
from .encoder import Encoder, EncoderConfig
from .model_io import CheckpointError
from .training import NonFiniteLoss, TrainConfig, evaluate, train

log = logging.getLogger("headroute")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
CONFIG_KEYS = {"encoder", "train", "data"}


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_CONFIG):
        super().__init__(message)
        self.code = code


# ------------------------------------------------------------------ config


@dataclass
class RunConfig:
    encoder: EncoderConfig
    train: TrainConfig
    data: dict

    def to_dict(self) -> dict:
        return {"encoder": self.encoder.to_dict(), "train": self.train.to_dict(), "data": self.data}


def parse_config(doc: dict) -> RunConfig:
    """Validate a run document. Every section is optional except ``data``."""
    if not isinstance(doc, dict):
        raise CliError("config must be a JSON object")
    unknown = set(doc) - CONFIG_KEYS
    if unknown:
        raise CliError(f"unknown config keys: {sorted(unknown)}")
    if "data" not in doc:
        raise CliError("config.data is required ({'synthetic': {...}} or {'tsv': {...}})")
    try:
        enc = EncoderConfig.from_dict(doc.get("encoder", {}))
        tr = TrainConfig.from_dict(doc.get("train", {}))
    except (TypeError, ValueError) as e:
        raise CliError(f"config: {e}") from None
    data = doc["data"]
    if not isinstance(data, dict) or len(data) != 1 or next(iter(data)) not in ("synthetic", "tsv"):
        raise CliError("config.data must have exactly one key: 'synthetic' or 'tsv'")
    if "synthetic" in data:
        try:
            spec = SyntheticTaskSpec.from_dict(data["synthetic"])
        except (TypeError, DataError) as e:
            raise CliError(f"config.data.synthetic: {e}") from None
        if spec.vocab_size > enc.vocab_size:
            raise CliError(f"encoder.vocab_size={enc.vocab_size} < data vocab_size={spec.vocab_size}")
        if spec.seq_len > enc.max_len:
            raise CliError(f"encoder.max_len={enc.max_len} < data seq_len={spec.seq_len}")
        if spec.n_classes > enc.n_classes:
            raise CliError(f"encoder.n_classes={enc.n_classes} < data n_classes={spec.n_classes}")
    else:
        tsv = data["tsv"]
        missing = {"train", "vocab"} - set(tsv)
        extra = set(tsv) - {"train", "valid", "vocab"}
        if missing or extra:
            raise CliError(f"config.data.tsv needs train, vocab (optional valid); "
                           f"missing={sorted(missing)} unknown={sorted(extra)}")
    try:
        tr.validate_for(enc.n_layers, enc.h)
    except ValueError as e:
        raise CliError(f"config.train: {e}") from None
    return RunConfig(enc, tr, data)


def read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except OSError as e:
        raise CliError(f"cannot read {path}: {e}", EXIT_IO) from None
    except json.JSONDecodeError as e:
        raise CliError(f"{path} is not valid JSON: {e}") from None


def load_config(path) -> RunConfig:
    return parse_config(read_json(path))


def load_data(rc: RunConfig) -> tuple[Dataset, Dataset | None]:
    if "synthetic" in rc.data:
        return gen_cluster_task(SyntheticTaskSpec.from_dict(rc.data["synthetic"]))
    tsv = rc.data["tsv"]
    try:
        vocab = Vocab.from_file(tsv["vocab"])
        if len(vocab) > rc.encoder.vocab_size:
            raise CliError(f"vocab has {len(vocab)} ids but encoder.vocab_size={rc.encoder.vocab_size}")
        tr = load_tsv(tsv["train"], vocab, rc.encoder.max_len)
        va = load_tsv(tsv["valid"], vocab, rc.encoder.max_len) if "valid" in tsv else None
    except OSError as e:
        raise CliError(f"cannot read data: {e}", EXIT_IO) from None
    return tr, va


def data_for_eval(spec: str, split: str, model: Encoder) -> Dataset:
    """``spec`` is a run config (its data section) or ``path.tsv:vocab.txt``."""
    if spec.endswith(".json"):
        train_set, valid_set = load_data(load_config(spec))
        ds = valid_set if split == "valid" and valid_set is not None else train_set
        return ds
    path, sep, vocab_path = spec.partition(":")
    if not sep:
        raise CliError("--data must be a config .json or 'data.tsv:vocab.txt'")
    try:
        return load_tsv(path, Vocab.from_file(vocab_path), model.config.max_len)
    except OSError as e:
        raise CliError(f"cannot read data: {e}", EXIT_IO) from None


def load_model(prefix) -> Encoder:
    try:
        return model_io.load(prefix)
    except CheckpointError as e:
        raise CliError(f"bad checkpoint {prefix}: {e}", EXIT_IO) from None
    except OSError as e:
        raise CliError(str(e), EXIT_IO) from None
    except (KeyError, ValueError) as e:
        raise CliError(f"bad checkpoint {prefix}: {e}", EXIT_IO) from None


def write_json(path, doc: dict):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
    os.replace(tmp, path)


def emit(doc, as_json: bool, text: str):
    print(json.dumps(doc, indent=2) if as_json else text)


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    rc = load_config(args.config)
    train_set, valid_set = load_data(rc)
    model = Encoder(rc.encoder)
    log_path = Path(str(args.out) + ".log.jsonl")
    log_path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_log = tempfile.mkstemp(dir=log_path.parent, prefix=log_path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            result = train(model, train_set, rc.train, valid=valid_set, log_file=fh)
            for summary in result.epochs:
                fh.write(json.dumps({"epoch_summary": summary}) + "\n")
        model_io.save(model, args.out)
        write_json(str(args.out) + ".config.json", rc.to_dict())
        os.replace(tmp_log, log_path)
    finally:
        if os.path.exists(tmp_log):
            os.unlink(tmp_log)
    out = {"final_loss": result.final_loss, "epochs": result.epochs, "checkpoint": str(args.out)}
    lines = [f"epoch {s['epoch']} stage {s['stage']} modified {s['modified_layers']}"
             + (f" valid_acc {s['valid_accuracy']:.4f}" if "valid_accuracy" in s else "")
             for s in result.epochs]
    lines.append(f"final loss {result.final_loss:.6f}; checkpoint {args.out}")
    emit(out, args.json, "\n".join(lines))
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_model(args.model)
    ds = data_for_eval(args.data, args.split, model)
    acc = evaluate(model, ds)
    emit({"accuracy": acc, "n": len(ds)}, args.json, f"accuracy {acc:.4f} on {len(ds)} examples")
    return EXIT_OK


def cmd_usage(args) -> int:
    model = load_model(args.model)
    if not model.moe_layer_indices():
        raise CliError("model has no routed layers; nothing to measure")
    ds = data_for_eval(args.data, args.split, model)
    report = usage.collect(model, ds)
    report.save(args.out)
    summ = usage.summary(report)
    lines = [f"layer {i}: " + " ".join(f"{f:.3f}" for f in s["frequencies"])
             + f"  entropy {s['entropy']:.3f}/{s['uniform_entropy']:.3f}" for i, s in summ.items()]
    emit({str(i): s for i, s in summ.items()}, args.json, "\n".join(lines))
    return EXIT_OK


def cmd_prune(args) -> int:
    model = load_model(args.model)
    try:
        report = usage.UsageReport.load(args.usage)
    except OSError as e:
        raise CliError(f"cannot read usage report: {e}", EXIT_IO) from None
    except (usage.UsageError, json.JSONDecodeError) as e:
        raise CliError(f"bad usage report: {e}") from None
    before = accounting.param_count(model)
    try:
        pruned, manifest = pruning.prune_model(model, report, args.m)
    except pruning.PruneError as e:
        raise CliError(str(e)) from None
    model_io.save(pruned, args.out)
    write_json(str(args.out) + ".prune.json", manifest)
    after = accounting.param_count(pruned)
    doc = {"params_before": before, "params_after": after,
           "param_reduction": accounting.param_reduction(before, after), **manifest}
    emit(doc, args.json, f"params {before} -> {after} "
                         f"({doc['param_reduction']:.2f}% fewer); retained {manifest['retained']}")
    return EXIT_OK


def _preset_cfg(name: str) -> EncoderConfig:
    if name != "bert-base":
        raise CliError(f"unknown preset {name!r} (known: bert-base)")
    return EncoderConfig.bert_base()


def _model_from_args(args, skeleton: bool) -> tuple[Encoder, Encoder]:
    """(model, baseline) from --model/--baseline or --preset/--z/--m."""
    if args.model:
        model = load_model(args.model)
        baseline = load_model(args.baseline) if args.baseline else Encoder(model.config, skeleton=True)
        return model, baseline
    if not args.preset:
        raise CliError("give --model PREFIX or --preset NAME")
    cfg = _preset_cfg(args.preset)
    if not 0 <= args.z <= cfg.n_layers:
        raise CliError(f"--z must lie in [0, {cfg.n_layers}]")
    if not 1 <= args.m <= cfg.h:
        raise CliError(f"--m must lie in [1, {cfg.h}]")
    model = accounting.build_variant(cfg, args.z, args.m, skeleton=skeleton)
    return model, Encoder(cfg, skeleton=True)


def _seq_len(args, model: Encoder) -> int:
    L = args.seq_len or min(accounting.DEFAULT_SEQ_LEN, model.config.max_len)
    if not 1 <= L <= model.config.max_len:
        raise CliError(f"--seq-len must lie in [1, {model.config.max_len}]")
    return L


def format_table(rows: list[dict]) -> str:
    head = f"{'pruning':>8} {'params':>12} {'param red.':>11} {'tput gain':>10} {'FLOPs rem.':>11}"
    out = [head, "-" * len(head)]
    for r in rows:
        gain = f"{r['throughput_gain']:.2f}x" if r.get("throughput_gain") else "-"
        out.append(f"{r['pruning']:>8} {r['params']:>12,d} {r['param_reduction']:>10.2f}% "
                   f"{gain:>10} {r['flops_remaining']:>10.2f}%")
    return "\n".join(out)


def cmd_count(args) -> int:
    model, baseline = _model_from_args(args, skeleton=True)
    args.seq_len = _seq_len(args, model)
    n_pruned = sum(k != "standard" for k in model.layer_kinds())
    rep = accounting.cost_report(model, args.seq_len)
    row = {
        "pruning": f"{n_pruned}/{model.config.n_layers}",
        "params": rep.params_excluding_embeddings,
        "baseline_params": accounting.param_count(baseline),
        "param_reduction": accounting.param_reduction(baseline, model),
        "flops_per_example": rep.flops_per_example,
        "flops_remaining": accounting.flops_remaining(baseline, model, args.seq_len),
        "seq_len": args.seq_len,
        "report": rep.to_dict(),
    }
    emit(row, args.json, format_table([row]))
    return EXIT_OK


def cmd_bench(args) -> int:
    model, _ = _model_from_args(args, skeleton=False)
    args.seq_len = _seq_len(args, model)
    if args.dtype:
        for p in model.parameters():
            p.data = p.data.astype(args.dtype)
        model.config.dtype = args.dtype
    try:
        res = accounting.bench(model, args.batch, args.seq_len, args.warmup, args.timed,
                               routed=args.routed)
    except accounting.StatsError as e:
        raise CliError(str(e)) from None
    res["threads"] = {k: os.environ.get(k) for k in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                                                      "MKL_NUM_THREADS")}
    res["cpu_count"] = os.cpu_count()
    res["layer_kinds"] = model.layer_kinds()
    if args.out:
        write_json(args.out, res)
    emit(res, args.json, f"{res['throughput']:.2f} examples/s, {res['latency_ms']:.2f} ms/example "
                         f"(batch {args.batch}, L {args.seq_len}, median of {args.timed})")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_all

    results = run_all(args.seed)
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'} {r.name:<16} err={r.error:.3e} tol={r.tol:.0e}")
    ok = all(r.ok for r in results)
    print("gradcheck:", "all passed" if ok else "FAILED")
    return EXIT_OK if ok else EXIT_NUMERIC


def ablate(rc: RunConfig, ks: list[int], ms: list[int]) -> list[dict]:
    """Train once per k, then prune the result to each m; one row per (k, m)."""
    train_set, valid_set = load_data(rc)
    eval_set = valid_set if valid_set is not None else train_set
    rows = []
    for k in ks:
        tcfg = TrainConfig.from_dict({**rc.train.to_dict(), "k": k})
        try:
            tcfg.validate_for(rc.encoder.n_layers, rc.encoder.h)
        except ValueError as e:
            raise CliError(str(e)) from None
        model = Encoder(rc.encoder)
        train(model, train_set, tcfg)
        pre = evaluate(model, eval_set)
        report = usage.collect(model, eval_set)
        for m in ms:
            pruned, manifest = pruning.prune_model(model, report, m)
            post = evaluate(pruned, eval_set)
            rows.append({"k": k, "z": tcfg.target_modified_layers, "m": m,
                         "pre": pre, "post": post, "diff": post - pre,
                         "retained": manifest["retained"]})
    return rows


def _int_list(s: str) -> list[int]:
    try:
        return [int(x) for x in s.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}") from None


def cmd_ablate(args) -> int:
    rc = load_config(args.config)
    rows = ablate(rc, args.ks, args.ms)
    if args.out:
        write_json(args.out, {"config": rc.to_dict(), "rows": rows})
    text = [f"{'k':>3} {'Z':>3} {'m':>3} {'pre':>8} {'post':>8} {'diff':>8}"]
    text += [f"{r['k']:>3} {r['z']:>3} {r['m']:>3} {r['pre']:>8.4f} {r['post']:>8.4f} {r['diff']:>+8.4f}"
             for r in rows]
    emit({"rows": rows}, args.json, "\n".join(text))
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="headroute", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, help):
        p = sub.add_parser(name, help=help)
        p.set_defaults(fn=fn)
        p.add_argument("--json", action="store_true", help="machine-readable output")
        return p

    p = add("train", cmd_train, "train with progressive conversion")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="checkpoint prefix")

    for name, fn, help in (("eval", cmd_eval, "accuracy of a checkpoint"),
                           ("usage", cmd_usage, "measure expert usage")):
        p = add(name, fn, help)
        p.add_argument("--model", required=True)
        p.add_argument("--data", required=True, help="run config .json or data.tsv:vocab.txt")
        p.add_argument("--split", choices=("train", "valid"), default="valid")
        if name == "usage":
            p.add_argument("--out", required=True)

    p = add("prune", cmd_prune, "keep the top-m experts per layer, drop routers")
    p.add_argument("--model", required=True)
    p.add_argument("--usage", required=True)
    p.add_argument("--m", type=int, default=1)
    p.add_argument("--out", required=True)

    for name, fn, help in (("count", cmd_count, "parameter and FLOP accounting"),
                           ("bench", cmd_bench, "CPU throughput benchmark")):
        p = add(name, fn, help)
        p.add_argument("--model")
        p.add_argument("--baseline")
        p.add_argument("--preset", choices=("bert-base",))
        p.add_argument("--z", type=int, default=0, help="converted-and-pruned layers (preset)")
        p.add_argument("--m", type=int, default=1, help="experts kept per layer (preset)")
        p.add_argument("--seq-len", type=int,
                       help=f"default: min({accounting.DEFAULT_SEQ_LEN}, max_len)")
        if name == "bench":
            p.add_argument("--batch", type=int, default=64)
            p.add_argument("--warmup", type=int, default=3)
            p.add_argument("--timed", type=int, default=20)
            p.add_argument("--dtype", choices=("float32", "float64"))
            p.add_argument("--routed", action="store_true", help="allow models that still route")
            p.add_argument("--out")

    p = add("gradcheck", cmd_gradcheck, "finite-difference check of every op")
    p.add_argument("--seed", type=int, default=0)

    p = add("ablate", cmd_ablate, "pre/post-prune accuracy for several k")
    p.add_argument("--config", required=True)
    p.add_argument("--ks", type=_int_list, default=[1, 3, 5])
    p.add_argument("--ms", type=_int_list, default=[1])
    p.add_argument("--out")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except (NonFiniteLoss, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except (DataError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
