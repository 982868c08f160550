"""Acceptance criteria 1-9. Each test prints one ``PASS``/``FAIL`` line.

Run alone with ``pytest tests/test_acceptance.py -v -s``; the lines are also
shown without ``-s`` because they bypass capture.
"""

import json
import subprocess
import sys
import time

import numpy as np
import pytest

from headroute import model_io
from headroute.cli import main
from headroute.data import SyntheticTaskSpec, gen_cluster_task
from headroute.encoder import Encoder, EncoderConfig
from headroute.expert_attention import convert_layer, deterministic_forward, moe_forward
from headroute.model_io import CheckpointError
from headroute.numkit import Tensor
from headroute.pruning import prune_layer, prune_model, verify_static
from headroute.training import TrainConfig, evaluate, train
from headroute.usage import collect

SEEDS = (0, 1, 2)


@pytest.fixture
def report(capsys):
    def _report(n, ok, detail, elapsed):
        with capsys.disabled():
            print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'} {detail} ({elapsed:.1f}s)")
    return _report


def count_json(capsys, z):
    assert main(["count", "--preset", "bert-base", "--z", str(z), "--m", "1",
                 "--seq-len", "128", "--json"]) == 0
    return json.loads(capsys.readouterr().out)


PARAM_TARGETS = {2: 16.1, 4: 32.2, 6: 48.2, 8: 64.3, 10: 80.4, 11: 88.5}
FLOP_TARGETS = {2: 83.91, 4: 67.82, 6: 51.74, 8: 35.65, 10: 19.56, 11: 11.52}


def test_criterion_1_param_reduction(capsys, report):
    t0 = time.perf_counter()
    got = {z: count_json(capsys, z)["param_reduction"] for z in PARAM_TARGETS}
    elapsed = time.perf_counter() - t0
    worst = max(abs(got[z] - PARAM_TARGETS[z]) for z in got)
    ok = worst <= 0.5 and elapsed < 5
    report(1, ok, " ".join(f"Z{z}={v:.2f}%" for z, v in got.items())
           + f" max_dev={worst:.2f}pp tol=0.5pp", elapsed)
    assert ok


def test_criterion_2_flops_remaining(capsys, report):
    t0 = time.perf_counter()
    got = {z: count_json(capsys, z)["flops_remaining"] for z in FLOP_TARGETS}
    elapsed = time.perf_counter() - t0
    worst = max(abs(got[z] - FLOP_TARGETS[z]) for z in got)
    ok = worst <= 1.5 and elapsed < 5
    report(2, ok, " ".join(f"Z{z}={v:.2f}%" for z, v in got.items())
           + f" max_dev={worst:.2f}pp tol=1.5pp", elapsed)
    assert ok


def test_criterion_3_gradcheck(capsys, report):
    t0 = time.perf_counter()
    code = main(["gradcheck"])
    lines = capsys.readouterr().out.splitlines()
    elapsed = time.perf_counter() - t0
    fails = [ln for ln in lines if ln.startswith("FAIL")]
    e2e = next(ln for ln in lines if "end_to_end" in ln)
    ok = code == 0 and not fails and elapsed < 60
    report(3, ok, f"{len(lines) - 1} checks, {len(fails)} failed; {e2e.split(None, 1)[1]}", elapsed)
    assert ok


def test_criterion_4_pruning_equivalence(report):
    t0 = time.perf_counter()
    cfg = EncoderConfig(d=16, h=4, n_layers=1, d_ff=32, dtype="float64", seed=3, init_std=0.3)
    model = Encoder(cfg)
    moe = convert_layer(model.layers[0], cfg, model.init, k=1)
    x = np.random.default_rng(11).standard_normal((1000, 6, 16))
    y, dec = moe_forward(Tensor(x), moe, None)
    chosen = dec.indices[:, 0]
    keep = int(np.bincount(chosen, minlength=4).argmax())
    z = deterministic_forward(Tensor(x), prune_layer(moe, [keep]), None).data
    diff = np.abs(z - y.data).reshape(1000, -1).max(axis=1)
    routed = chosen == keep
    violations = int(np.sum(diff[routed] > 1e-6))
    complement_min = float(diff[~routed].min()) if (~routed).any() else 0.0
    elapsed = time.perf_counter() - t0
    ok = violations == 0 and routed.any() and (~routed).any() and complement_min > 1e-6 \
        and elapsed < 60
    report(4, ok, f"expert {keep} routed {int(routed.sum())}/1000, violations={violations}, "
                  f"max_err_routed={diff[routed].max():.1e}, min_diff_other={complement_min:.2e}",
           elapsed)
    assert ok


def balance_run(seed, lam):
    spec = SyntheticTaskSpec(n_clusters=4, n_classes=4, vocab_size=64, seq_len=16,
                             n_train=4096, n_valid=512, seed=seed)
    tr, va = gen_cluster_task(spec)
    model = Encoder(EncoderConfig(d=32, h=4, n_layers=2, d_ff=64, vocab_size=64, max_len=16,
                                  n_classes=4, seed=seed))
    cfg = TrainConfig(lr=1e-3, batch_size=32, epochs=3, target_modified_layers=1, lam=lam,
                      seed=seed)
    res = train(model, tr, cfg, valid=va)
    last_stage1 = [e for e in res.epochs if e["stage"] == 1][-1]
    return max(max(f) for f in last_stage1["usage"].values())


def test_criterion_5_stage1_balance(report):
    t0 = time.perf_counter()
    bal = [balance_run(s, 0.1) for s in SEEDS]
    free = [balance_run(s, 0.0) for s in SEEDS]
    elapsed = time.perf_counter() - t0
    n_bal = sum(m <= 0.5 for m in bal)
    ok = n_bal >= 2 and max(free) >= 0.7 and elapsed < 600
    report(5, ok, f"max usage lam=0.1 {[round(m, 3) for m in bal]} ({n_bal}/3 <= 0.5); "
                  f"lam=0 {[round(m, 3) for m in free]} (collapse >= 0.7: {max(free) >= 0.7})",
           elapsed)
    assert ok


def prune_diff(seed, k):
    spec = SyntheticTaskSpec(n_clusters=16, n_classes=16, vocab_size=131, seq_len=16,
                             n_train=4096, n_valid=512, seed=seed)
    tr, va = gen_cluster_task(spec)
    model = Encoder(EncoderConfig(d=32, h=16, n_layers=1, d_ff=64, vocab_size=131, max_len=16,
                                  n_classes=16, seed=seed))
    train(model, tr, TrainConfig(lr=1e-3, batch_size=32, epochs=3, target_modified_layers=1,
                                 k=k, seed=seed))
    pre = evaluate(model, va)
    pruned, _ = prune_model(model, collect(model, va), m=1)
    return evaluate(pruned, va) - pre


def test_criterion_6_top1_vs_topk(report):
    t0 = time.perf_counter()
    d1 = [prune_diff(s, 1) for s in SEEDS]
    d3 = [prune_diff(s, 3) for s in SEEDS]
    elapsed = time.perf_counter() - t0
    passing = sum(a >= -0.02 and b <= -0.10 for a, b in zip(d1, d3))
    ok = passing >= 2 and elapsed < 1200
    report(6, ok, f"diff k=1 {[round(v, 3) for v in d1]}, k=3 {[round(v, 3) for v in d3]}; "
                  f"{passing}/3 seeds pass", elapsed)
    assert ok


def bench_cli(z):
    out = subprocess.run(
        [sys.executable, "-m", "headroute", "bench", "--preset", "bert-base", "--z", str(z),
         "--batch", "64", "--seq-len", "128", "--warmup", "1", "--timed", "5", "--json"],
        capture_output=True, text=True, check=True)
    return json.loads(out.stdout)["throughput"]


def test_criterion_7_throughput(report):
    t0 = time.perf_counter()
    tput = {z: bench_cli(z) for z in (0, 2, 6, 11)}
    elapsed = time.perf_counter() - t0
    seq = list(tput.values())
    monotone = all(a < b for a, b in zip(seq, seq[1:]))
    gain = tput[11] / tput[0]
    ok = monotone and gain >= 1.5 and elapsed < 600
    report(7, ok, " ".join(f"Z{z}={v:.2f}ex/s" for z, v in tput.items())
           + f" monotone={monotone} gain={gain:.2f}x", elapsed)
    assert ok


def test_criterion_8_persistence(tmp_path, report):
    t0 = time.perf_counter()
    cfg = EncoderConfig(d=16, h=4, n_layers=2, d_ff=32, vocab_size=24, max_len=8, n_classes=3)
    std = Encoder(cfg)
    moe = Encoder(cfg)
    moe.layers[1] = convert_layer(moe.layers[1], cfg, moe.init)
    pruned = Encoder(cfg)
    pruned.layers[1] = prune_layer(convert_layer(pruned.layers[1], cfg, pruned.init), [2])
    bitwise = {}
    for name, m in (("standard", std), ("moe", moe), ("pruned", pruned)):
        model_io.save(m, tmp_path / name)
        back = model_io.load(tmp_path / name)
        bitwise[name] = back.layer_kinds() == m.layer_kinds() and all(
            p.name == q.name and p.data.tobytes() == q.data.tobytes()
            for p, q in zip(m.parameters(), back.parameters()))
    static = verify_static(model_io.load(tmp_path / "pruned"))
    man_path = tmp_path / "pruned.manifest.json"
    man = json.loads(man_path.read_text())
    victim = man["tensors"][5]
    victim["byte_length"] += 4
    man_path.write_text(json.dumps(man))
    try:
        model_io.load(tmp_path / "pruned")
        rejected = ""
    except CheckpointError as e:
        rejected = str(e) if victim["name"] in str(e) else ""
    elapsed = time.perf_counter() - t0
    ok = all(bitwise.values()) and static and bool(rejected) and elapsed < 60
    report(8, ok, f"bitwise {bitwise}, pruned static={static}, corrupt -> {rejected!r}", elapsed)
    assert ok


def test_criterion_9_determinism(tmp_path, capsys, report):
    t0 = time.perf_counter()
    doc = {
        "encoder": {"d": 32, "h": 4, "n_layers": 2, "d_ff": 64, "vocab_size": 64, "max_len": 16,
                    "n_classes": 4, "seed": 0},
        "train": {"lr": 1e-3, "batch_size": 32, "epochs": 3, "target_modified_layers": 2,
                  "seed": 0},
        "data": {"synthetic": {"n_train": 512, "n_valid": 128, "seed": 0}},
    }
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps(doc))
    losses = []
    for run in ("a", "b"):
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / run), "--json"]) == 0
        losses.append(json.loads(capsys.readouterr().out)["final_loss"])
    same_bytes = all((tmp_path / f"a{ext}").read_bytes() == (tmp_path / f"b{ext}").read_bytes()
                     for ext in (".manifest.json", ".bin", ".log.jsonl"))
    elapsed = time.perf_counter() - t0
    ok = losses[0] == losses[1] and same_bytes and elapsed < 600
    report(9, ok, f"final loss {losses[0]!r} vs {losses[1]!r}, checkpoints identical={same_bytes}",
           elapsed)
    assert ok
