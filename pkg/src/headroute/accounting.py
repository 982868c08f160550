"""Parameter and FLOP accounting, plus a CPU throughput benchmark.

FLOP convention: a multiply-accumulate is 2 FLOPs. Elementwise work is
charged per element: bias/residual add 1, scale or mask 1, softmax 5,
LayerNorm 5, GELU 8, tanh 4. Embeddings are excluded, mirroring the
parameter convention; pooler and classifier run on the [CLS] row only.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .encoder import Encoder, EncoderConfig, StandardLayer, classify
from .expert_attention import DeterministicLayer, MoELayer
from .pruning import prune_model, verify_static
from .training import ScheduleState, convert_next_layer
from .usage import UsageReport

DEFAULT_SEQ_LEN = 128
SOFTMAX_FLOPS = 5
LN_FLOPS = 5
GELU_FLOPS = 8
TANH_FLOPS = 4


class StatsError(ValueError):
    pass


@dataclass
class CostReport:
    params_total: int
    params_excluding_embeddings: int
    per_layer: list = field(default_factory=list)  # [{"layer", "kind", "params", "flops"}]
    head_params: int = 0
    seq_len: int = DEFAULT_SEQ_LEN
    flops_per_example: int = 0
    throughput: float | None = None  # examples / second
    latency_ms: float | None = None  # ms / example
    flop_convention: str = "MAC=2; add/scale 1, softmax 5, layernorm 5, gelu 8, tanh 4 per element"

    def to_dict(self) -> dict:
        return asdict(self)


def _is_embedding(name: str) -> bool:
    return name.startswith("embedding.")


def param_count(model: Encoder, exclude_embeddings: bool = True) -> int:
    """Exact scalar count over the model's parameter tensors."""
    return int(sum(
        p.size for p in model.parameters()
        if not (exclude_embeddings and _is_embedding(p.name))
    ))


def param_reduction(baseline: Encoder | int, pruned: Encoder | int) -> float:
    """100 * (1 - pruned / baseline), both without embeddings."""
    b = baseline if isinstance(baseline, int) else param_count(baseline)
    p = pruned if isinstance(pruned, int) else param_count(pruned)
    return 100.0 * (1.0 - p / b)


def _branch_flops(L: int, d: int, dh: int) -> int:
    qkv = 3 * (2 * L * d * dh + L * dh)
    attn = 4 * L * L * dh + 2 * L * L + SOFTMAX_FLOPS * L * L
    expander = 2 * L * dh * d + L * d + GELU_FLOPS * L * d + LN_FLOPS * L * d
    return qkv + attn + expander


def layer_flops(layer, L: int, cfg: EncoderConfig) -> int:
    d, h, dh, dff = cfg.d, cfg.h, cfg.d_head, cfg.d_ff
    if isinstance(layer, StandardLayer):
        proj = 4 * (2 * L * d * d + L * d)
        attn = 4 * L * L * d + 2 * h * L * L + SOFTMAX_FLOPS * h * L * L
        ffn = 2 * (2 * L * d * dff) + L * dff + L * d + GELU_FLOPS * L * dff
        norms = 2 * (L * d + LN_FLOPS * L * d)
        return proj + attn + ffn + norms
    if isinstance(layer, MoELayer):
        n, k = layer.n_experts, layer.k
        router = 2 * d * n + n + n
        combine = k * L * d if k > 1 else 0
        return router + k * _branch_flops(L, d, dh) + combine + L * d + LN_FLOPS * L * d
    if isinstance(layer, DeterministicLayer):
        m = layer.m
        combine = m * L * d if m > 1 else 0
        return m * _branch_flops(L, d, dh) + combine + L * d + LN_FLOPS * L * d
    raise TypeError(f"unknown layer type {type(layer).__name__}")


def head_flops(model: Encoder) -> int:
    cfg = model.config
    f = 2 * cfg.d * cfg.n_classes + cfg.n_classes
    if model.pooler is not None:
        f += 2 * cfg.d * cfg.d + cfg.d + TANH_FLOPS * cfg.d
    return f


def flops_per_example(model: Encoder, L: int = DEFAULT_SEQ_LEN) -> int:
    return int(sum(layer_flops(layer, L, model.config) for layer in model.layers)
               + head_flops(model))


def flops_remaining(baseline: Encoder, pruned: Encoder, L: int = DEFAULT_SEQ_LEN) -> float:
    return 100.0 * flops_per_example(pruned, L) / flops_per_example(baseline, L)


def cost_report(model: Encoder, L: int = DEFAULT_SEQ_LEN) -> CostReport:
    per_layer = [
        {"layer": i, "kind": layer.kind, "params": layer.num_parameters(),
         "flops": layer_flops(layer, L, model.config)}
        for i, layer in enumerate(model.layers)
    ]
    head = (model.pooler.num_parameters() if model.pooler is not None else 0) \
        + model.classifier.num_parameters()
    return CostReport(
        params_total=param_count(model, exclude_embeddings=False),
        params_excluding_embeddings=param_count(model),
        per_layer=per_layer,
        head_params=head,
        seq_len=L,
        flops_per_example=flops_per_example(model, L),
    )


def build_variant(cfg: EncoderConfig, z: int, m: int = 1, skeleton: bool = True,
                  k: int = 1) -> Encoder:
    """Baseline with its z deepest layers converted and pruned to m experts.

    No training happens: pruning keeps experts 0..m-1 (uniform usage ties
    resolve to the lowest indices).
    """
    model = Encoder(cfg, skeleton=skeleton)
    if z == 0:
        return model
    schedule = ScheduleState(target=z)
    for _ in range(z):
        convert_next_layer(model, schedule, k=k)
    report = UsageReport.for_model(model, dataset="uniform")
    for rec in report.layers.values():
        rec.counts[:] = 1
        rec.total = rec.n_experts
    report.k = 1
    pruned, _ = prune_model(model, report, m, inplace=True)
    return pruned


def random_batch(cfg: EncoderConfig, batch: int, L: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    ids = rng.integers(3, cfg.vocab_size, size=(batch, L))
    ids[:, 0] = 1
    return ids, np.ones((batch, L), dtype=np.int64)


def bench(model: Encoder, batch: int = 64, L: int = DEFAULT_SEQ_LEN, warmup_iters: int = 3,
          timed_iters: int = 20, routed: bool = False, seed: int = 0) -> dict:
    """Median throughput over timed forward passes of one fixed random batch."""
    if timed_iters < 5:
        raise StatsError(f"timed_iters must be >= 5 for a stable median, got {timed_iters}")
    if not routed and not verify_static(model):
        raise StatsError("model still routes; pass routed=True to benchmark it anyway")
    if L > model.config.max_len:
        raise ValueError(f"seq_len {L} exceeds max_len {model.config.max_len}")
    ids, mask = random_batch(model.config, batch, L, seed)
    for _ in range(warmup_iters):
        classify(ids, mask, model)
    rates = []
    for _ in range(timed_iters):
        t0 = time.perf_counter()
        classify(ids, mask, model)
        rates.append(batch / (time.perf_counter() - t0))
    tput = statistics.median(rates)
    return {
        "batch": batch,
        "seq_len": L,
        "warmup_iters": warmup_iters,
        "timed_iters": timed_iters,
        "throughput": tput,
        "latency_ms": 1000.0 / tput,
        "samples": rates,
        "dtype": model.config.dtype,
    }


def table1_row(cfg: EncoderConfig, z: int, m: int = 1, L: int = DEFAULT_SEQ_LEN,
               baseline: Encoder | None = None) -> dict:
    baseline = baseline or Encoder(cfg, skeleton=True)
    variant = build_variant(cfg, z, m)
    return {
        "z": z,
        "pruning": f"{z}/{cfg.n_layers}",
        "params": param_count(variant),
        "param_reduction": param_reduction(baseline, variant),
        "flops_remaining": flops_remaining(baseline, variant, L),
    }
