"""Expert Attention: per-head experts, a shared expander FFN and a [CLS] router.

A converted layer computes, per sequence,

    E = ExpFFN(Head_i*(X)),   Y = LayerNorm(E + X)

where ``i*`` is the argmax of a linear router applied to the [CLS] row.
For k > 1 the k selected branches are averaged. Routing is hard, so the
task loss never reaches the router; the router only learns through the
balance loss computed on ``softmax(logits)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numkit as nk
from .encoder import EncoderConfig, Init, LayerNormParams, Linear, Module, StandardLayer, mask_bias
from .numkit import Parameter, Tensor


class ExpertHead(Module):
    def __init__(self, prefix: str, cfg: EncoderConfig, init: Init):
        d, dh = cfg.d, cfg.d_head
        self.q = Linear(f"{prefix}.q", d, dh, init)
        self.k = Linear(f"{prefix}.k", d, dh, init)
        self.v = Linear(f"{prefix}.v", d, dh, init)


class ExpanderFFN(Module):
    """d_head -> d linear, GELU, LayerNorm. Shared by every expert of a layer."""

    def __init__(self, prefix: str, cfg: EncoderConfig, init: Init):
        self.proj = Linear(f"{prefix}.proj", cfg.d_head, cfg.d, init)
        self.ln = LayerNormParams(f"{prefix}.ln", cfg.d, init)


class Router(Module):
    def __init__(self, prefix: str, cfg: EncoderConfig, n_experts: int, init: Init):
        self.proj = Linear(f"{prefix}.proj", cfg.d, n_experts, init)


class MoELayer(Module):
    kind = "moe"

    def __init__(
        self,
        prefix: str,
        cfg: EncoderConfig,
        init: Init,
        n_experts: int | None = None,
        k: int = 1,
        experts: list[ExpertHead] | None = None,
    ):
        n = n_experts if n_experts is not None else cfg.h
        if not 1 <= k <= n:
            raise ValueError(f"k must lie in [1, {n}], got {k}")
        self.prefix = prefix
        self.k = k
        self.experts = experts if experts is not None else [
            ExpertHead(f"{prefix}.expert.{i}", cfg, init) for i in range(n)
        ]
        if len(self.experts) != n:
            raise ValueError(f"expected {n} experts, got {len(self.experts)}")
        self.expander = ExpanderFFN(f"{prefix}.expander", cfg, init)
        self.router = Router(f"{prefix}.router", cfg, n, init)
        self.ln = LayerNormParams(f"{prefix}.ln", cfg.d, init)

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    def forward(self, x: Tensor, mask) -> Tensor:
        return moe_forward(x, self, mask)[0]


class DeterministicLayer(Module):
    """Pruned expert layer: a fixed set of experts, no router."""

    kind = "deterministic"

    def __init__(
        self,
        prefix: str,
        experts: list[ExpertHead],
        expander: ExpanderFFN,
        ln: LayerNormParams,
        retained: list[int],
    ):
        if not experts:
            raise ValueError("a deterministic layer needs at least one expert")
        self.prefix = prefix
        self.experts = list(experts)
        self.expander = expander
        self.ln = ln
        self.retained = list(retained)

    @property
    def m(self) -> int:
        return len(self.experts)

    def forward(self, x: Tensor, mask) -> Tensor:
        return deterministic_forward(x, self, mask)


@dataclass
class RoutingDecision:
    """Per-row expert choice of one MoE layer for one batch."""

    indices: np.ndarray  # (B, k), best first
    logits: Tensor  # (B, N), on the tape when recording


def head_forward(x: Tensor, expert: ExpertHead, mask) -> Tensor:
    q, k, v = expert.q(x), expert.k(x), expert.v(x)
    dh = q.shape[-1]
    scores = nk.mul(nk.matmul(q, nk.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
    if mask is not None:
        scores = nk.add(scores, mask_bias(mask, x.dtype))
    return nk.matmul(nk.softmax_lastdim(scores), v)


def expander_forward(hx: Tensor, exp: ExpanderFFN) -> Tensor:
    return exp.ln(nk.gelu(exp.proj(hx)))


def gate_scores(x: Tensor, router: Router) -> Tensor:
    """Raw router logits (B, N) from the [CLS] row; no softmax."""
    return router.proj(nk.getitem(x, (slice(None), 0)))


def select_top_k(g, k: int) -> np.ndarray:
    """Indices of the k largest scores per row; ties go to the lower index."""
    g = np.asarray(g.data if isinstance(g, Tensor) else g)
    n = g.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    return np.argsort(-g, axis=-1, kind="stable")[..., :k]


def _branch(x: Tensor, expert: ExpertHead, exp: ExpanderFFN, mask) -> Tensor:
    return expander_forward(head_forward(x, expert, mask), exp)


def _combine(outputs: list[Tensor]) -> Tensor:
    if len(outputs) == 1:
        return outputs[0]
    acc = outputs[0]
    for e in outputs[1:]:
        acc = nk.add(acc, e)
    return nk.mul(acc, 1.0 / len(outputs))


def moe_forward(x: Tensor, layer: MoELayer, mask) -> tuple[Tensor, RoutingDecision]:
    """Route each sequence to its top-k experts and combine their branches.

    Rows sharing an expert are run together as a sub-batch, so only the
    selected experts do any work.
    """
    b = x.shape[0]
    if mask is None:
        mask = np.ones(x.shape[:2], dtype=np.int64)
    mask = np.asarray(mask)
    logits = gate_scores(x, layer.router)
    idx = select_top_k(logits, layer.k)
    slots = []
    for s in range(layer.k):
        pieces = []
        for e in np.unique(idx[:, s]):
            rows = np.flatnonzero(idx[:, s] == e)
            xe = nk.take(x, rows) if rows.size != b else x
            out = _branch(xe, layer.experts[e], layer.expander, mask[rows])
            pieces.append((rows, out))
        slots.append(pieces[0][1] if len(pieces) == 1 and pieces[0][0].size == b
                     else nk.assemble_rows(pieces, b))
    y = layer.ln(nk.add(_combine(slots), x))
    return y, RoutingDecision(indices=idx, logits=logits)


def deterministic_forward(x: Tensor, layer: DeterministicLayer, mask) -> Tensor:
    outs = [_branch(x, e, layer.expander, mask) for e in layer.experts]
    return layer.ln(nk.add(_combine(outs), x))


def convert_layer(
    layer: StandardLayer, cfg: EncoderConfig, init: Init, k: int = 1
) -> MoELayer:
    """Build an expert layer whose expert i starts from head i's Q/K/V columns.

    Expander, router and output LayerNorm are fresh; the old output projection
    and FFN are dropped.
    """
    prefix = layer.prefix
    dh = cfg.d_head
    experts = []
    for i in range(cfg.h):
        cols = slice(i * dh, (i + 1) * dh)
        e = ExpertHead.__new__(ExpertHead)
        for part in ("q", "k", "v"):
            src: Linear = getattr(layer, part)
            lin = Linear.__new__(Linear)
            name = f"{prefix}.expert.{i}.{part}"
            if init.skeleton:
                lin.w = init.weight(f"{name}.w", (cfg.d, dh))
                lin.b = init.zeros(f"{name}.b", (dh,))
            else:
                lin.w = Parameter(np.ascontiguousarray(src.w.data[:, cols]), name=f"{name}.w")
                lin.b = Parameter(src.b.data[cols].copy(), name=f"{name}.b")
            setattr(e, part, lin)
        experts.append(e)
    return MoELayer(prefix, cfg, init, n_experts=cfg.h, k=k, experts=experts)
