"""Baseline BERT-style encoder: embeddings, standard attention layers, classifier."""

from __future__ import annotations

import math
import zlib
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import numkit as nk
from .numkit import Parameter, Tensor

INIT_STD = 0.02


@dataclass
class EncoderConfig:
    d: int = 64
    h: int = 4
    n_layers: int = 2
    d_ff: int = 256
    vocab_size: int = 128
    max_len: int = 32
    n_classes: int = 2
    seed: int = 0
    pooler: bool = False
    dtype: str = "float32"
    init_std: float = INIT_STD

    def __post_init__(self):
        for name in ("d", "h", "n_layers", "d_ff", "vocab_size", "max_len", "n_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d % self.h:
            raise ValueError(f"d={self.d} is not divisible by h={self.h}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def d_head(self) -> int:
        return self.d // self.h

    @classmethod
    def bert_base(cls, **overrides) -> "EncoderConfig":
        base = dict(
            d=768, h=12, n_layers=12, d_ff=3072, vocab_size=30522, max_len=512,
            n_classes=2, pooler=True,
        )
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown encoder config keys: {sorted(unknown)}")
        return cls(**d)


class Init:
    """Parameter factory. ``skeleton=True`` builds zero-cost read-only views.

    Skeleton models have the right shapes for counting but no real storage,
    so a full bert-base stack can be enumerated in milliseconds.
    """

    def __init__(self, cfg: EncoderConfig, skeleton: bool = False):
        self.cfg = cfg
        self.skeleton = skeleton
        self.dtype = np.dtype(cfg.dtype)

    def _rng(self, name: str) -> np.random.Generator:
        return np.random.default_rng([self.cfg.seed, zlib.crc32(name.encode())])

    def _make(self, name, data) -> Parameter:
        if self.skeleton:
            p = Parameter.__new__(Parameter)
            p.data = data
            p.grad = data
            p.name = name
            return p
        return Parameter(data, name=name)

    def weight(self, name: str, shape) -> Parameter:
        if self.skeleton:
            return self._make(name, np.broadcast_to(np.zeros((), self.dtype), shape))
        rng = self._rng(name)
        w = rng.standard_normal(shape)
        bad = np.abs(w) > 2.0
        while bad.any():
            w[bad] = rng.standard_normal(int(bad.sum()))
            bad = np.abs(w) > 2.0
        return self._make(name, (w * self.cfg.init_std).astype(self.dtype))

    def const(self, name: str, shape, value: float) -> Parameter:
        if self.skeleton:
            return self._make(name, np.broadcast_to(np.full((), value, self.dtype), shape))
        return self._make(name, np.full(shape, value, dtype=self.dtype))

    def zeros(self, name, shape):
        return self.const(name, shape, 0.0)

    def ones(self, name, shape):
        return self.const(name, shape, 1.0)


class Module:
    """Holds named parameters and child modules in insertion order."""

    def parameters(self) -> list[Parameter]:
        out = []
        for v in self.__dict__.values():
            if isinstance(v, Parameter):
                out.append(v)
            elif isinstance(v, Module):
                out.extend(v.parameters())
            elif isinstance(v, list):
                for item in v:
                    if isinstance(item, Module):
                        out.extend(item.parameters())
        return out

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))


class LayerNormParams(Module):
    def __init__(self, prefix: str, d: int, init: Init):
        self.gamma = init.ones(f"{prefix}.gamma", (d,))
        self.beta = init.zeros(f"{prefix}.beta", (d,))

    def __call__(self, x: Tensor) -> Tensor:
        return nk.layer_norm(x, self.gamma, self.beta)


class Linear(Module):
    def __init__(self, prefix: str, d_in: int, d_out: int, init: Init):
        self.w = init.weight(f"{prefix}.w", (d_in, d_out))
        self.b = init.zeros(f"{prefix}.b", (d_out,))

    def __call__(self, x: Tensor) -> Tensor:
        return nk.linear(x, self.w, self.b)


class Embedding(Module):
    def __init__(self, cfg: EncoderConfig, init: Init):
        self.token = init.weight("embedding.token", (cfg.vocab_size, cfg.d))
        self.position = init.weight("embedding.position", (cfg.max_len, cfg.d))
        self.ln = LayerNormParams("embedding.ln", cfg.d, init)


class StandardLayer(Module):
    kind = "standard"

    def __init__(self, prefix: str, cfg: EncoderConfig, init: Init):
        self.prefix = prefix
        self.h = cfg.h
        self.q = Linear(f"{prefix}.attn.q", cfg.d, cfg.d, init)
        self.k = Linear(f"{prefix}.attn.k", cfg.d, cfg.d, init)
        self.v = Linear(f"{prefix}.attn.v", cfg.d, cfg.d, init)
        self.o = Linear(f"{prefix}.attn.o", cfg.d, cfg.d, init)
        self.ln_attn = LayerNormParams(f"{prefix}.attn.ln", cfg.d, init)
        self.ffn_in = Linear(f"{prefix}.ffn.in", cfg.d, cfg.d_ff, init)
        self.ffn_out = Linear(f"{prefix}.ffn.out", cfg.d_ff, cfg.d, init)
        self.ln_ffn = LayerNormParams(f"{prefix}.ffn.ln", cfg.d, init)

    def forward(self, x: Tensor, mask) -> Tensor:
        return standard_layer_forward(x, self, mask)


def mask_bias(mask, dtype) -> np.ndarray:
    """(B, L) 0/1 mask -> (B, 1, L) additive bias on key positions."""
    m = np.asarray(mask)
    return ((1 - m)[:, None, :] * nk.MASK_NEG).astype(dtype)


def _split_heads(x: Tensor, h: int) -> Tensor:
    b, l, d = x.shape
    return nk.transpose(nk.reshape(x, (b, l, h, d // h)), (0, 2, 1, 3))


def mha_forward(x: Tensor, layer: StandardLayer, mask) -> Tensor:
    """Joint h-head attention, output projection, then LayerNorm(attn + x)."""
    b, l, d = x.shape
    h = layer.h
    q = _split_heads(layer.q(x), h)
    k = _split_heads(layer.k(x), h)
    v = _split_heads(layer.v(x), h)
    scores = nk.mul(nk.matmul(q, nk.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d // h))
    if mask is not None:
        scores = nk.add(scores, mask_bias(mask, x.dtype)[:, None, :, :])
    ctx = nk.matmul(nk.softmax_lastdim(scores), v)
    ctx = nk.reshape(nk.transpose(ctx, (0, 2, 1, 3)), (b, l, d))
    return layer.ln_attn(nk.add(layer.o(ctx), x))


def standard_layer_forward(x: Tensor, layer: StandardLayer, mask) -> Tensor:
    a = mha_forward(x, layer, mask)
    f = layer.ffn_out(nk.gelu(layer.ffn_in(a)))
    return layer.ln_ffn(nk.add(f, a))


class Encoder(Module):
    """Embeddings, a stack of interchangeable layers, optional pooler, classifier."""

    def __init__(self, cfg: EncoderConfig, skeleton: bool = False):
        self.config = cfg
        init = Init(cfg, skeleton=skeleton)
        self.init = init
        self.embedding = Embedding(cfg, init)
        self.layers: list[Module] = [
            StandardLayer(f"layer.{i}", cfg, init) for i in range(cfg.n_layers)
        ]
        self.pooler = Linear("pooler", cfg.d, cfg.d, init) if cfg.pooler else None
        self.classifier = Linear("classifier", cfg.d, cfg.n_classes, init)

    def parameters(self) -> list[Parameter]:
        out = self.embedding.parameters()
        for layer in self.layers:
            out.extend(layer.parameters())
        if self.pooler is not None:
            out.extend(self.pooler.parameters())
        out.extend(self.classifier.parameters())
        return out

    def layer_kinds(self) -> list[str]:
        return [layer.kind for layer in self.layers]

    def moe_layer_indices(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if layer.kind == "moe"]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def __call__(self, token_ids, mask=None, aux=None) -> Tensor:
        return classify(token_ids, mask, self, aux=aux)


def embed(token_ids, model: Encoder) -> Tensor:
    ids = np.asarray(token_ids, dtype=np.int64)
    cfg = model.config
    if ids.ndim != 2:
        raise ValueError(f"token_ids must be (B, L), got shape {ids.shape}")
    if ids.shape[1] > cfg.max_len:
        raise ValueError(f"sequence length {ids.shape[1]} exceeds max_len {cfg.max_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise IndexError(f"token id out of range [0, {cfg.vocab_size})")
    emb = model.embedding
    tok = nk.take(emb.token, ids)
    pos = nk.getitem(emb.position, slice(0, ids.shape[1]))
    return emb.ln(nk.add(tok, pos))


def encode(token_ids, mask, model: Encoder, aux: dict | None = None) -> Tensor:
    """Run embeddings and every layer. MoE routing info is written to ``aux``.

    ``aux["routing"][i]`` holds the :class:`RoutingDecision` of MoE layer i.
    """
    from .expert_attention import MoELayer, moe_forward

    if mask is None:
        mask = np.ones(np.shape(token_ids), dtype=np.int64)
    x = embed(token_ids, model)
    for i, layer in enumerate(model.layers):
        if isinstance(layer, MoELayer):
            x, decision = moe_forward(x, layer, mask)
            if aux is not None:
                aux.setdefault("routing", {})[i] = decision
        else:
            x = layer.forward(x, mask)
    return x


def classify(token_ids, mask, model: Encoder, aux: dict | None = None) -> Tensor:
    """Logits (B, n_classes) from the final hidden state at position 0 ([CLS])."""
    hidden = encode(token_ids, mask, model, aux=aux)
    cls = nk.getitem(hidden, (slice(None), 0))
    if model.pooler is not None:
        cls = nk.tanh(model.pooler(cls))
    return model.classifier(cls)

