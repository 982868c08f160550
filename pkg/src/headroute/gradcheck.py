"""Finite-difference checks of every tape op and of a full routed loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkit as nk
from .encoder import Encoder, EncoderConfig, classify
from .expert_attention import convert_layer
from .numkit import Parameter, grad_check
from .training import balance_loss, router_probs

OP_TOL = 1e-6
E2E_TOL = 1e-4
STEP = 1e-5
ZERO_TOL = 1e-8


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.error <= self.tol


# At the 0.02 training init the attention is almost uniform and many query/key
# gradients sit near 1e-9, below what central differences can resolve
# against a 1e-8 floor. A wider init keeps every checked gradient well above
# the round-off level.
TOY_INIT_STD = 0.3


def toy_config() -> EncoderConfig:
    return EncoderConfig(d=16, h=4, n_layers=2, d_ff=32, vocab_size=24, max_len=6,
                         n_classes=3, dtype="float64", seed=0, init_std=TOY_INIT_STD)


def _is_key_bias(name: str) -> bool:
    # softmax over keys is shift invariant, so the key bias gradient is exactly 0
    return name.endswith(".k.b")


def _op_cases(rng: np.random.Generator):
    def P(*shape, lo=None):
        a = rng.standard_normal(shape)
        if lo is not None:
            a = np.abs(a) + lo
        return Parameter(a, name="x")

    def wsum(t, w):
        # random weighting so that shift-invariant ops still get a signal
        return nk.sum(nk.mul(t, w))

    W34 = rng.standard_normal((3, 4))
    a, b = P(3, 4), P(3, 4)
    yield "add", lambda: wsum(nk.add(a, b), W34), [a, b]
    yield "sub", lambda: wsum(nk.sub(a, b), W34), [a, b]
    yield "mul", lambda: wsum(nk.mul(a, b), W34), [a, b]
    bb = P(4)
    yield "add_broadcast", lambda: wsum(nk.add(a, bb), W34), [a, bb]
    pos = P(3, 4, lo=0.5)
    yield "div", lambda: wsum(nk.div(a, pos), W34), [a, pos]
    yield "log", lambda: wsum(nk.log(pos), W34), [pos]
    yield "exp", lambda: wsum(nk.exp(a), W34), [a]
    yield "tanh", lambda: wsum(nk.tanh(a), W34), [a]
    yield "gelu", lambda: wsum(nk.gelu(a), W34), [a]
    m1, m2 = P(2, 3, 4), P(4, 5)
    W235 = rng.standard_normal((2, 3, 5))
    yield "matmul", lambda: wsum(nk.matmul(m1, m2), W235), [m1, m2]
    m3 = P(2, 4, 5)
    yield "matmul_batched", lambda: wsum(nk.matmul(m1, m3), W235), [m1, m3]
    lb = P(5)
    yield "linear", lambda: wsum(nk.linear(m1, m2, lb), W235), [m1, m2, lb]
    W43 = rng.standard_normal((4, 3))
    yield "transpose", lambda: wsum(nk.transpose(a, (1, 0)), W43), [a]
    W26 = rng.standard_normal((2, 6))
    yield "reshape", lambda: wsum(nk.reshape(a, (2, 6)), W26), [a]
    W4 = rng.standard_normal(4)
    yield "getitem", lambda: wsum(nk.getitem(a, 1), W4), [a]
    tbl = P(5, 4)
    idx = np.array([[0, 3], [3, 1]])
    W224 = rng.standard_normal((2, 2, 4))
    yield "take", lambda: wsum(nk.take(tbl, idx), W224), [tbl]
    r0, r1 = P(1, 4), P(2, 4)
    yield "assemble_rows", lambda: wsum(
        nk.assemble_rows([(np.array([1]), r0), (np.array([0, 2]), r1)], 3), W34), [r0, r1]
    W64 = rng.standard_normal((6, 4))
    yield "concat", lambda: wsum(nk.concat([a, b], axis=0), W64), [a, b]
    yield "sum_axis", lambda: wsum(nk.sum(a, axis=0), W4), [a]
    W3 = rng.standard_normal(3)
    yield "mean_axis", lambda: wsum(nk.mean(a, axis=1), W3), [a]
    yield "softmax", lambda: wsum(nk.softmax_lastdim(a), W34), [a]
    g, be = P(4), P(4)
    yield "layer_norm", lambda: wsum(nk.layer_norm(a, g, be), W34), [a, g, be]
    labels = np.array([0, 3, 1])
    yield "cross_entropy", lambda: nk.cross_entropy(a, labels), [a]
    probs = Parameter(np.abs(rng.standard_normal(4)) + 0.1, name="p")
    yield "balance_kl", lambda: balance_loss([probs]), [probs]


def check_ops(seed: int = 0, h: float = STEP) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    return [CheckResult(name, float(grad_check(f, params, h=h)), OP_TOL)
            for name, f, params in _op_cases(rng)]


def toy_routed_model(seed: int = 0) -> Encoder:
    """Two layers: layer 0 standard, layer 1 an expert layer with k=1."""
    cfg = toy_config()
    cfg.seed = seed
    model = Encoder(cfg)
    model.layers[1] = convert_layer(model.layers[1], cfg, model.init, k=1)
    return model


def check_end_to_end(seed: int = 0, lam: float = 0.1,
                     h: float = STEP) -> tuple[CheckResult, CheckResult]:
    """Relative check of the full routed loss, plus an absolute check on key biases."""
    model = toy_routed_model(seed)
    cfg = model.config
    rng = np.random.default_rng([seed, 7])
    B, L = 2, cfg.max_len
    ids = rng.integers(3, cfg.vocab_size, size=(B, L))
    ids[:, 0] = 1
    mask = np.ones((B, L), dtype=np.int64)
    mask[1, 4:] = 0
    labels = np.array([0, 2])

    def loss():
        aux: dict = {}
        logits = classify(ids, mask, model, aux=aux)
        bal = balance_loss([router_probs(d.logits) for d in aux["routing"].values()])
        return nk.add(nk.cross_entropy(logits, labels), nk.mul(bal, lam))

    params = [p for p in model.parameters() if not _is_key_bias(p.name)]
    return CheckResult("end_to_end", float(grad_check(loss, params, h=h)), E2E_TOL), \
        _check_zero_grads(loss, [p for p in model.parameters() if _is_key_bias(p.name)], h)


def _check_zero_grads(loss, params, h: float) -> CheckResult:
    """Absolute check for parameters whose true gradient is identically zero."""
    worst = 0.0
    for p in params:
        p.zero_grad()
    with nk.Tape() as tape:
        out = loss()
    tape.backward(out)
    for p in params:
        worst = max(worst, float(np.abs(p.grad).max()))
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = loss().item()
            flat[i] = orig - h
            fm = loss().item()
            flat[i] = orig
            worst = max(worst, abs(fp - fm) / (2.0 * h))
    return CheckResult("key_bias_zero", worst, ZERO_TOL)


def run_all(seed: int = 0) -> list[CheckResult]:
    return check_ops(seed) + list(check_end_to_end(seed))
