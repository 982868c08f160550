"""Progressive conversion and two-stage training.

Epoch e (1-based) of a run with target Z first converts one more standard
layer (deepest first) while fewer than Z are converted. Every epoch that
performs a conversion is a Stage-1 epoch and adds ``lam * balance_loss``;
after the last conversion epoch the balance term is switched off and
training continues on the task loss alone.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Iterable

import numpy as np

from . import numkit as nk
from .data import Dataset, batches
from .encoder import Encoder, classify
from .expert_attention import convert_layer
from .numkit import Parameter, Tape, Tensor
from .usage import collect, frequencies

log = logging.getLogger(__name__)

BALANCE_EPS = 1e-7


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    lr: float = 2e-5
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    warmup_ratio: float = 0.10
    batch_size: int = 64
    epochs: int = 3
    target_modified_layers: int = 1
    lam: float = 0.1
    epsilon: float = BALANCE_EPS
    k: int = 1
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not 0 < self.warmup_ratio < 1:
            raise ValueError("warmup_ratio must lie in (0, 1)")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if self.target_modified_layers < 0:
            raise ValueError("target_modified_layers must be >= 0")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")

    def validate_for(self, n_layers: int, n_experts: int):
        if self.target_modified_layers > n_layers:
            raise ValueError(
                f"target_modified_layers={self.target_modified_layers} exceeds n_layers={n_layers}"
            )
        if self.k > n_experts:
            raise ValueError(f"k={self.k} exceeds the expert count {n_experts}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ScheduleState:
    target: int
    current_modified_layers: int = 0
    epoch: int = 0
    global_step: int = 0
    balance_active: bool = True

    def __post_init__(self):
        self.balance_active = self.current_modified_layers < self.target


# ------------------------------------------------------------------- losses


def router_probs(logits: Tensor) -> Tensor:
    """Batch mean of softmax(router logits): the p fed to the balance loss."""
    return nk.mean(nk.softmax_lastdim(logits), axis=0)


def _kl(log_input: Tensor, target: Tensor) -> Tensor:
    # sum target * (log target - log_input)
    return nk.sum(nk.mul(target, nk.sub(nk.log(target), log_input)))


def balance_loss(probs_per_layer: Iterable, eps: float = BALANCE_EPS) -> Tensor:
    """Symmetrised KL between each layer's mean routing p and uniform, layer-averaged."""
    terms = []
    for p in probs_per_layer:
        p = p if isinstance(p, Tensor) else Tensor(np.asarray(p, dtype=np.float64))
        if np.any(p.data < 0):
            raise ValueError("routing probabilities must be non-negative")
        n = p.shape[-1]
        u_eps = Tensor(np.full(n, 1.0 / n + eps, dtype=p.dtype))
        p_eps = nk.add(p, eps)
        fwd = _kl(nk.log(p_eps), u_eps)
        rev = _kl(nk.log(u_eps), p_eps)
        terms.append(nk.mul(nk.add(fwd, rev), 0.5))
    if not terms:
        return Tensor(np.zeros(()))
    total = terms[0]
    for t in terms[1:]:
        total = nk.add(total, t)
    return nk.mul(total, 1.0 / len(terms))


def total_loss(task_loss, balance, active, lam: float):
    """task + lam * balance while the balance term is active, else task alone.

    ``active`` is a bool or a :class:`ScheduleState`.
    """
    if isinstance(active, ScheduleState):
        active = active.balance_active
    if not active or lam == 0 or balance is None:
        return task_loss
    if isinstance(task_loss, Tensor) or isinstance(balance, Tensor):
        return nk.add(task_loss, nk.mul(balance, lam))
    return task_loss + lam * balance


# ---------------------------------------------------------------- optimizer


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup over ceil(ratio * total) steps, then cosine decay to 0."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warm = max(1, math.ceil(cfg.warmup_ratio * total_steps))
    if step <= warm:
        return cfg.lr * step / warm
    progress = (step - warm) / max(1, total_steps - warm)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    moments: dict = field(default_factory=dict)  # name -> [m, v, t]


def adamw_step(params: Iterable[Parameter], opt: OptimizerState, lr: float) -> None:
    """Decoupled-decay AdamW with bias correction, in place.

    Bias correction uses a per-parameter step count so layers converted
    mid-run start their moments from scratch.
    """
    opt.step += 1
    b1, b2 = opt.beta1, opt.beta2
    for p in params:
        st = opt.moments.get(p.name)
        if st is None or st[0].shape != p.shape:
            st = opt.moments[p.name] = [np.zeros_like(p.data), np.zeros_like(p.data), 0]
        m, v = st[0], st[1]
        st[2] += 1
        t = st[2]
        g = p.grad
        if opt.weight_decay:
            p.data *= 1.0 - lr * opt.weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        mhat = m / (1.0 - b1**t)
        vhat = v / (1.0 - b2**t)
        p.data -= (lr * mhat / (np.sqrt(vhat) + opt.eps)).astype(p.dtype, copy=False)


def clip_gradients(params: Iterable[Parameter], max_norm: float = 1.0) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    params = list(params)
    norm = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params))
    if norm <= max_norm or norm == 0.0:
        return 1.0
    scale = max_norm / norm
    for p in params:
        p.grad *= scale
    return scale


# ----------------------------------------------------------------- schedule


def convert_next_layer(model: Encoder, schedule: ScheduleState, k: int = 1) -> Encoder:
    """Convert the deepest remaining standard layer into an expert layer."""
    if schedule.current_modified_layers >= schedule.target:
        log.warning("all %d target layers already converted", schedule.target)
        return model
    for i in range(len(model.layers) - 1, -1, -1):
        if model.layers[i].kind == "standard":
            model.layers[i] = convert_layer(model.layers[i], model.config, model.init, k=k)
            break
    else:
        log.warning("no standard layer left to convert")
        return model
    schedule.current_modified_layers += 1
    schedule.balance_active = schedule.current_modified_layers < schedule.target
    return model


# -------------------------------------------------------------------- train


@dataclass
class TrainResult:
    model: Encoder
    records: list = field(default_factory=list)
    epochs: list = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.records[-1]["total_loss"] if self.records else float("nan")


def evaluate(model: Encoder, dataset: Dataset, batch_size: int = 256) -> float:
    if len(dataset) == 0:
        return float("nan")
    correct = 0
    for start in range(0, len(dataset), batch_size):
        sl = slice(start, start + batch_size)
        logits = classify(dataset.ids[sl], dataset.mask[sl], model)
        correct += int((logits.data.argmax(axis=-1) == dataset.labels[sl]).sum())
    return correct / len(dataset)


def train(
    model: Encoder,
    dataset: Dataset,
    cfg: TrainConfig,
    valid: Dataset | None = None,
    log_file=None,
) -> TrainResult:
    """Run the progressive two-stage schedule. Deterministic given the seeds.

    Per-epoch summaries carry the expert usage measured on ``valid`` (or the
    training set) right after that epoch.
    """
    cfg.validate_for(len(model.layers), model.config.h)
    if len(dataset) and int(dataset.labels.max()) >= model.config.n_classes:
        raise ValueError("dataset labels exceed n_classes")
    schedule = ScheduleState(target=cfg.target_modified_layers)
    opt = OptimizerState(cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
    n_batches = math.ceil(len(dataset) / cfg.batch_size)
    total_steps = n_batches * cfg.epochs
    result = TrainResult(model)

    for epoch in range(1, cfg.epochs + 1):
        schedule.epoch = epoch
        stage1 = schedule.current_modified_layers < schedule.target
        if stage1:
            convert_next_layer(model, schedule, k=cfg.k)
        params = model.parameters()
        for ids, mask, labels in batches(dataset, cfg.batch_size, cfg.seed, epoch):
            schedule.global_step += 1
            step = schedule.global_step
            for p in params:
                p.zero_grad()
            with Tape() as tape:
                aux: dict = {}
                logits = classify(ids, mask, model, aux=aux)
                task = nk.cross_entropy(logits, labels)
                routing = aux.get("routing", {})
                bal = None
                if routing and stage1:
                    bal = balance_loss(
                        [router_probs(d.logits) for d in routing.values()], cfg.epsilon
                    )
                loss = total_loss(task, bal, stage1, cfg.lam)
            if not np.isfinite(loss.data).all():
                raise NonFiniteLoss(f"non-finite loss at step {step} (epoch {epoch})")
            tape.backward(loss)
            clip_gradients(params, cfg.clip_norm)
            lr = lr_at(step, total_steps, cfg)
            adamw_step(params, opt, lr)
            rec = {
                "step": step,
                "epoch": epoch,
                "lr": lr,
                "task_loss": float(task.item()),
                "balance_loss": float(bal.item()) if bal is not None else 0.0,
                "total_loss": float(loss.item()),
            }
            result.records.append(rec)
            if log_file is not None:
                log_file.write(json.dumps(rec) + "\n")
        summary = {"epoch": epoch, "stage": 1 if stage1 else 2,
                   "modified_layers": schedule.current_modified_layers}
        if model.moe_layer_indices():
            report = collect(model, valid if valid is not None else dataset)
            summary["usage"] = {
                str(i): [float(x) for x in frequencies(r)] for i, r in report.layers.items()
            }
        if valid is not None:
            summary["valid_accuracy"] = evaluate(model, valid)
        result.epochs.append(summary)
        log.info("epoch %d: %s", epoch, summary)
    return result

