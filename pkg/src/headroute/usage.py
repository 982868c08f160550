"""Per-layer expert selection counts, the signal that drives pruning."""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np


class UsageError(ValueError):
    pass


@dataclass
class UsageRecord:
    layer: int
    counts: np.ndarray
    total: int = 0

    @classmethod
    def empty(cls, layer: int, n_experts: int) -> "UsageRecord":
        return cls(layer, np.zeros(n_experts, dtype=np.int64), 0)

    @property
    def n_experts(self) -> int:
        return len(self.counts)


@dataclass
class UsageReport:
    k: int = 1
    dataset: str = ""
    layers: dict[int, UsageRecord] = field(default_factory=dict)
    timestamp: str = field(
        default_factory=lambda: datetime.now(timezone.utc).isoformat(timespec="seconds")
    )

    @classmethod
    def for_model(cls, model, dataset: str = "", k: int | None = None) -> "UsageReport":
        """An empty report covering every MoE layer of ``model``."""
        report = cls(k=1, dataset=dataset)
        ks = set()
        for i in model.moe_layer_indices():
            layer = model.layers[i]
            report.layers[i] = UsageRecord.empty(i, layer.n_experts)
            ks.add(layer.k)
        if k is not None:
            report.k = k
        elif len(ks) == 1:
            report.k = ks.pop()
        return report

    def merge(self, other: "UsageReport") -> "UsageReport":
        if other.k != self.k:
            raise UsageError(f"cannot merge reports with k={self.k} and k={other.k}")
        out = UsageReport(k=self.k, dataset=self.dataset)
        for i in sorted(set(self.layers) | set(other.layers)):
            a, b = self.layers.get(i), other.layers.get(i)
            if a is None or b is None:
                src = a or b
                out.layers[i] = UsageRecord(i, src.counts.copy(), src.total)
            else:
                out.layers[i] = UsageRecord(i, a.counts + b.counts, a.total + b.total)
        return out

    def to_dict(self) -> dict:
        return {
            "k": int(self.k),
            "dataset": self.dataset,
            "timestamp": self.timestamp,
            "layers": [
                {"layer": int(i), "counts": [int(c) for c in r.counts], "total": int(r.total)}
                for i, r in sorted(self.layers.items())
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "UsageReport":
        try:
            report = cls(k=int(d["k"]), dataset=str(d.get("dataset", "")))
            if "timestamp" in d:
                report.timestamp = d["timestamp"]
            for entry in d["layers"]:
                i = int(entry["layer"])
                rec = UsageRecord(i, np.asarray(entry["counts"], dtype=np.int64), int(entry["total"]))
                if rec.counts.sum() != rec.total * report.k:
                    raise UsageError(
                        f"layer {i}: counts sum {rec.counts.sum()} != total*k {rec.total * report.k}"
                    )
                report.layers[i] = rec
        except (KeyError, TypeError) as e:
            raise UsageError(f"malformed usage document: {e}") from None
        return report

    def save(self, path):
        path = Path(path)
        fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name, suffix=".tmp")
        try:
            with os.fdopen(fd, "w") as fh:
                json.dump(self.to_dict(), fh, indent=2)
            os.replace(tmp, path)
        finally:
            if os.path.exists(tmp):
                os.unlink(tmp)

    @classmethod
    def load(cls, path) -> "UsageReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def record(report: UsageReport, layer: int, selected) -> None:
    """Tally one routing decision (or a (B, k) block of them) for ``layer``."""
    sel = np.atleast_2d(np.asarray(selected, dtype=np.int64))
    rec = report.layers[layer]
    if sel.size and (sel.min() < 0 or sel.max() >= rec.n_experts):
        raise UsageError(f"expert index out of range for layer {layer}")
    np.add.at(rec.counts, sel.reshape(-1), 1)
    rec.total += sel.shape[0]


def frequencies(rec: UsageRecord) -> np.ndarray:
    """counts / (total * k); k is implied by the counts-sum invariant."""
    if rec.total <= 0:
        raise UsageError(f"layer {rec.layer}: no routed sequences, frequencies undefined")
    return rec.counts / float(rec.counts.sum())


def rank_experts(rec: UsageRecord) -> np.ndarray:
    """Expert indices by descending frequency; equal usage keeps the lower index first."""
    return np.argsort(-frequencies(rec), kind="stable")


def usage_entropy(rec: UsageRecord) -> float:
    f = frequencies(rec)
    nz = f[f > 0]
    return float(-(nz * np.log(nz)).sum()) if nz.size else 0.0


def max_frequency(rec: UsageRecord) -> float:
    return float(frequencies(rec).max())


def collect(model, dataset, batch_size: int = 256, name: str | None = None) -> UsageReport:
    """One inference pass over ``dataset``; tallies every MoE layer's choices."""
    from .encoder import classify

    report = UsageReport.for_model(model, dataset=name or getattr(dataset, "name", ""))
    for start in range(0, len(dataset), batch_size):
        sl = slice(start, start + batch_size)
        aux: dict = {}
        classify(dataset.ids[sl], dataset.mask[sl], model, aux=aux)
        for i, dec in aux.get("routing", {}).items():
            record(report, i, dec.indices)
    return report


def summary(report: UsageReport) -> dict[int, dict]:
    return {
        i: {
            "frequencies": [round(float(x), 6) for x in frequencies(r)],
            "entropy": usage_entropy(r),
            "max_frequency": max_frequency(r),
            "uniform_entropy": math.log(r.n_experts),
        }
        for i, r in sorted(report.layers.items())
        if r.total > 0
    }
