"""Usage-driven top-m pruning and router removal."""

from __future__ import annotations

import copy
import json
import os

from .encoder import Encoder
from .expert_attention import DeterministicLayer, MoELayer
from .usage import UsageReport, rank_experts


class PruneError(ValueError):
    pass


def select_retained(report: UsageReport, layer: int, m: int) -> list[int]:
    """The m most-used experts of ``layer``, most used first."""
    if layer not in report.layers:
        raise PruneError(f"usage report has no entry for layer {layer}")
    rec = report.layers[layer]
    if not 1 <= m <= rec.n_experts:
        raise PruneError(f"m must lie in [1, {rec.n_experts}], got {m}")
    return [int(i) for i in rank_experts(rec)[:m]]


def prune_layer(layer: MoELayer, retained: list[int]) -> DeterministicLayer:
    """Keep the listed experts, the expander and the output norm; drop the router.

    Parameter objects are reused as-is, so retained weights stay bitwise
    identical.
    """
    if not retained:
        raise PruneError("retained expert list is empty")
    if len(set(retained)) != len(retained):
        raise PruneError(f"duplicate experts in {retained}")
    for i in retained:
        if not 0 <= i < layer.n_experts:
            raise PruneError(f"expert {i} out of range for {layer.n_experts} experts")
    return DeterministicLayer(
        layer.prefix,
        [layer.experts[i] for i in retained],
        layer.expander,
        layer.ln,
        retained,
    )


def prune_model(model: Encoder, report: UsageReport, m: int = 1, inplace: bool = False):
    """Replace every MoE layer by its pruned deterministic layer.

    Returns ``(pruned_model, manifest)`` where the manifest is
    ``{"m": m, "retained": {layer: [indices]}}``.
    """
    out = model if inplace else copy.copy(model)
    if not inplace:
        out.layers = list(model.layers)
    retained_map: dict[str, list[int]] = {}
    for i, layer in enumerate(model.layers):
        if not isinstance(layer, MoELayer):
            continue
        if i not in report.layers:
            raise PruneError(f"usage report does not cover MoE layer {i}")
        keep = select_retained(report, i, m)
        out.layers[i] = prune_layer(layer, keep)
        retained_map[str(i)] = keep
    return out, {"m": m, "retained": retained_map}


def verify_static(model: Encoder) -> bool:
    """True when no layer routes on its input."""
    return not any(isinstance(layer, MoELayer) for layer in model.layers)


def router_parameter_names(model: Encoder) -> list[str]:
    return [p.name for p in model.parameters() if ".router." in p.name]


def save_manifest(manifest: dict, path):
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(manifest, fh, indent=2)
    os.replace(tmp, path)
