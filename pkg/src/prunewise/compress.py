"""Build compressed candidates: remove a layer subset, reconnect the stack,
freeze everything except the junction layers (and the embedding when the
first layer goes) plus the decoder, then fine-tune briefly.

A junction layer is the surviving layer immediately before a removal gap; it
is left trainable so its output can adapt to the next surviving layer's
input expectations. When the final layer is removed, the new last layer
feeds the decoder across a gap and is treated the same way.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from itertools import combinations
from math import comb

import numpy as np

from .errors import InputError
from .net import LayerStackModel, TrainConfig, tensor_names, train


@dataclass(frozen=True, order=True)
class CandidateSpec:
    """A removed-layer subset, by original 1-based layer index."""

    removed: tuple[int, ...]

    def __post_init__(self):
        if len(self.removed) == 0:
            raise InputError("a candidate must remove at least one layer")
        if tuple(sorted(set(self.removed))) != self.removed:
            raise InputError("removed layers must be sorted and unique")
        if self.removed[0] < 1:
            raise InputError("layer indices are 1-based")

    def to_json(self) -> str:
        return json.dumps(list(self.removed))

    @staticmethod
    def from_json(text: str) -> "CandidateSpec":
        try:
            values = json.loads(text)
        except json.JSONDecodeError as exc:
            raise InputError(f"bad candidate spec {text!r}") from exc
        if not isinstance(values, list) or not all(isinstance(v, int) for v in values):
            raise InputError(f"bad candidate spec {text!r}")
        return CandidateSpec(removed=tuple(sorted(values)))


@dataclass(frozen=True)
class ReconnectionPlan:
    components: tuple[tuple[int, ...], ...]  # maximal runs of surviving layers
    junctions: tuple[tuple[int, int], ...]  # (predecessor, successor) pairs
    unfrozen_layers: frozenset[int]
    embedding_unfrozen: bool

    @property
    def surviving(self) -> tuple[int, ...]:
        return tuple(i for run in self.components for i in run)


def _validate_spec(spec: CandidateSpec, n_layers: int) -> set[int]:
    removed = set(spec.removed)
    if spec.removed[-1] > n_layers:
        raise InputError(f"layer {spec.removed[-1]} does not exist in a {n_layers}-layer stack")
    if len(removed) >= n_layers:
        raise InputError("cannot remove every layer")
    return removed


def plan_reconnection(spec: CandidateSpec, n_layers: int) -> ReconnectionPlan:
    """Surviving runs, junction pairs, and the unfreeze set for a removal."""
    removed = _validate_spec(spec, n_layers)
    runs: list[list[int]] = []
    for i in range(1, n_layers + 1):
        if i in removed:
            continue
        if runs and runs[-1][-1] == i - 1:
            runs[-1].append(i)
        else:
            runs.append([i])
    junctions = tuple((a[-1], b[0]) for a, b in zip(runs, runs[1:]))
    unfrozen = {pred for pred, _ in junctions}
    if n_layers in removed:
        unfrozen.add(runs[-1][-1])  # last survivor now feeds the decoder over a gap
    return ReconnectionPlan(
        components=tuple(tuple(r) for r in runs),
        junctions=junctions,
        unfrozen_layers=frozenset(unfrozen),
        embedding_unfrozen=1 in removed,
    )


def build_candidate(
    base: LayerStackModel, spec: CandidateSpec, plan: ReconnectionPlan
) -> LayerStackModel:
    """Copy the base without the removed layers; surviving tensors stay
    bit-identical. Only the plan's unfreeze set and the decoder are left
    trainable; the layer-attention vector is re-initialized uniformly over
    the survivors since the base weights no longer line up."""
    n_layers = len(base.active_layers)
    if base.active_layers != tuple(range(1, n_layers + 1)):
        raise InputError("candidates are built from an uncompressed base model")
    if plan != plan_reconnection(spec, n_layers):
        raise InputError("reconnection plan does not match the candidate spec")
    surviving = plan.surviving
    params = {"embedding": base.params["embedding"].copy()}
    freeze = {"embedding": not plan.embedding_unfrozen}
    for i in surviving:
        params[f"layer{i}.weight"] = base.params[f"layer{i}.weight"].copy()
        params[f"layer{i}.bias"] = base.params[f"layer{i}.bias"].copy()
        frozen = i not in plan.unfrozen_layers
        freeze[f"layer{i}.weight"] = frozen
        freeze[f"layer{i}.bias"] = frozen
    params["decoder.attention"] = np.zeros(len(surviving))
    params["decoder.weight"] = base.params["decoder.weight"].copy()
    params["decoder.bias"] = base.params["decoder.bias"].copy()
    for name in ("decoder.attention", "decoder.weight", "decoder.bias"):
        freeze[name] = False
    return LayerStackModel(
        vocab_size=base.vocab_size,
        dim=base.dim,
        n_classes=base.n_classes,
        active_layers=surviving,
        params=params,
        freeze_mask=freeze,
    )


def finetune_candidate(
    candidate: LayerStackModel, labeled_source, config: TrainConfig
) -> LayerStackModel:
    """Brief training of the unfrozen tensors with fresh optimizer state."""
    return train(candidate, labeled_source, config)


def trainable_parameter_count(model: LayerStackModel) -> int:
    return sum(
        model.params[name].size
        for name in tensor_names(model.active_layers)
        if not model.freeze_mask[name]
    )


def sample_candidate_specs(
    n_layers: int, sizes, count_per_size: int, seed: int
) -> list[CandidateSpec]:
    """Distinct random removal subsets per size, reproducible from the seed.

    When a size admits no more than count_per_size subsets, all of them are
    enumerated instead of sampled.
    """
    if count_per_size < 1:
        raise InputError("count_per_size must be >= 1")
    specs: list[CandidateSpec] = []
    for size in sizes:
        if size < 1 or size >= n_layers:
            raise InputError(f"removal size {size} impossible for a {n_layers}-layer stack")
        total = comb(n_layers, size)
        if total <= count_per_size:
            specs.extend(
                CandidateSpec(removed=tuple(c))
                for c in combinations(range(1, n_layers + 1), size)
            )
            continue
        rng = np.random.default_rng([seed, size])
        seen: dict[tuple[int, ...], None] = {}
        while len(seen) < count_per_size:
            pick = tuple(sorted(int(v) + 1 for v in rng.choice(n_layers, size=size, replace=False)))
            seen.setdefault(pick, None)
        specs.extend(CandidateSpec(removed=r) for r in seen)
    return specs
