"""Post-hoc analyses over persisted candidate records: how often each layer
survives in the oracle-best candidates, how much removing each layer costs
according to a per-pair indicator regression, and the rank agreement
between the two views.

Indicator coding is 1 = removed, so a negative coefficient means removing
that layer hurts target performance.
"""

from __future__ import annotations

import csv
import warnings
from collections import defaultdict

import numpy as np

from .errors import InputError, SingularityError
from .regression import DesignMatrix, ols_fit

IMPORTANCE_TERM = "removed_layer_{i}"


def layer_frequency(best_specs, n_layers: int) -> np.ndarray:
    """frequency[i-1] = fraction of best candidates that RETAIN layer i."""
    best_specs = list(best_specs)
    if not best_specs:
        raise InputError("no specs to analyze")
    counts = np.zeros(n_layers)
    for spec in best_specs:
        if spec.removed[-1] > n_layers:
            raise InputError(f"spec {spec.removed} exceeds {n_layers} layers")
        for i in range(1, n_layers + 1):
            if i not in spec.removed:
                counts[i - 1] += 1
    return counts / len(best_specs)


def layer_importance_regression(records, n_layers: int) -> dict[int, float]:
    """Per-layer removal coefficients, averaged across domain pairs.

    For each pair, target F1 is regressed on an intercept plus one removal
    indicator per layer (1 = removed). Layers that are always or never
    removed within a pair are collinear there and get dropped with a
    warning; the returned average covers the pairs where a layer was
    estimable.
    """
    by_pair: dict[str, list] = defaultdict(list)
    for rec in records:
        if rec.target_f1 is None:
            raise InputError("layer importance needs records with target F1")
        by_pair[rec.pair_id].append(rec)
    if not by_pair:
        raise InputError("no records to analyze")

    sums: dict[int, float] = defaultdict(float)
    counts: dict[int, int] = defaultdict(int)
    for pair_id, recs in sorted(by_pair.items()):
        indicators = np.zeros((len(recs), n_layers))
        y = np.zeros(len(recs))
        for r, rec in enumerate(recs):
            y[r] = rec.target_f1
            for i in rec.spec.removed:
                if i > n_layers:
                    raise InputError(f"spec {rec.spec.removed} exceeds {n_layers} layers")
                indicators[r, i - 1] = 1.0
        keep = []
        for i in range(n_layers):
            col = indicators[:, i]
            if col.min() == col.max():
                warnings.warn(
                    f"{pair_id}: layer {i + 1} is {'always' if col.min() else 'never'} "
                    "removed; dropping its indicator"
                )
            else:
                keep.append(i)
        if not keep:
            continue
        design = DesignMatrix(
            terms=[IMPORTANCE_TERM.format(i=i + 1) for i in keep],
            X=indicators[:, keep],
            y=y,
        )
        try:
            fit = ols_fit(design)
        except SingularityError as exc:
            # happens e.g. when all records share one removal size, making
            # the indicators sum to a constant
            warnings.warn(f"{pair_id}: indicator design not estimable ({exc}); skipping pair")
            continue
        for pos, i in enumerate(keep):
            sums[i + 1] += float(fit.beta[pos + 1])
            counts[i + 1] += 1
    if not counts:
        raise InputError("no pair had an estimable layer-indicator design")
    return {layer: sums[layer] / counts[layer] for layer in sorted(counts)}


def _average_ranks(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(rank_a, rank_b) -> float:
    """Spearman rank correlation with average ranks for ties."""
    a = np.asarray(rank_a, dtype=np.float64)
    b = np.asarray(rank_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise InputError("inputs must be equal-length vectors")
    if a.size < 2:
        raise InputError("need at least two observations")
    ra = _average_ranks(a)
    rb = _average_ranks(b)
    ra -= ra.mean()
    rb -= rb.mean()
    denom = float(np.sqrt((ra @ ra) * (rb @ rb)))
    if denom == 0.0:
        raise InputError("rank correlation undefined for constant input")
    return float((ra @ rb) / denom)


def write_layer_frequency_long(path, frequency_by_size: dict[int, np.ndarray]) -> None:
    """Plot-ready long format: one (layer, removal size, frequency) row."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "removal_size", "frequency"])
        for size in sorted(frequency_by_size):
            freqs = frequency_by_size[size]
            for i, f in enumerate(freqs, start=1):
                writer.writerow([i, size, repr(float(f))])
