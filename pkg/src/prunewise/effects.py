"""Average treatment effect of a layer removal on model predictions.

The effect of removing a component set is estimated by running the base and
the compressed model over the same unlabeled corpus and averaging a
per-example distance between their output distributions. The default
distance is total variation (sum of absolute coordinate differences, range
[0, 2]); KL divergence is available as a variant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .net import LayerStackModel, forward, predict_proba

TOTAL_VARIATION = "total_variation"
KL = "kl"
_KL_EPS = 1e-12


@dataclass(frozen=True)
class AteEstimate:
    value: float
    metric: str
    n_examples: int
    domain_name: str

    def __post_init__(self):
        if self.metric not in (TOTAL_VARIATION, KL):
            raise InputError(f"unknown ATE metric {self.metric!r}")
        if self.value < 0:
            raise InputError("ATE estimates are nonnegative")
        if self.metric == TOTAL_VARIATION and self.value > 2.0 + 1e-12:
            raise InputError("total variation cannot exceed 2")


def tv_distance(p: np.ndarray, q: np.ndarray) -> float:
    """Sum of absolute coordinate differences; symmetric, in [0, 2]."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise InputError(f"dimension mismatch: {p.shape} vs {q.shape}")
    return float(np.abs(p - q).sum())


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p || q) with epsilon smoothing and renormalization of both sides,
    so confident softmax outputs cannot produce infinities."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise InputError(f"dimension mismatch: {p.shape} vs {q.shape}")
    ps = (p + _KL_EPS) / (p.sum() + p.size * _KL_EPS)
    qs = (q + _KL_EPS) / (q.sum() + q.size * _KL_EPS)
    return float(np.sum(ps * np.log(ps / qs)))


_METRICS = {TOTAL_VARIATION: tv_distance, KL: kl_divergence}


def _example_distance(base_out: np.ndarray, cand_out: np.ndarray, metric: str) -> float:
    """Distance for one example; multi-position outputs (P, L) average the
    per-position distances first so every example counts once."""
    fn = _METRICS[metric]
    if base_out.ndim == 1:
        return fn(base_out, cand_out)
    if base_out.shape != cand_out.shape:
        raise InputError("models disagree on prediction positions")
    return float(np.mean([fn(b, c) for b, c in zip(base_out, cand_out)]))


def estimate_ate(
    base: LayerStackModel,
    candidate: LayerStackModel,
    corpus,
    metric: str = TOTAL_VARIATION,
    domain_name: str = "",
) -> AteEstimate:
    """Mean per-example output distance between base and candidate."""
    if metric not in _METRICS:
        raise InputError(f"unknown ATE metric {metric!r}")
    if len(corpus) == 0:
        raise InputError("cannot estimate an effect on an empty corpus")
    if base.n_classes != candidate.n_classes:
        raise InputError("models do not share a label space")
    multi = [ex for ex in corpus if ex.positions != 1]
    if not multi:
        pb = predict_proba(base, corpus)
        pc = predict_proba(candidate, corpus)
        if metric == TOTAL_VARIATION:
            per_example = np.abs(pb - pc).sum(axis=1)
        else:
            per_example = np.array([kl_divergence(b, c) for b, c in zip(pb, pc)])
        value = float(per_example.mean())
    else:
        dists = [
            _example_distance(forward(base, ex), forward(candidate, ex), metric)
            for ex in corpus
        ]
        value = float(np.mean(dists))
    return AteEstimate(value=value, metric=metric, n_examples=len(corpus), domain_name=domain_name)
