"""Regression covariates for each compressed candidate.

Besides the treatment effects, a candidate is described by its held-out
source F1, the proximity of the domains as seen by a source-vs-target
classifier (mean probability that target examples look like source), binary
removal-size indicators (the smallest size in a run is the omitted
baseline), and two interaction terms. Records are persisted as CSV with a
fixed column order.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .compress import CandidateSpec
from .data import DomainDataset
from .effects import TOTAL_VARIATION, AteEstimate
from .errors import DataFormatError, InputError
from .net import (
    Example,
    LayerStackModel,
    TrainConfig,
    evaluate_macro_f1,
    predict_proba,
    train,
)

SOURCE_CLASS = 1  # domain classifier convention: source=1, target=0

# regression term names, in report order
TERM_F1_SOURCE = "f1_s"
TERM_ATE_TARGET = "ate_t"
TERM_ATE_SOURCE = "ate_s"
TERM_P_S_T = "p_s_t"
TERM_ATE_T_X_P = "ate_t_x_p_s_t"
TERM_F1_S_X_P = "f1_s_x_p_s_t"


def size_indicator_names(sizes_in_run) -> list[str]:
    """Indicator columns for every removal size except the smallest."""
    sizes = sorted(set(int(s) for s in sizes_in_run))
    if not sizes:
        raise InputError("a run needs at least one removal size")
    return [f"ind_size_{s}" for s in sizes[1:]]


def regression_terms(sizes_in_run) -> list[str]:
    """The full candidate term set offered to the stepwise fit."""
    return [
        TERM_F1_SOURCE,
        TERM_ATE_TARGET,
        TERM_ATE_SOURCE,
        TERM_P_S_T,
        TERM_ATE_T_X_P,
        TERM_F1_S_X_P,
    ] + size_indicator_names(sizes_in_run)


@dataclass
class CandidateRecord:
    pair_id: str
    spec: CandidateSpec
    ate_source: AteEstimate
    ate_target: AteEstimate
    f1_source: float
    p_source_given_target: float
    size_indicators: dict[str, float] = field(default_factory=dict)
    target_f1: float | None = None
    model_path: str | None = None

    @property
    def interaction_ate_t(self) -> float:
        return self.ate_target.value * self.p_source_given_target

    @property
    def interaction_f1_s(self) -> float:
        return self.f1_source * self.p_source_given_target

    def features(self) -> dict[str, float]:
        return {
            TERM_F1_SOURCE: self.f1_source,
            TERM_ATE_TARGET: self.ate_target.value,
            TERM_ATE_SOURCE: self.ate_source.value,
            TERM_P_S_T: self.p_source_given_target,
            TERM_ATE_T_X_P: self.interaction_ate_t,
            TERM_F1_S_X_P: self.interaction_f1_s,
            **self.size_indicators,
        }

    def with_target_f1(self, value: float) -> "CandidateRecord":
        return replace(self, target_f1=value)


def indomain_f1(candidate: LayerStackModel, held_out_source) -> float:
    """Macro F1 of the candidate on held-out labeled source data."""
    if len(held_out_source) == 0:
        raise InputError("empty held-out source set")
    return evaluate_macro_f1(candidate, held_out_source)


def _sentence_level(examples) -> list[Example]:
    """Domain identity is a whole-sentence property; collapse any
    multi-position examples to one pooled prediction."""
    return [
        ex if getattr(ex, "positions", 1) == 1 else Example(tokens=tuple(ex.tokens))
        for ex in examples
    ]


def build_domain_classifier(encoder: LayerStackModel, seed: int) -> LayerStackModel:
    """Frozen copy of the task-trained encoder with a fresh binary decoder."""
    params = {"embedding": encoder.params["embedding"].copy()}
    freeze = {"embedding": True}
    for i in encoder.active_layers:
        params[f"layer{i}.weight"] = encoder.params[f"layer{i}.weight"].copy()
        params[f"layer{i}.bias"] = encoder.params[f"layer{i}.bias"].copy()
        freeze[f"layer{i}.weight"] = True
        freeze[f"layer{i}.bias"] = True
    rng = np.random.default_rng(seed)
    params["decoder.attention"] = np.zeros(len(encoder.active_layers))
    params["decoder.weight"] = rng.normal(0.0, 1.0 / np.sqrt(encoder.dim), size=(2, encoder.dim))
    params["decoder.bias"] = np.zeros(2)
    for name in ("decoder.attention", "decoder.weight", "decoder.bias"):
        freeze[name] = False
    return LayerStackModel(
        vocab_size=encoder.vocab_size,
        dim=encoder.dim,
        n_classes=2,
        active_layers=encoder.active_layers,
        params=params,
        freeze_mask=freeze,
    )


def train_domain_classifier(
    unlabeled_source,
    unlabeled_target,
    encoder: LayerStackModel,
    config: TrainConfig,
    holdout_fraction: float = 0.2,
    patience: int = 3,
) -> LayerStackModel:
    """Source-vs-target classifier on the unlabeled corpora.

    Trains only the fresh decoder on top of the frozen encoder, with early
    stopping on a held-out slice of the combined corpus.
    """
    if len(unlabeled_source) == 0 or len(unlabeled_target) == 0:
        raise InputError("domain classification needs examples from both domains")
    examples = [
        Example(tokens=tuple(ex.tokens), label=SOURCE_CLASS)
        for ex in _sentence_level(unlabeled_source)
    ] + [
        Example(tokens=tuple(ex.tokens), label=1 - SOURCE_CLASS)
        for ex in _sentence_level(unlabeled_target)
    ]
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(examples))
    n_val = int(round(holdout_fraction * len(examples)))
    val = [examples[i] for i in order[:n_val]]
    fit = [examples[i] for i in order[n_val:]]
    classifier = build_domain_classifier(encoder, seed=config.seed)
    if not fit:
        fit, val = val, []
    return train(
        classifier,
        fit,
        config,
        eval_data=val if val else None,
        patience=patience if val else None,
    )


def p_s_given_t(classifier: LayerStackModel, target_dev) -> float:
    """Mean probability, under the domain classifier, that target examples
    belong to the source domain."""
    if len(target_dev) == 0:
        raise InputError("empty target development set")
    if classifier.n_classes != 2:
        raise InputError("domain classifier must be binary")
    probs = predict_proba(classifier, _sentence_level(target_dev))
    return float(probs[:, SOURCE_CLASS].mean())


def assemble_record(
    spec: CandidateSpec,
    ate_source: AteEstimate,
    ate_target: AteEstimate,
    f1_source: float,
    p_source_given_target: float,
    sizes_in_run,
    pair_id: str,
    target_f1: float | None = None,
    model_path: str | None = None,
) -> CandidateRecord:
    """One-hot the removal size against the run's size set and bundle all
    covariates; interaction terms are derived, not stored."""
    if not 0.0 <= f1_source <= 1.0:
        raise InputError("f1_source must be in [0, 1]")
    if not 0.0 <= p_source_given_target <= 1.0:
        raise InputError("p_source_given_target must be in [0, 1]")
    sizes = sorted(set(int(s) for s in sizes_in_run))
    if len(spec.removed) not in sizes:
        raise InputError(
            f"candidate removes {len(spec.removed)} layers, not one of the run sizes {sizes}"
        )
    indicators = {
        name: (1.0 if len(spec.removed) == int(name.rsplit("_", 1)[1]) else 0.0)
        for name in size_indicator_names(sizes)
    }
    return CandidateRecord(
        pair_id=pair_id,
        spec=spec,
        ate_source=ate_source,
        ate_target=ate_target,
        f1_source=f1_source,
        p_source_given_target=p_source_given_target,
        size_indicators=indicators,
        target_f1=target_f1,
        model_path=model_path,
    )


# ------------------------------------------------------------------ CSV I/O

_FIXED_HEAD = ["pair_id", "spec", "ate_s", "ate_t", "f1_s", "p_s_t"]
_FIXED_TAIL = [TERM_ATE_T_X_P, TERM_F1_S_X_P, "target_f1"]


def _fmt(x: float) -> str:
    return repr(float(x))


def records_csv_columns(indicator_names) -> list[str]:
    return _FIXED_HEAD + list(indicator_names) + _FIXED_TAIL


def write_records(path, records) -> None:
    """Fixed-order CSV; floats use shortest round-trip formatting so a
    rewrite of the same records is byte-identical."""
    records = list(records)
    if not records:
        raise InputError("no records to write")
    indicator_names = sorted(
        records[0].size_indicators, key=lambda n: int(n.rsplit("_", 1)[1])
    )
    for rec in records:
        if set(rec.size_indicators) != set(indicator_names):
            raise InputError("records in one file must share indicator columns")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(records_csv_columns(indicator_names))
        for rec in records:
            row = [
                rec.pair_id,
                rec.spec.to_json(),
                _fmt(rec.ate_source.value),
                _fmt(rec.ate_target.value),
                _fmt(rec.f1_source),
                _fmt(rec.p_source_given_target),
            ]
            row += [_fmt(rec.size_indicators[n]) for n in indicator_names]
            row += [_fmt(rec.interaction_ate_t), _fmt(rec.interaction_f1_s)]
            row.append("" if rec.target_f1 is None else _fmt(rec.target_f1))
            writer.writerow(row)


def read_records(path, metric: str = TOTAL_VARIATION) -> list[CandidateRecord]:
    """Read a records CSV back. ATE metadata beyond the value is not stored
    in the file; domain names are recovered from the pair id and the sample
    count is unknown (0)."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty records file") from None
        if header[: len(_FIXED_HEAD)] != _FIXED_HEAD or header[-3:] != _FIXED_TAIL:
            raise DataFormatError(f"{path}: unexpected records header {header}")
        indicator_names = header[len(_FIXED_HEAD) : -3]
        records = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataFormatError(f"{path}:{lineno}: wrong column count")
            try:
                pair_id = row[0]
                names = pair_id.split("__")
                source_name = names[0] if len(names) == 2 else ""
                target_name = names[1] if len(names) == 2 else ""
                spec = CandidateSpec.from_json(row[1])
                rec = CandidateRecord(
                    pair_id=pair_id,
                    spec=spec,
                    ate_source=AteEstimate(float(row[2]), metric, 0, source_name),
                    ate_target=AteEstimate(float(row[3]), metric, 0, target_name),
                    f1_source=float(row[4]),
                    p_source_given_target=float(row[5]),
                    size_indicators={
                        n: float(v)
                        for n, v in zip(indicator_names, row[len(_FIXED_HEAD) : -3])
                    },
                    target_f1=None if row[-1] == "" else float(row[-1]),
                )
            except (ValueError, InputError) as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from exc
            records.append(rec)
    return records
