"""End-to-end orchestration: train base models per source domain, build and
fine-tune removal candidates, compute their covariates, fit the stepwise
selector on training domain pairs, and pick a candidate for unseen pairs
without ever reading target labels (enforced by an access-logging wrapper).

Everything is reproducible from the experiment seed: per-stage seeds are
derived by hashing, candidates are independent of completion order, and
records are sorted before persistence, so reruns produce byte-identical
CSVs and manifests (timings live in their own manifest field).
"""

from __future__ import annotations

import hashlib
import json
import multiprocessing
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .compress import (
    CandidateSpec,
    build_candidate,
    finetune_candidate,
    plan_reconnection,
    sample_candidate_specs,
)
from .data import (
    DomainDataset,
    DomainPair,
    JsonlSchema,
    ShiftSpec,
    build_schema_from_jsonl,
    generate,
    load_jsonl,
    split,
)
from .effects import KL, TOTAL_VARIATION, AteEstimate, estimate_ate
from .errors import DataFormatError, InputError, PipelineError, PurityError
from .features import (
    TERM_ATE_SOURCE,
    TERM_ATE_T_X_P,
    TERM_ATE_TARGET,
    TERM_F1_S_X_P,
    TERM_F1_SOURCE,
    TERM_P_S_T,
    CandidateRecord,
    assemble_record,
    indomain_f1,
    p_s_given_t,
    read_records,
    train_domain_classifier,
    write_records,
)
from .net import (
    Example,
    LayerStackModel,
    TrainConfig,
    evaluate_macro_f1,
    init_model,
    save_model,
    train,
)
from .regression import DesignMatrix, RegressionModel, predict, stepwise_fit

MANIFEST_NAME = "manifest.json"


def stable_seed(*parts) -> int:
    """Deterministic 63-bit seed from a tuple of identifiers."""
    text = "\x1f".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


# ------------------------------------------------------------------ access audit

class AccessLog:
    """Counts (domain, split, kind) accesses; kind is 'tokens' or 'label'."""

    def __init__(self):
        self.counts: dict[tuple[str, str, str], int] = {}

    def record(self, domain: str, split: str, kind: str) -> None:
        key = (domain, split, kind)
        self.counts[key] = self.counts.get(key, 0) + 1

    def label_reads(self, domain: str) -> int:
        return sum(v for (d, _, kind), v in self.counts.items() if d == domain and kind == "label")

    def as_dict(self) -> dict[str, int]:
        return {"|".join(k): v for k, v in sorted(self.counts.items())}


class LoggedExample:
    """Example proxy that logs field reads and can forbid label access."""

    __slots__ = ("_ex", "_log", "_domain", "_split", "_forbid_label")

    def __init__(self, ex, log: AccessLog, domain: str, split: str, forbid_label: bool):
        self._ex = ex
        self._log = log
        self._domain = domain
        self._split = split
        self._forbid_label = forbid_label

    def __getstate__(self):
        return (self._ex, self._log, self._domain, self._split, self._forbid_label)

    def __setstate__(self, state):
        self._ex, self._log, self._domain, self._split, self._forbid_label = state

    @property
    def tokens(self):
        self._log.record(self._domain, self._split, "tokens")
        return self._ex.tokens

    @property
    def label(self):
        if self._forbid_label:
            raise PurityError(
                f"label read on {self._domain}/{self._split} is forbidden during selection"
            )
        self._log.record(self._domain, self._split, "label")
        return self._ex.label

    @property
    def positions(self):
        return self._ex.positions


class LoggedDataset:
    """DomainDataset wrapper returning logging proxies for every split.

    With ``forbid_labels`` the proxies raise on any label access, making
    target-label purity self-enforcing rather than audit-only.
    """

    def __init__(self, dataset: DomainDataset, log: AccessLog, forbid_labels: bool):
        self.name = dataset.name
        self.log = log
        self._wrapped = {
            split: [
                LoggedExample(ex, log, dataset.name, split, forbid_labels)
                for ex in getattr(dataset, split)
            ]
            for split in ("labeled_train", "unlabeled", "held_out", "test")
        }

    @property
    def labeled_train(self):
        return self._wrapped["labeled_train"]

    @property
    def unlabeled(self):
        return self._wrapped["unlabeled"]

    @property
    def held_out(self):
        return self._wrapped["held_out"]

    @property
    def test(self):
        return self._wrapped["test"]


# ------------------------------------------------------------------ configuration

@dataclass(frozen=True)
class JsonlDataConfig:
    directory: str
    domains: tuple[str, ...]
    vocab_size: int = 2000
    split_fractions: tuple[float, float, float] = (0.64, 0.16, 0.20)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    output_dir: str
    data: ShiftSpec | JsonlDataConfig
    model_dim: int = 24
    model_layers: int = 6
    removal_sizes: tuple[int, ...] = (2, 3, 4)
    candidates_per_size: int = 20
    ate_metric: str = TOTAL_VARIATION
    n_folds: int = 5
    test_domains_per_fold: int = 2
    base_train: TrainConfig = TrainConfig(epochs=10, learning_rate=3e-3)
    candidate_train: TrainConfig = TrainConfig(epochs=1, learning_rate=3e-3)
    domain_classifier_train: TrainConfig = TrainConfig(
        epochs=25, learning_rate=3e-2, weight_decay=0.0
    )
    alpha: float = 0.01
    jobs: int = 1
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n_folds < 2:
            raise InputError("fold count must be >= 2")
        if self.ate_metric not in (TOTAL_VARIATION, KL):
            raise InputError(f"unknown ATE metric {self.ate_metric!r}")
        if not self.removal_sizes:
            raise InputError("need at least one removal size")
        if self.jobs < 1:
            raise InputError("jobs must be >= 1")

    def to_json_dict(self) -> dict:
        if isinstance(self.data, ShiftSpec):
            data = {
                "synthetic": {k: getattr(self.data, k) for k in ShiftSpec.__dataclass_fields__}
            }
        else:
            data = {
                "jsonl": {
                    "directory": self.data.directory,
                    "domains": list(self.data.domains),
                    "vocab_size": self.data.vocab_size,
                    "split_fractions": list(self.data.split_fractions),
                }
            }

        def train_dict(cfg: TrainConfig) -> dict:
            return {k: getattr(cfg, k) for k in TrainConfig.__dataclass_fields__}

        return {
            "seed": self.seed,
            "output_dir": self.output_dir,
            "data": data,
            "model": {"dim": self.model_dim, "n_layers": self.model_layers},
            "removal_sizes": list(self.removal_sizes),
            "candidates_per_size": self.candidates_per_size,
            "ate_metric": self.ate_metric,
            "folds": {"count": self.n_folds, "test_domains_per_fold": self.test_domains_per_fold},
            "train": {
                "base": train_dict(self.base_train),
                "candidate": train_dict(self.candidate_train),
                "domain_classifier": train_dict(self.domain_classifier_train),
            },
            "alpha": self.alpha,
            "jobs": self.jobs,
            "extras": self.extras,
        }

    @staticmethod
    def from_json_dict(obj: dict) -> "ExperimentConfig":
        try:
            data_obj = obj["data"]
            if "synthetic" in data_obj:
                fields = dict(data_obj["synthetic"])
                if fields.get("seed") is None:
                    fields["seed"] = stable_seed(obj["seed"], "data")
                data = ShiftSpec(**fields)
            elif "jsonl" in data_obj:
                j = data_obj["jsonl"]
                data = JsonlDataConfig(
                    directory=j["directory"],
                    domains=tuple(j["domains"]),
                    vocab_size=int(j.get("vocab_size", 2000)),
                    split_fractions=tuple(j.get("split_fractions", (0.64, 0.16, 0.20))),
                )
            else:
                raise InputError("config data must be 'synthetic' or 'jsonl'")

            def train_cfg(name: str, **defaults) -> TrainConfig:
                merged = {**defaults, **obj.get("train", {}).get(name, {})}
                return TrainConfig(**merged)

            model = obj.get("model", {})
            folds = obj.get("folds", {})
            return ExperimentConfig(
                seed=int(obj["seed"]),
                output_dir=str(obj.get("output_dir", "runs/out")),
                data=data,
                model_dim=int(model.get("dim", 24)),
                model_layers=int(model.get("n_layers", 6)),
                removal_sizes=tuple(int(s) for s in obj.get("removal_sizes", (2, 3, 4))),
                candidates_per_size=int(obj.get("candidates_per_size", 20)),
                ate_metric=str(obj.get("ate_metric", TOTAL_VARIATION)),
                n_folds=int(folds.get("count", 5)),
                test_domains_per_fold=int(folds.get("test_domains_per_fold", 2)),
                base_train=train_cfg("base", epochs=10, learning_rate=3e-3),
                candidate_train=train_cfg("candidate", epochs=1, learning_rate=3e-3),
                domain_classifier_train=train_cfg(
                    "domain_classifier", epochs=25, learning_rate=3e-2, weight_decay=0.0
                ),
                alpha=float(obj.get("alpha", 0.01)),
                jobs=int(obj.get("jobs", 1)),
                extras=dict(obj.get("extras", {})),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataFormatError(f"malformed experiment config: {exc}") from exc


def load_config(path, output_dir=None, jobs=None, seed=None) -> ExperimentConfig:
    """Read a JSON config file, honoring CLI and environment overrides
    (PRUNEWISE_OUTPUT_DIR, PRUNEWISE_JOBS)."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"no such config file: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"{path}: not valid JSON: {exc}") from exc
    if seed is not None:
        obj["seed"] = seed
        synth = obj.get("data", {}).get("synthetic")
        if synth is not None:
            synth["seed"] = None  # re-derive from the overridden seed
    env_out = os.environ.get("PRUNEWISE_OUTPUT_DIR")
    env_jobs = os.environ.get("PRUNEWISE_JOBS")
    if output_dir is not None:
        obj["output_dir"] = str(output_dir)
    elif env_out:
        obj["output_dir"] = env_out
    if jobs is not None:
        obj["jobs"] = jobs
    elif env_jobs:
        obj["jobs"] = int(env_jobs)
    return ExperimentConfig.from_json_dict(obj)


# ------------------------------------------------------------------ data loading

def load_domains(config: ExperimentConfig) -> tuple[dict[str, DomainDataset], int, int]:
    """Returns (datasets by name, vocab_size, n_classes)."""
    if isinstance(config.data, ShiftSpec):
        domains = {d.name: d for d in generate(config.data)}
        return domains, config.data.vocab_size, config.data.n_classes

    cfg = config.data
    directory = Path(cfg.directory)
    if not directory.is_dir():
        raise InputError(f"no such data directory: {directory}")
    meta_path = directory / "meta.json"
    if meta_path.exists():
        with open(meta_path, "r", encoding="utf-8") as fh:
            meta = json.load(fh)
        schema = JsonlSchema(
            vocab={w: i + 1 for i, w in enumerate(meta["vocab"])},
            labels={lab: i for i, lab in enumerate(meta["labels"])},
        )
    else:
        train_files = []
        for d in cfg.domains:
            pre_split = directory / f"{d}.train.jsonl"
            train_files.append(pre_split if pre_split.exists() else directory / f"{d}.jsonl")
        schema = build_schema_from_jsonl(train_files, cfg.vocab_size)

    domains = {}
    for name in cfg.domains:
        files = {s: directory / f"{name}.{s}.jsonl" for s in ("train", "unlabeled", "dev", "test")}
        if files["train"].exists():
            pool = load_jsonl(files["train"], schema)
            dataset = DomainDataset(
                name=name, labeled_train=pool.labeled_train, unlabeled=pool.unlabeled
            )
            if files["unlabeled"].exists():
                dataset.unlabeled = load_jsonl(files["unlabeled"], schema).unlabeled
            for attr, key in (("held_out", "dev"), ("test", "test")):
                if files[key].exists():
                    part = load_jsonl(files[key], schema)
                    setattr(dataset, attr, part.labeled_train + part.unlabeled)
        else:
            pool = load_jsonl(directory / f"{name}.jsonl", schema)
            tr, dev, test = split(
                pool.labeled_train, cfg.split_fractions, stable_seed(config.seed, "split", name)
            )
            # with no separate unlabeled corpus, use an unlabeled view of train
            unlabeled = pool.unlabeled or [Example(tokens=ex.tokens) for ex in tr]
            dataset = DomainDataset(
                name=name, labeled_train=tr, unlabeled=unlabeled, held_out=dev, test=test
            )
        if not dataset.labeled_train:
            raise InputError(f"domain {name!r} has no labeled training data")
        domains[name] = dataset
    if schema.n_classes < 2:
        raise InputError("label space must have at least two classes")
    return domains, schema.vocab_size, schema.n_classes


def ordered_pairs(domain_names) -> list[tuple[str, str]]:
    names = list(domain_names)
    return [(s, t) for s in names for t in names if s != t]


# ------------------------------------------------------------------ folds

@dataclass(frozen=True)
class PairFold:
    index: int
    test_domains: tuple[str, ...]
    train_pairs: tuple[tuple[str, str], ...]
    test_pairs: tuple[tuple[str, str], ...]


def make_pair_folds(
    domain_names, n_folds: int, seed: int, test_domains_per_fold: int = 2
) -> list[PairFold]:
    """Each fold tests on all ordered pairs within a small domain subset and
    trains on all ordered pairs among the remaining domains, so no test
    domain (source or target) ever appears in a training pair."""
    from itertools import combinations

    names = sorted(domain_names)
    k = test_domains_per_fold
    if n_folds < 2:
        raise InputError("fold count must be >= 2")
    if k < 2:
        raise InputError("need at least two test domains per fold for an ordered pair")
    if len(names) - k < 2:
        raise InputError("not enough domains left for training pairs")
    subsets = list(combinations(names, k))
    if len(subsets) < n_folds:
        raise InputError(
            f"only {len(subsets)} distinct test subsets exist, cannot build {n_folds} folds"
        )
    rng = np.random.default_rng(seed)
    chosen = [subsets[i] for i in rng.permutation(len(subsets))[:n_folds]]
    folds = []
    for idx, subset in enumerate(chosen):
        rest = [n for n in names if n not in subset]
        folds.append(
            PairFold(
                index=idx,
                test_domains=tuple(subset),
                train_pairs=tuple(ordered_pairs(rest)),
                test_pairs=tuple(ordered_pairs(subset)),
            )
        )
    return folds


# ------------------------------------------------------------------ per-pair work

def train_base_model(config: ExperimentConfig, source, vocab_size: int, n_classes: int) -> LayerStackModel:
    """Train the uncompressed model on the source's labeled data; works with
    plain and logged dataset views."""
    model = init_model(
        vocab_size,
        config.model_dim,
        n_classes,
        config.model_layers,
        seed=stable_seed(config.seed, "init", source.name),
    )
    cfg = config.base_train.with_seed(stable_seed(config.seed, "base", source.name))
    return train(model, source.labeled_train, cfg)


@dataclass
class CandidateFailure:
    spec: CandidateSpec
    error: str


@dataclass
class PairComputation:
    pair_id: str
    records: list[CandidateRecord]
    failures: list[CandidateFailure]
    test_f1: dict[CandidateSpec, float]
    candidates: dict[CandidateSpec, LayerStackModel]
    p_source_given_target: float


def _compute_one_candidate(config, base, pair, spec, p_st, measure_dev_f1, measure_test_f1):
    plan = plan_reconnection(spec, config.model_layers)
    candidate = build_candidate(base, spec, plan)
    tuned = finetune_candidate(
        candidate,
        pair.source.labeled_train,
        config.candidate_train.with_seed(
            stable_seed(config.seed, "cand", pair.pair_id, spec.to_json())
        ),
    )
    ate_s = estimate_ate(base, tuned, pair.source.held_out, config.ate_metric, pair.source.name)
    ate_t = estimate_ate(base, tuned, pair.target.held_out, config.ate_metric, pair.target.name)
    f1_s = indomain_f1(tuned, pair.source.held_out)
    target_f1 = evaluate_macro_f1(tuned, pair.target.held_out) if measure_dev_f1 else None
    test_f1 = evaluate_macro_f1(tuned, pair.target.test) if measure_test_f1 else None
    record = assemble_record(
        spec=spec,
        ate_source=ate_s,
        ate_target=ate_t,
        f1_source=f1_s,
        p_source_given_target=p_st,
        sizes_in_run=config.removal_sizes,
        pair_id=pair.pair_id,
        target_f1=target_f1,
    )
    return record, test_f1, tuned


def _candidate_chunk(args):
    config, base, pair, specs, p_st, measure_dev, measure_test, keep_models = args
    out = []
    for spec in specs:
        try:
            record, test_f1, tuned = _compute_one_candidate(
                config, base, pair, spec, p_st, measure_dev, measure_test
            )
        except PurityError:
            raise
        except Exception as exc:  # per-candidate isolation
            out.append((spec, None, None, None, f"{type(exc).__name__}: {exc}"))
            continue
        out.append((spec, record, test_f1, tuned if keep_models else None, None))
    return out


def compute_pair(
    config: ExperimentConfig,
    pair: DomainPair,
    base: LayerStackModel,
    measure_dev_f1: bool = True,
    measure_test_f1: bool = False,
    keep_models: bool = False,
    skip_specs=(),
    on_result=None,
) -> PairComputation:
    """All candidates for one domain pair. A failing candidate is recorded
    and skipped; a pair where every candidate failed raises. ``on_result``
    is called once per finished candidate (for incremental persistence)."""
    specs = sample_candidate_specs(
        config.model_layers,
        config.removal_sizes,
        config.candidates_per_size,
        seed=stable_seed(config.seed, "specs", pair.pair_id),
    )
    skip = set(skip_specs)
    todo = [s for s in specs if s not in skip]
    classifier = train_domain_classifier(
        pair.source.unlabeled,
        pair.target.unlabeled,
        base,
        config.domain_classifier_train.with_seed(stable_seed(config.seed, "domclf", pair.pair_id)),
    )
    p_st = p_s_given_t(classifier, pair.target.held_out)

    results = []

    def consume(batch):
        for item in batch:
            results.append(item)
            if on_result is not None:
                on_result(*item)

    if config.jobs > 1 and len(todo) > 1:
        n_chunks = min(config.jobs, len(todo))
        chunks = [todo[i::n_chunks] for i in range(n_chunks)]
        ctx = multiprocessing.get_context("fork")
        with ProcessPoolExecutor(max_workers=config.jobs, mp_context=ctx) as pool:
            for chunk_result in pool.map(
                _candidate_chunk,
                [
                    (config, base, pair, chunk, p_st, measure_dev_f1, measure_test_f1, keep_models)
                    for chunk in chunks
                ],
            ):
                consume(chunk_result)
    else:
        for spec in todo:
            consume(
                _candidate_chunk(
                    (config, base, pair, [spec], p_st, measure_dev_f1, measure_test_f1, keep_models)
                )
            )

    records, failures, test_f1s, models = [], [], {}, {}
    for spec, record, test_f1, model, error in sorted(results, key=lambda r: r[0].removed):
        if error is not None:
            failures.append(CandidateFailure(spec=spec, error=error))
            continue
        records.append(record)
        if test_f1 is not None:
            test_f1s[spec] = test_f1
        if model is not None:
            models[spec] = model
    if not records and not skip:
        raise PipelineError(f"pair {pair.pair_id}: every candidate failed")
    return PairComputation(
        pair_id=pair.pair_id,
        records=records,
        failures=failures,
        test_f1=test_f1s,
        candidates=models,
        p_source_given_target=p_st,
    )


# ------------------------------------------------------------------ selector

SELECTOR_BASE_TERMS = [
    TERM_F1_SOURCE,
    TERM_ATE_TARGET,
    TERM_ATE_SOURCE,
    TERM_P_S_T,
    TERM_ATE_T_X_P,
    TERM_F1_S_X_P,
]


def fit_selector(records, alpha: float = 0.01) -> RegressionModel:
    """Stepwise regression of target F1 on the candidate covariates."""
    records = list(records)
    if not records:
        raise InputError("no records to fit on")
    indicator_names = sorted(
        {name for rec in records for name in rec.size_indicators},
        key=lambda n: int(n.rsplit("_", 1)[1]),
    )
    terms = SELECTOR_BASE_TERMS + indicator_names
    rows = []
    for rec in records:
        if rec.target_f1 is None:
            raise InputError(f"record {rec.pair_id}/{rec.spec.to_json()} lacks target F1")
        feats = rec.features()
        rows.append([feats[t] for t in terms])
    design = DesignMatrix(
        terms=terms,
        X=np.asarray(rows, dtype=np.float64),
        y=np.asarray([rec.target_f1 for rec in records], dtype=np.float64),
    )
    return stepwise_fit(design, alpha=alpha)


# ------------------------------------------------------------------ selection

@dataclass
class SelectionResult:
    pair_id: str
    chosen: CandidateSpec
    ranked: list[tuple[CandidateSpec, float]]  # (spec, predicted), best first
    records: list[CandidateRecord]
    candidates: dict[CandidateSpec, LayerStackModel]
    failures: list[CandidateFailure]
    access_log: AccessLog

    @property
    def target_label_reads(self) -> int:
        target = self.pair_id.split("__")[1]
        return self.access_log.label_reads(target)


def select_for_unseen_pair(
    config: ExperimentConfig,
    pair: DomainPair,
    selector: RegressionModel,
    vocab_size: int | None = None,
    n_classes: int | None = None,
) -> SelectionResult:
    """Train a base model and generate candidates for the unseen pair, then
    rank them by predicted target performance, from features only.

    Target labels are off limits: the pair is wrapped in an access-logging
    view whose target side raises on any label read, and the log is
    returned for auditing. Ties in the prediction break on higher source F1,
    then on fewer removed layers, then on the spec itself.
    """
    if vocab_size is None or n_classes is None:
        if not isinstance(config.data, ShiftSpec):
            raise InputError("vocab_size and n_classes are required for non-synthetic data")
        vocab_size, n_classes = config.data.vocab_size, config.data.n_classes
    log = AccessLog()
    logged_pair = DomainPair(
        source=LoggedDataset(pair.source, log, forbid_labels=False),
        target=LoggedDataset(pair.target, log, forbid_labels=True),
    )
    base = train_base_model(config, logged_pair.source, vocab_size, n_classes)
    computation = compute_pair(
        config,
        logged_pair,
        base,
        measure_dev_f1=False,
        measure_test_f1=False,
        keep_models=True,
    )
    scored = [
        (rec.spec, float(predict(selector, rec)), rec.f1_source) for rec in computation.records
    ]
    scored.sort(key=lambda row: (-row[1], -row[2], len(row[0].removed), row[0].removed))
    ranked = [(spec, pred) for spec, pred, _ in scored]
    return SelectionResult(
        pair_id=pair.pair_id,
        chosen=ranked[0][0],
        ranked=ranked,
        records=computation.records,
        candidates=computation.candidates,
        failures=computation.failures,
        access_log=log,
    )


@dataclass
class SelectionReport:
    chosen: CandidateSpec
    chosen_f1: float
    best: CandidateSpec
    best_f1: float
    regret: float
    rank: int
    n_candidates: int
    f1_by_spec: dict[CandidateSpec, float]


def evaluate_selection(chosen: CandidateSpec, candidates, target_test) -> SelectionReport:
    """Oracle evaluation: measure every candidate on labeled target test
    data, then report the chosen one's regret and rank (1 = best; ties share
    the better rank)."""
    if isinstance(candidates, dict):
        items = sorted(candidates.items(), key=lambda kv: kv[0].removed)
    else:
        items = sorted(candidates, key=lambda kv: kv[0].removed)
    if not items:
        raise InputError("no candidates to evaluate")
    f1s = {spec: evaluate_macro_f1(model, target_test) for spec, model in items}
    if chosen not in f1s:
        raise InputError(f"chosen spec {chosen.to_json()} is not among the candidates")
    best_spec = max(f1s, key=lambda s: (f1s[s], s.removed))
    chosen_f1 = f1s[chosen]
    rank = 1 + sum(1 for v in f1s.values() if v > chosen_f1)
    return SelectionReport(
        chosen=chosen,
        chosen_f1=chosen_f1,
        best=best_spec,
        best_f1=f1s[best_spec],
        regret=f1s[best_spec] - chosen_f1,
        rank=rank,
        n_candidates=len(f1s),
        f1_by_spec=f1s,
    )


def naive_choice(records) -> CandidateSpec:
    """Best-on-held-out-source rule: the model selection baseline that uses
    no target information at all."""
    records = list(records)
    if not records:
        raise InputError("no records")
    best = max(
        records,
        key=lambda r: (r.f1_source, -len(r.spec.removed), tuple(-i for i in r.spec.removed)),
    )
    return best.spec


# ------------------------------------------------------------------ persistence

def _fmt(x: float) -> str:
    return repr(float(x))


def write_test_scores(path, test_f1: dict[CandidateSpec, float]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("spec,test_f1\n")
        for spec in sorted(test_f1, key=lambda s: s.removed):
            fh.write(f'"{spec.to_json()}",{_fmt(test_f1[spec])}\n')


def read_test_scores(path) -> dict[CandidateSpec, float]:
    import csv as _csv

    out = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = _csv.reader(fh)
        header = next(reader, None)
        if header != ["spec", "test_f1"]:
            raise DataFormatError(f"{path}: unexpected test score header")
        for row in reader:
            out[CandidateSpec.from_json(row[0])] = float(row[1])
    return out


class PartialPairFile:
    """Candidate-level resume log: one JSON line per finished candidate (or
    failure), replayed on restart so finished work is never recomputed."""

    def __init__(self, path):
        self.path = Path(path)

    def load(self):
        records: dict[CandidateSpec, CandidateRecord] = {}
        test_f1: dict[CandidateSpec, float] = {}
        failures: dict[CandidateSpec, str] = {}
        if not self.path.exists():
            return records, test_f1, failures
        with open(self.path, "r", encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                obj = json.loads(line)
                spec = CandidateSpec(removed=tuple(obj["spec"]))
                if obj.get("error"):
                    failures[spec] = obj["error"]
                    continue
                source_name, _, target_name = obj["pair_id"].partition("__")
                records[spec] = assemble_record(
                    spec=spec,
                    ate_source=AteEstimate(obj["ate_s"], obj["metric"], obj["ate_n_s"], source_name),
                    ate_target=AteEstimate(obj["ate_t"], obj["metric"], obj["ate_n_t"], target_name),
                    f1_source=obj["f1_s"],
                    p_source_given_target=obj["p_s_t"],
                    sizes_in_run=obj["sizes"],
                    pair_id=obj["pair_id"],
                    target_f1=obj.get("target_f1"),
                )
                if obj.get("test_f1") is not None:
                    test_f1[spec] = obj["test_f1"]
        return records, test_f1, failures

    def append_record(self, rec: CandidateRecord, test_f1, sizes) -> None:
        obj = {
            "pair_id": rec.pair_id,
            "spec": list(rec.spec.removed),
            "ate_s": rec.ate_source.value,
            "ate_t": rec.ate_target.value,
            "ate_n_s": rec.ate_source.n_examples,
            "ate_n_t": rec.ate_target.n_examples,
            "metric": rec.ate_source.metric,
            "f1_s": rec.f1_source,
            "p_s_t": rec.p_source_given_target,
            "sizes": list(sizes),
            "target_f1": rec.target_f1,
            "test_f1": test_f1,
        }
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(obj, sort_keys=True) + "\n")

    def append_failure(self, spec: CandidateSpec, error: str) -> None:
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps({"spec": list(spec.removed), "error": error}) + "\n")

    def remove(self) -> None:
        if self.path.exists():
            self.path.unlink()


# ------------------------------------------------------------------ orchestration

def _pair_dir(out_dir: Path, pair_id: str) -> Path:
    return out_dir / "pairs" / pair_id


def _compute_and_persist_pair(
    config: ExperimentConfig,
    pair: DomainPair,
    base: LayerStackModel,
    out_dir: Path,
    measure_test_f1: bool,
) -> tuple[list[CandidateRecord], dict]:
    pair_dir = _pair_dir(out_dir, pair.pair_id)
    pair_dir.mkdir(parents=True, exist_ok=True)
    records_path = pair_dir / "records.csv"
    scores_path = pair_dir / "test_scores.csv"
    partial = PartialPairFile(pair_dir / "records.partial.jsonl")
    done_records, done_scores, done_failures = partial.load()

    def persist(spec, record, test_f1, model, error):
        if error is not None:
            partial.append_failure(spec, error)
        else:
            partial.append_record(record, test_f1, config.removal_sizes)

    computation = compute_pair(
        config,
        pair,
        base,
        measure_dev_f1=True,
        measure_test_f1=measure_test_f1,
        keep_models=False,
        skip_specs=list(done_records) + list(done_failures),
        on_result=persist,
    )
    records = sorted(
        list(done_records.values()) + computation.records, key=lambda r: r.spec.removed
    )
    test_scores = {**done_scores, **computation.test_f1}
    failures = {**done_failures, **{f.spec: f.error for f in computation.failures}}
    if not records:
        raise PipelineError(f"pair {pair.pair_id}: every candidate failed")
    write_records(records_path, records)
    if measure_test_f1:
        write_test_scores(scores_path, test_scores)
    partial.remove()
    entry = {
        "records": str(records_path.relative_to(out_dir)),
        "test_scores": str(scores_path.relative_to(out_dir)) if measure_test_f1 else None,
        "base_model": str((pair_dir / "base_model.bin").relative_to(out_dir)),
        "n_records": len(records),
        "failures": [
            {"spec": spec.to_json(), "error": err}
            for spec, err in sorted(failures.items(), key=lambda kv: kv[0].removed)
        ],
        "seeds": {
            "base": stable_seed(config.seed, "base", pair.source.name),
            "specs": stable_seed(config.seed, "specs", pair.pair_id),
            "domain_classifier": stable_seed(config.seed, "domclf", pair.pair_id),
        },
    }
    with open(pair_dir / "entry.json", "w", encoding="utf-8") as fh:
        json.dump(entry, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return records, entry


def run_training_pairs(
    config: ExperimentConfig,
    domains: dict[str, DomainDataset] | None = None,
    pairs=None,
    measure_test_f1: bool = True,
):
    """Phase 1 of the full loop: for each ordered pair, train (or reuse) the
    source base model, compute all candidate records with target F1, and
    persist them. Finished pairs and finished candidates are not recomputed
    on a rerun. Returns (records, manifest pair entries, timings)."""
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if domains is None:
        domains, vocab_size, n_classes = load_domains(config)
    else:
        vocab_size, n_classes = _infer_dims(config, domains)
    if pairs is None:
        pairs = ordered_pairs(sorted(domains))

    all_records: list[CandidateRecord] = []
    manifest_pairs: dict[str, dict] = {}
    timings: dict[str, float] = {}
    base_cache: dict[str, LayerStackModel] = {}
    for source_name, target_name in pairs:
        pair = DomainPair(source=domains[source_name], target=domains[target_name])
        pair_dir = _pair_dir(out_dir, pair.pair_id)
        started = time.perf_counter()
        records_path = pair_dir / "records.csv"
        entry_path = pair_dir / "entry.json"
        if records_path.exists() and entry_path.exists():
            records = read_records(records_path, metric=config.ate_metric)
            with open(entry_path, "r", encoding="utf-8") as fh:
                entry = json.load(fh)
        else:
            if source_name not in base_cache:
                base_cache[source_name] = train_base_model(
                    config, pair.source, vocab_size, n_classes
                )
            pair_dir.mkdir(parents=True, exist_ok=True)
            save_model(base_cache[source_name], pair_dir / "base_model.bin")
            records, entry = _compute_and_persist_pair(
                config, pair, base_cache[source_name], out_dir, measure_test_f1
            )
        all_records.extend(records)
        manifest_pairs[pair.pair_id] = entry
        timings[pair.pair_id] = time.perf_counter() - started
    return all_records, manifest_pairs, timings


def _infer_dims(config: ExperimentConfig, domains) -> tuple[int, int]:
    if isinstance(config.data, ShiftSpec):
        return config.data.vocab_size, config.data.n_classes
    vocab = config.data.vocab_size
    n_classes = 0
    for dom in domains.values():
        for ex in dom.labeled_train:
            n_classes = max(n_classes, ex.label + 1)
    return vocab, n_classes


def run_all(config: ExperimentConfig) -> dict:
    """Full loop: phase-1 records for every ordered pair, then one stepwise
    selector per fold (fitted on its training pairs) and an audited
    selection plus oracle evaluation on each test pair. Writes everything
    under the output directory and returns the manifest."""
    started = time.perf_counter()
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    domains, vocab_size, n_classes = load_domains(config)
    folds = make_pair_folds(
        sorted(domains),
        config.n_folds,
        stable_seed(config.seed, "folds"),
        config.test_domains_per_fold,
    )

    records, manifest_pairs, pair_timings = run_training_pairs(config, domains=domains)
    records_by_pair: dict[str, list[CandidateRecord]] = {}
    for rec in records:
        records_by_pair.setdefault(rec.pair_id, []).append(rec)

    fold_entries = []
    fold_timings: dict[str, float] = {}
    for fold in folds:
        fold_start = time.perf_counter()
        fold_dir = out_dir / "folds" / f"fold_{fold.index}"
        fold_dir.mkdir(parents=True, exist_ok=True)
        train_records = [
            rec for s, t in fold.train_pairs for rec in records_by_pair[f"{s}__{t}"]
        ]
        selector = fit_selector(train_records, alpha=config.alpha)
        selector_path = fold_dir / "selector.json"
        selector.save(selector_path)

        selections = []
        for source_name, target_name in fold.test_pairs:
            pair = DomainPair(source=domains[source_name], target=domains[target_name])
            result = select_for_unseen_pair(config, pair, selector, vocab_size, n_classes)
            report = evaluate_selection(result.chosen, result.candidates, pair.target.test)
            naive_spec = naive_choice(result.records)
            naive_report = evaluate_selection(naive_spec, result.candidates, pair.target.test)
            selections.append(
                {
                    "pair": pair.pair_id,
                    "chosen": result.chosen.to_json(),
                    "predicted": result.ranked[0][1],
                    "chosen_test_f1": report.chosen_f1,
                    "best": report.best.to_json(),
                    "best_test_f1": report.best_f1,
                    "regret": report.regret,
                    "rank": report.rank,
                    "n_candidates": report.n_candidates,
                    "naive_chosen": naive_spec.to_json(),
                    "naive_test_f1": naive_report.chosen_f1,
                    "naive_regret": naive_report.regret,
                    "target_label_reads": result.target_label_reads,
                    "failures": [
                        {"spec": f.spec.to_json(), "error": f.error} for f in result.failures
                    ],
                }
            )
        fold_entries.append(
            {
                "index": fold.index,
                "test_domains": list(fold.test_domains),
                "train_pairs": [list(p) for p in fold.train_pairs],
                "test_pairs": [list(p) for p in fold.test_pairs],
                "selector": str(selector_path.relative_to(out_dir)),
                "adjusted_r2": selector.adjusted_r2,
                "selected_terms": list(selector.selected_terms),
                "selections": selections,
            }
        )
        fold_timings[f"fold_{fold.index}"] = time.perf_counter() - fold_start

    manifest = {
        "version": 1,
        "config": config.to_json_dict(),
        "pairs": manifest_pairs,
        "folds": fold_entries,
        "timings": {
            "pairs": pair_timings,
            "folds": fold_timings,
            "total": time.perf_counter() - started,
        },
    }
    write_manifest(out_dir / MANIFEST_NAME, manifest)
    return manifest


def write_manifest(path, manifest: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_manifest(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def manifest_without_timings(manifest: dict) -> dict:
    out = dict(manifest)
    out.pop("timings", None)
    return out
