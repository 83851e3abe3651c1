"""Synthetic multi-domain corpora with controllable shift, plus JSONL ingest.

Each domain draws sentences from per-(domain, class) token distributions
built by mixing a shared class prototype with a domain-specific component;
the mixture weight is the shift strength, so inter-domain divergence grows
linearly with it. Generated corpora are written in the same JSONL schema the
loader reads, so synthetic and real data share one path.
"""

from __future__ import annotations

import json
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataFormatError, InputError
from .net import Example

OOV_INDEX = 0


@dataclass
class DomainDataset:
    """One domain's splits: labeled train, unlabeled, dev (held out for
    measurement), and test (final reporting only)."""

    name: str
    labeled_train: list[Example] = field(default_factory=list)
    unlabeled: list[Example] = field(default_factory=list)
    held_out: list[Example] = field(default_factory=list)
    test: list[Example] = field(default_factory=list)


@dataclass
class DomainPair:
    source: DomainDataset
    target: DomainDataset

    @property
    def pair_id(self) -> str:
        return f"{self.source.name}__{self.target.name}"


@dataclass(frozen=True)
class ShiftSpec:
    vocab_size: int = 400
    n_classes: int = 3
    n_domains: int = 4
    shift_strength: float = 0.5
    label_noise: float = 0.05
    n_train: int = 400
    n_unlabeled: int = 200
    n_dev: int = 150
    n_test: int = 200
    min_len: int = 5
    max_len: int = 30
    disjoint_domain_vocab: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 1 or self.n_domains < 1:
            raise InputError("need at least one class and one domain")
        if self.vocab_size < self.n_domains + 2:
            raise InputError("vocab too small for the domain count (index 0 is OOV)")
        if not 0.0 <= self.shift_strength <= 1.0:
            raise InputError("shift_strength must be in [0, 1]")
        if not 0.0 <= self.label_noise <= 1.0:
            raise InputError("label_noise must be in [0, 1]")
        if self.min_len < 1 or self.max_len < self.min_len:
            raise InputError("invalid sentence length range")
        if min(self.n_train, self.n_unlabeled, self.n_dev, self.n_test) < 0:
            raise InputError("split sizes must be nonnegative")

    def domain_names(self) -> list[str]:
        return [f"dom{i}" for i in range(self.n_domains)]


def class_token_distributions(spec: ShiftSpec) -> np.ndarray:
    """Token distributions, shape (n_domains, n_classes, vocab_size - 1),
    over token indices 1..V-1. Deterministic in the spec seed."""
    rng = np.random.default_rng(spec.seed)
    n_tokens = spec.vocab_size - 1
    proto = rng.dirichlet(np.ones(n_tokens), size=spec.n_classes)
    pert = np.zeros((spec.n_domains, spec.n_classes, n_tokens))
    if spec.disjoint_domain_vocab:
        bounds = np.linspace(0, n_tokens, spec.n_domains + 1).astype(int)
        for d in range(spec.n_domains):
            lo, hi = bounds[d], bounds[d + 1]
            for c in range(spec.n_classes):
                pert[d, c, lo:hi] = rng.dirichlet(np.ones(hi - lo))
    else:
        for d in range(spec.n_domains):
            pert[d] = rng.dirichlet(np.ones(n_tokens), size=spec.n_classes)
    s = spec.shift_strength
    return (1.0 - s) * proto[None, :, :] + s * pert


def _sample_split(rng, dist, spec: ShiftSpec, n: int, labeled: bool) -> list[Example]:
    token_ids = np.arange(1, spec.vocab_size)
    out = []
    for _ in range(n):
        cls = int(rng.integers(0, spec.n_classes))
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        tokens = tuple(int(t) for t in rng.choice(token_ids, size=length, p=dist[cls]))
        label = None
        if labeled:
            label = cls
            if spec.label_noise > 0 and rng.random() < spec.label_noise:
                label = int(rng.integers(0, spec.n_classes))
        out.append(Example(tokens=tokens, label=label))
    return out


def generate(spec: ShiftSpec) -> list[DomainDataset]:
    """Generate every domain's splits, reproducibly from the spec seed."""
    dists = class_token_distributions(spec)
    domains = []
    for d, name in enumerate(spec.domain_names()):
        # one child stream per domain so domains are independent
        rng = np.random.default_rng([spec.seed, d])
        domains.append(
            DomainDataset(
                name=name,
                labeled_train=_sample_split(rng, dists[d], spec, spec.n_train, True),
                unlabeled=_sample_split(rng, dists[d], spec, spec.n_unlabeled, False),
                held_out=_sample_split(rng, dists[d], spec, spec.n_dev, True),
                test=_sample_split(rng, dists[d], spec, spec.n_test, True),
            )
        )
    return domains


def split(examples, fractions, seed: int):
    """Shuffle once and cut into len(fractions) disjoint, exhaustive parts."""
    fractions = tuple(float(f) for f in fractions)
    if any(f < 0 for f in fractions):
        raise InputError("fractions must be nonnegative")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise InputError(f"fractions must sum to 1, got {sum(fractions)}")
    n = len(examples)
    order = np.random.default_rng(seed).permutation(n)
    bounds = np.round(np.cumsum(fractions) * n).astype(int)
    bounds[-1] = n
    parts = []
    start = 0
    for b in bounds:
        parts.append([examples[i] for i in order[start:b]])
        start = b
    return tuple(parts)


@dataclass(frozen=True)
class JsonlSchema:
    """Field names plus the vocabulary and label mapping used to turn
    whitespace tokens into indices. Unknown tokens map to the OOV bucket."""

    vocab: dict[str, int]
    labels: dict[str, int]
    text_field: str = "text"
    label_field: str = "label"
    domain_field: str = "domain"

    @property
    def vocab_size(self) -> int:
        return max(self.vocab.values(), default=0) + 1

    @property
    def n_classes(self) -> int:
        return len(self.labels)

    def encode_text(self, text: str) -> tuple[int, ...]:
        return tuple(self.vocab.get(tok, OOV_INDEX) for tok in text.split())


def synthetic_schema(spec: ShiftSpec) -> JsonlSchema:
    """Identity mapping used when round-tripping generated corpora."""
    vocab = {f"w{i}": i for i in range(1, spec.vocab_size)}
    labels = {f"c{i}": i for i in range(spec.n_classes)}
    return JsonlSchema(vocab=vocab, labels=labels)


def build_schema_from_jsonl(paths, vocab_size: int,
                            text_field: str = "text",
                            label_field: str = "label",
                            domain_field: str = "domain") -> JsonlSchema:
    """Frequency vocabulary (ties broken alphabetically) and sorted labels."""
    counts: Counter = Counter()
    label_values = set()
    for path in paths:
        for lineno, obj in _iter_jsonl(path):
            counts.update(str(obj.get(text_field, "")).split())
            lab = obj.get(label_field)
            if lab is not None:
                label_values.add(str(lab))
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    vocab = {tok: i + 1 for i, (tok, _) in enumerate(ranked[: vocab_size - 1])}
    labels = {lab: i for i, lab in enumerate(sorted(label_values))}
    return JsonlSchema(vocab=vocab, labels=labels,
                       text_field=text_field, label_field=label_field,
                       domain_field=domain_field)


def _iter_jsonl(path):
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"{path}:{lineno}: malformed JSON line: {exc}") from exc
            if not isinstance(obj, dict):
                raise DataFormatError(f"{path}:{lineno}: expected a JSON object")
            yield lineno, obj


def load_jsonl(path, schema: JsonlSchema) -> DomainDataset:
    """One JSONL file becomes one domain pool: labeled lines go to
    labeled_train, lines missing a label go to the unlabeled split."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"no such file: {path}")
    name = None
    labeled: list[Example] = []
    unlabeled: list[Example] = []
    for lineno, obj in _iter_jsonl(path):
        if schema.text_field not in obj:
            raise DataFormatError(f"{path}:{lineno}: missing {schema.text_field!r} field")
        domain = obj.get(schema.domain_field)
        if name is None:
            name = domain if domain is not None else path.stem
        elif domain is not None and domain != name:
            raise DataFormatError(f"{path}:{lineno}: mixed domains ({domain!r} vs {name!r})")
        tokens = schema.encode_text(str(obj[schema.text_field]))
        if not tokens:
            raise DataFormatError(f"{path}:{lineno}: empty text")
        raw_label = obj.get(schema.label_field)
        if raw_label is None:
            unlabeled.append(Example(tokens=tokens))
        else:
            key = str(raw_label)
            if key not in schema.labels:
                raise DataFormatError(f"{path}:{lineno}: unknown label {key!r}")
            labeled.append(Example(tokens=tokens, label=schema.labels[key]))
    if name is None:
        warnings.warn(f"{path}: empty corpus file")
        name = path.stem
    return DomainDataset(name=name, labeled_train=labeled, unlabeled=unlabeled)


def write_jsonl(path, examples, domain: str, schema: JsonlSchema) -> None:
    """Write examples in the shared schema; None labels become JSON null."""
    index_to_word = {i: w for w, i in schema.vocab.items()}
    index_to_label = {i: lab for lab, i in schema.labels.items()}
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            text = " ".join(index_to_word.get(t, "<oov>") for t in ex.tokens)
            label = None if ex.label is None else index_to_label[ex.label]
            row = {
                schema.text_field: text,
                schema.label_field: label,
                schema.domain_field: domain,
            }
            fh.write(json.dumps(row) + "\n")
