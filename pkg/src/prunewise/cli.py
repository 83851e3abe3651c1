"""Command-line entry point for scripted experiments.

Exit codes: 0 ok, 2 usage, 3 data error, 4 numerical/singularity error,
5 training divergence, 1 other failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import glob
import json
import sys
from pathlib import Path

import numpy as np

from .analysis import (
    layer_frequency,
    layer_importance_regression,
    spearman,
    write_layer_frequency_long,
)
from .compress import CandidateSpec
from .data import ShiftSpec, generate, synthetic_schema, write_jsonl
from .errors import (
    DataFormatError,
    InputError,
    InsufficientDataError,
    PrunewiseError,
    SingularityError,
    TrainingDivergence,
)
from .features import read_records
from .net import save_model
from .pipeline import (
    DomainPair,
    _compute_and_persist_pair,
    _pair_dir,
    compute_pair,
    evaluate_selection,
    fit_selector,
    load_config,
    load_domains,
    naive_choice,
    run_all,
    select_for_unseen_pair,
    train_base_model,
)
from .regression import RegressionModel


def _parse_pair(text: str) -> tuple[str, str]:
    parts = text.split(",")
    if len(parts) != 2 or not all(parts):
        raise InputError(f"--pair expects 'SOURCE,TARGET', got {text!r}")
    return parts[0].strip(), parts[1].strip()


def _pair_from_config(config, pair_names):
    domains, vocab_size, n_classes = load_domains(config)
    for name in pair_names:
        if name not in domains:
            raise InputError(f"unknown domain {name!r}; have {sorted(domains)}")
    pair = DomainPair(source=domains[pair_names[0]], target=domains[pair_names[1]])
    return pair, domains, vocab_size, n_classes


def cmd_gen_data(args) -> int:
    with open(args.spec, "r", encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"{args.spec}: not valid JSON: {exc}") from exc
    try:
        spec = ShiftSpec(**obj)
    except TypeError as exc:
        raise DataFormatError(f"{args.spec}: bad shift spec: {exc}") from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    schema = synthetic_schema(spec)
    domains = generate(spec)
    for dom in domains:
        for split_name, examples in (
            ("train", dom.labeled_train),
            ("unlabeled", dom.unlabeled),
            ("dev", dom.held_out),
            ("test", dom.test),
        ):
            write_jsonl(out / f"{dom.name}.{split_name}.jsonl", examples, dom.name, schema)
    meta = {
        "vocab": [f"w{i}" for i in range(1, spec.vocab_size)],
        "labels": [f"c{i}" for i in range(spec.n_classes)],
        "n_domains": spec.n_domains,
    }
    with open(out / "meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {len(domains)} domains to {out}")
    return 0


def cmd_train_base(args) -> int:
    config = load_config(args.config, output_dir=args.out, jobs=args.jobs, seed=args.seed)
    names = _parse_pair(args.pair)
    pair, _, vocab_size, n_classes = _pair_from_config(config, names)
    model = train_base_model(config, pair.source, vocab_size, n_classes)
    pair_dir = _pair_dir(Path(config.output_dir), pair.pair_id)
    pair_dir.mkdir(parents=True, exist_ok=True)
    path = pair_dir / "base_model.bin"
    save_model(model, path)
    final_loss = model.loss_trace[-1] if model.loss_trace else float("nan")
    print(f"trained base model on {pair.source.name}: final loss {final_loss:.4f}")
    print(f"saved to {path}")
    return 0


def cmd_compress(args) -> int:
    config = load_config(args.config, output_dir=args.out, jobs=args.jobs, seed=args.seed)
    if args.sizes:
        sizes = tuple(int(s) for s in args.sizes.split(","))
        config = dataclasses.replace(config, removal_sizes=sizes)
    if args.count:
        config = dataclasses.replace(config, candidates_per_size=args.count)
    names = _parse_pair(args.pair)
    pair, _, vocab_size, n_classes = _pair_from_config(config, names)
    base = train_base_model(config, pair.source, vocab_size, n_classes)
    out_dir = Path(config.output_dir)
    pair_dir = _pair_dir(out_dir, pair.pair_id)
    pair_dir.mkdir(parents=True, exist_ok=True)
    save_model(base, pair_dir / "base_model.bin")
    records, entry = _compute_and_persist_pair(config, pair, base, out_dir, measure_test_f1=True)
    print(f"computed {len(records)} candidate records for {pair.pair_id}")
    if entry["failures"]:
        print(f"{len(entry['failures'])} candidates failed:")
        for failure in entry["failures"]:
            print(f"  {failure['spec']}: {failure['error']}")
    print(f"records: {out_dir / entry['records']}")
    return 0


def _load_record_files(pattern):
    paths = sorted(Path(p) for p in glob.glob(pattern, recursive=True))
    if not paths:
        raise InputError(f"no record files match {pattern!r}")
    records = []
    for path in paths:
        records.extend(read_records(path))
    return records, paths


def cmd_fit_selector(args) -> int:
    records, paths = _load_record_files(args.records)
    records = [r for r in records if r.target_f1 is not None]
    if not records:
        raise InputError("no records with target F1 found")
    model = fit_selector(records, alpha=args.alpha)
    model.save(args.out)
    print(f"fit on {len(records)} records from {len(paths)} files")
    print(f"adjusted R^2 = {model.adjusted_r2:.4f}")
    print(f"{'term':<16}{'beta':>12}{'p':>12}{'dR2':>10}")
    for term in model.selected_terms:
        print(f"{term:<16}{model.coef[term]:>12.4f}{model.p[term]:>12.2e}{model.delta_r2[term]:>10.4f}")
    print(f"{'const':<16}{model.intercept:>12.4f}{'':>12}{'':>10}")
    print(f"selector written to {args.out}")
    return 0


def cmd_select(args) -> int:
    config = load_config(args.config, output_dir=args.out, jobs=args.jobs, seed=args.seed)
    selector = RegressionModel.load(args.selector)
    names = _parse_pair(args.pair)
    pair, _, vocab_size, n_classes = _pair_from_config(config, names)
    result = select_for_unseen_pair(config, pair, selector, vocab_size, n_classes)
    print(f"pair {pair.pair_id}: chose {result.chosen.to_json()}")
    print(f"target label reads during selection: {result.target_label_reads}")
    print(f"{'rank':<6}{'spec':<20}{'predicted':>12}")
    for i, (spec, pred) in enumerate(result.ranked, start=1):
        print(f"{i:<6}{spec.to_json():<20}{pred:>12.4f}")
    return 0


def cmd_evaluate(args) -> int:
    config = load_config(args.config, output_dir=args.out, jobs=args.jobs, seed=args.seed)
    chosen = CandidateSpec.from_json(args.chosen)
    names = _parse_pair(args.pair)
    pair, _, vocab_size, n_classes = _pair_from_config(config, names)
    base = train_base_model(config, pair.source, vocab_size, n_classes)
    computation = compute_pair(
        config, pair, base, measure_dev_f1=False, measure_test_f1=False, keep_models=True
    )
    report = evaluate_selection(chosen, computation.candidates, pair.target.test)
    naive = naive_choice(computation.records)
    naive_report = evaluate_selection(naive, computation.candidates, pair.target.test)
    print(f"pair {pair.pair_id}: {report.n_candidates} candidates")
    print(f"chosen {chosen.to_json()}: test F1 {report.chosen_f1:.4f}")
    print(f"oracle best {report.best.to_json()}: test F1 {report.best_f1:.4f}")
    print(f"regret {report.regret:.4f}, rank {report.rank}/{report.n_candidates}")
    print(f"naive ({naive.to_json()}): regret {naive_report.regret:.4f}")
    return 0


def cmd_analyze(args) -> int:
    records, paths = _load_record_files(args.records)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n_layers = args.layers

    # oracle-best specs per pair: prefer target test scores when present
    from .pipeline import read_test_scores

    best_by_pair: dict[str, CandidateSpec] = {}
    best_by_pair_size: dict[tuple[str, int], tuple[float, CandidateSpec]] = {}
    scores_by_pair = {}
    for path in paths:
        scores_path = path.parent / "test_scores.csv"
        if scores_path.exists():
            pair_id = path.parent.name
            scores_by_pair[pair_id] = read_test_scores(scores_path)
    by_pair: dict[str, list] = {}
    for rec in records:
        by_pair.setdefault(rec.pair_id, []).append(rec)
    for pair_id, recs in sorted(by_pair.items()):
        scores = scores_by_pair.get(pair_id)

        def score_of(rec):
            if scores is not None and rec.spec in scores:
                return scores[rec.spec]
            if rec.target_f1 is None:
                raise InputError(f"record {pair_id}/{rec.spec.to_json()} has no target score")
            return rec.target_f1

        best = max(recs, key=lambda r: (score_of(r), r.spec.removed))
        best_by_pair[pair_id] = best.spec
        for size in sorted({len(r.spec.removed) for r in recs}):
            sized = [r for r in recs if len(r.spec.removed) == size]
            best_sized = max(sized, key=lambda r: (score_of(r), r.spec.removed))
            best_by_pair_size[(pair_id, size)] = (score_of(best_sized), best_sized.spec)

    overall = layer_frequency(list(best_by_pair.values()), n_layers)
    by_size: dict[int, np.ndarray] = {}
    for size in sorted({s for _, s in best_by_pair_size}):
        specs = [spec for (pid, sz), (_, spec) in best_by_pair_size.items() if sz == size]
        by_size[size] = layer_frequency(specs, n_layers)
    write_layer_frequency_long(out / "layer_frequency.csv", by_size)

    coefs = layer_importance_regression(records, n_layers)
    with open(out / "layer_importance.csv", "w", encoding="utf-8") as fh:
        fh.write("layer,avg_beta,removed_in_best_fraction\n")
        for layer in range(1, n_layers + 1):
            beta = coefs.get(layer)
            removed_frac = 1.0 - overall[layer - 1]
            fh.write(f"{layer},{'' if beta is None else repr(beta)},{repr(float(removed_frac))}\n")

    common = sorted(coefs)
    betas = [coefs[i] for i in common]
    removal = [1.0 - overall[i - 1] for i in common]
    rho = spearman(betas, removal)
    with open(out / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(
            {
                "n_records": len(records),
                "n_pairs": len(by_pair),
                "spearman_beta_vs_removed_in_best": rho,
                "layer_frequency_overall": [float(v) for v in overall],
            },
            fh,
            indent=2,
            sort_keys=True,
        )
        fh.write("\n")
    print(f"analyzed {len(records)} records across {len(by_pair)} pairs")
    print("layer retention frequency in oracle-best candidates:")
    for layer in range(1, n_layers + 1):
        print(f"  layer {layer}: {overall[layer - 1]:.3f}")
    print(f"spearman(removal coefficient, removal rate in best) = {rho:.3f}")
    print(f"outputs in {out}")
    return 0


def cmd_run_all(args) -> int:
    config = load_config(args.config, output_dir=args.out, jobs=args.jobs, seed=args.seed)
    manifest = run_all(config)
    print(f"run complete: {len(manifest['pairs'])} pairs, {len(manifest['folds'])} folds")
    regrets = []
    for fold in manifest["folds"]:
        print(
            f"fold {fold['index']}: test domains {fold['test_domains']}, "
            f"adjusted R^2 {fold['adjusted_r2']:.3f}, terms {fold['selected_terms']}"
        )
        for sel in fold["selections"]:
            regrets.append(sel["regret"])
            print(
                f"  {sel['pair']}: chose {sel['chosen']} "
                f"(rank {sel['rank']}/{sel['n_candidates']}, regret {sel['regret']:.4f}, "
                f"naive regret {sel['naive_regret']:.4f})"
            )
    if regrets:
        print(f"mean regret {float(np.mean(regrets)):.4f} over {len(regrets)} test pairs")
    print(f"manifest: {Path(config.output_dir) / 'manifest.json'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="prunewise",
        description=(
            "Compress a layer-stack classifier by removing layer subsets and pick "
            "the candidate expected to do best on an unseen target domain."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="experiment config JSON")
        p.add_argument("--out", default=None, help="override output directory")
        p.add_argument("--jobs", type=int, default=None, help="candidate-level parallelism")
        p.add_argument("--seed", type=int, default=None, help="override the experiment seed")

    p = sub.add_parser("gen-data", help="generate synthetic domains as JSONL")
    p.add_argument("--spec", required=True, help="shift spec JSON file")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-base", help="train the uncompressed model for a pair's source")
    p.add_argument("--pair", required=True, help="SOURCE,TARGET domain names")
    add_common(p)
    p.set_defaults(func=cmd_train_base)

    p = sub.add_parser("compress", help="build, fine-tune and measure all candidates for a pair")
    p.add_argument("--pair", required=True)
    p.add_argument("--sizes", default=None, help="comma-separated removal sizes, e.g. 2,3,4")
    p.add_argument("--count", type=int, default=None, help="candidates per size")
    add_common(p)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("fit-selector", help="fit the stepwise selector on record CSVs")
    p.add_argument("--records", required=True, help="glob for records.csv files")
    p.add_argument("--alpha", type=float, default=0.01, help="entry p-value threshold")
    p.add_argument("--out", required=True, help="selector JSON output path")
    p.set_defaults(func=cmd_fit_selector)

    p = sub.add_parser("select", help="choose a candidate for an unseen pair (no target labels)")
    p.add_argument("--pair", required=True)
    p.add_argument("--selector", required=True, help="selector JSON from fit-selector")
    add_common(p)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("evaluate", help="oracle regret/rank of a chosen spec on a pair")
    p.add_argument("--pair", required=True)
    p.add_argument("--chosen", required=True, help='candidate spec as JSON, e.g. "[2,3]"')
    add_common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("analyze", help="layer frequency/importance analyses over records")
    p.add_argument("--records", required=True, help="glob for records.csv files")
    p.add_argument("--layers", type=int, default=6, help="layer count of the base stack")
    p.add_argument("--out", default="analysis", help="output directory")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("run-all", help="full pipeline with fold splits; resumes from manifest")
    add_common(p)
    p.set_defaults(func=cmd_run_all)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (InputError, DataFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (SingularityError, InsufficientDataError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 4
    except TrainingDivergence as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 5
    except PrunewiseError as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
