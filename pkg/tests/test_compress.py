from itertools import chain, combinations

import numpy as np
import pytest

from prunewise.compress import (
    CandidateSpec,
    build_candidate,
    finetune_candidate,
    plan_reconnection,
    sample_candidate_specs,
    trainable_parameter_count,
)
from prunewise.errors import InputError
from prunewise.net import (
    Example,
    TrainConfig,
    forward,
    init_model,
    models_equal,
    predict_proba,
    train,
)

from oracles import consecutive_runs, scalar_forward


def all_nonempty_subsets(k):
    items = range(1, k + 1)
    return chain.from_iterable(combinations(items, r) for r in range(1, k + 1))


# ---------------------------------------------------------------- planning

def test_plan_matches_worked_twelve_layer_example():
    plan = plan_reconnection(CandidateSpec(removed=(2, 3, 7)), 12)
    assert plan.components == ((1,), (4, 5, 6), (8, 9, 10, 11, 12))
    assert plan.junctions == ((1, 4), (6, 8))
    assert plan.unfrozen_layers == frozenset({1, 6})
    assert plan.embedding_unfrozen is False


def test_plan_first_layer_removed_unfreezes_embedding():
    plan = plan_reconnection(CandidateSpec(removed=(1,)), 12)
    assert plan.components == (tuple(range(2, 13)),)
    assert plan.junctions == ()
    assert plan.unfrozen_layers == frozenset()
    assert plan.embedding_unfrozen is True


def test_plan_last_layer_removed_unfreezes_new_final_layer():
    plan = plan_reconnection(CandidateSpec(removed=(6,)), 6)
    assert plan.components == ((1, 2, 3, 4, 5),)
    assert plan.junctions == ()
    assert plan.unfrozen_layers == frozenset({5})
    assert plan.embedding_unfrozen is False


def test_plan_rejects_removing_all_layers():
    with pytest.raises(InputError):
        plan_reconnection(CandidateSpec(removed=(1, 2, 3)), 3)


def test_plan_rejects_out_of_range_layer():
    with pytest.raises(InputError):
        plan_reconnection(CandidateSpec(removed=(7,)), 6)


def test_candidate_spec_validation_and_json():
    with pytest.raises(InputError):
        CandidateSpec(removed=())
    with pytest.raises(InputError):
        CandidateSpec(removed=(3, 2))
    with pytest.raises(InputError):
        CandidateSpec(removed=(0,))
    spec = CandidateSpec(removed=(2, 3, 7))
    assert spec.to_json() == "[2, 3, 7]"
    assert CandidateSpec.from_json("[7, 3, 2]") == spec


def test_plan_matches_bruteforce_run_finder_for_all_k8_subsets():
    k = 8
    checked = 0
    for subset in all_nonempty_subsets(k):
        spec = CandidateSpec(removed=tuple(subset))
        if len(subset) == k:
            with pytest.raises(InputError):
                plan_reconnection(spec, k)
            checked += 1
            continue
        plan = plan_reconnection(spec, k)
        runs = consecutive_runs(set(subset), k)
        assert [list(r) for r in plan.components] == runs
        # junctions connect run boundaries in order
        assert list(plan.junctions) == [
            (runs[i][-1], runs[i + 1][0]) for i in range(len(runs) - 1)
        ]
        expected_unfrozen = {p for p, _ in plan.junctions}
        if k in subset:
            expected_unfrozen.add(runs[-1][-1])
        assert plan.unfrozen_layers == frozenset(expected_unfrozen)
        assert plan.embedding_unfrozen == (1 in subset)
        # surviving runs partition {1..k} minus the removal
        assert list(plan.surviving) == [i for i in range(1, k + 1) if i not in subset]
        checked += 1
    assert checked == 2**k - 1


# ---------------------------------------------------------------- building

def trained_base(seed=0, vocab=30, dim=8, classes=2, layers=6):
    rng = np.random.default_rng(seed)
    data = []
    for _ in range(60):
        label = int(rng.integers(0, classes))
        lo, hi = (1, vocab // 2) if label == 0 else (vocab // 2, vocab)
        tokens = tuple(int(t) for t in rng.integers(lo, hi, size=6))
        data.append(Example(tokens=tokens, label=label))
    base = init_model(vocab, dim, classes, layers, seed=seed)
    return train(base, data, TrainConfig(epochs=2, seed=seed)), data


def test_build_candidate_copies_surviving_tensors_bit_identical():
    base, _ = trained_base()
    spec = CandidateSpec(removed=(2, 5))
    cand = build_candidate(base, spec, plan_reconnection(spec, 6))
    assert cand.active_layers == (1, 3, 4, 6)
    for i in (1, 3, 4, 6):
        assert np.array_equal(cand.params[f"layer{i}.weight"], base.params[f"layer{i}.weight"])
    assert np.array_equal(cand.params["decoder.weight"], base.params["decoder.weight"])
    assert np.array_equal(cand.params["embedding"], base.params["embedding"])
    assert np.array_equal(cand.params["decoder.attention"], np.zeros(4))


def test_build_candidate_freeze_mask_is_exactly_plan_plus_decoder():
    base, _ = trained_base()
    spec = CandidateSpec(removed=(1, 4))
    plan = plan_reconnection(spec, 6)
    cand = build_candidate(base, spec, plan)
    assert cand.freeze_mask["embedding"] is False  # layer 1 removed
    assert cand.freeze_mask["layer3.weight"] is False  # junction before gap at 4
    assert cand.freeze_mask["layer2.weight"] is True
    assert cand.freeze_mask["layer5.weight"] is True
    assert cand.freeze_mask["layer6.weight"] is True
    assert cand.freeze_mask["decoder.attention"] is False
    assert cand.freeze_mask["decoder.weight"] is False
    assert cand.freeze_mask["decoder.bias"] is False


def test_build_candidate_forward_matches_scalar_oracle():
    base, data = trained_base()
    spec = CandidateSpec(removed=(2, 3, 5))
    cand = build_candidate(base, spec, plan_reconnection(spec, 6))
    for ex in data[:10]:
        got = forward(cand, ex)
        want = scalar_forward(cand, ex.tokens)
        assert np.max(np.abs(got - np.array(want))) < 1e-10


def test_build_candidate_matches_from_scratch_stack():
    """Reconnection equals a fresh model holding only the surviving layers."""
    base, data = trained_base()
    spec = CandidateSpec(removed=(1, 4, 6))
    cand = build_candidate(base, spec, plan_reconnection(spec, 6))
    surviving = (2, 3, 5)
    scratch = init_model(base.vocab_size, base.dim, base.n_classes, len(surviving), seed=9)
    scratch.params["embedding"] = base.params["embedding"].copy()
    for new_idx, old_idx in enumerate(surviving, start=1):
        scratch.params[f"layer{new_idx}.weight"] = base.params[f"layer{old_idx}.weight"].copy()
        scratch.params[f"layer{new_idx}.bias"] = base.params[f"layer{old_idx}.bias"].copy()
    scratch.params["decoder.attention"] = np.zeros(len(surviving))
    scratch.params["decoder.weight"] = base.params["decoder.weight"].copy()
    scratch.params["decoder.bias"] = base.params["decoder.bias"].copy()
    a = predict_proba(cand, data)
    b = predict_proba(scratch, data)
    assert np.max(np.abs(a - b)) < 1e-12


def test_build_candidate_trainable_count_formula():
    base, _ = trained_base(dim=8, classes=2)
    d, L = 8, 2
    for removed in [(1, 2, 3), (1,), (6,), (1, 6), (2, 4)]:
        spec = CandidateSpec(removed=removed)
        plan = plan_reconnection(spec, 6)
        cand = build_candidate(base, spec, plan)
        n_surv = 6 - len(spec.removed)
        expected = len(plan.unfrozen_layers) * (d * d + d) + (n_surv + L * d + L)
        if plan.embedding_unfrozen:
            expected += base.vocab_size * d
        assert trainable_parameter_count(cand) == expected


def test_build_candidate_rejects_mismatched_plan():
    base, _ = trained_base()
    plan = plan_reconnection(CandidateSpec(removed=(2,)), 6)
    with pytest.raises(InputError):
        build_candidate(base, CandidateSpec(removed=(3,)), plan)


def test_build_candidate_rejects_compressed_base():
    base, _ = trained_base()
    spec = CandidateSpec(removed=(2,))
    cand = build_candidate(base, spec, plan_reconnection(spec, 6))
    with pytest.raises(InputError):
        build_candidate(cand, spec, plan_reconnection(spec, 5))


# ---------------------------------------------------------------- fine-tuning

def test_finetune_touches_only_unfrozen_tensors():
    base, data = trained_base()
    rng = np.random.default_rng(17)
    for trial in range(8):
        size = int(rng.integers(1, 5))
        removed = tuple(sorted(int(v) + 1 for v in rng.choice(6, size=size, replace=False)))
        spec = CandidateSpec(removed=removed)
        plan = plan_reconnection(spec, 6)
        cand = build_candidate(base, spec, plan)
        tuned = finetune_candidate(cand, data, TrainConfig(epochs=1, seed=trial))
        for name, frozen in cand.freeze_mask.items():
            if frozen:
                assert np.array_equal(tuned.params[name], cand.params[name]), name
                # and bit-identical to the base tensor it came from
                if name in base.params:
                    assert np.array_equal(tuned.params[name], base.params[name])


def test_finetune_zero_epochs_leaves_candidate_unchanged():
    base, data = trained_base()
    spec = CandidateSpec(removed=(3,))
    cand = build_candidate(base, spec, plan_reconnection(spec, 6))
    tuned = finetune_candidate(cand, data, TrainConfig(epochs=0, seed=0))
    assert models_equal(cand, tuned)


# ---------------------------------------------------------------- sampling

def test_sample_specs_counts_and_uniqueness():
    specs = sample_candidate_specs(12, [4, 6, 8], 100, seed=0)
    assert len(specs) == 300
    by_size = {}
    for s in specs:
        by_size.setdefault(len(s.removed), set()).add(s.removed)
    assert {k: len(v) for k, v in by_size.items()} == {4: 100, 6: 100, 8: 100}


def test_sample_specs_exhaustive_when_few_subsets():
    specs = sample_candidate_specs(6, [5], 100, seed=1)
    assert len(specs) == 6
    assert sorted(s.removed for s in specs) == sorted(combinations(range(1, 7), 5))


def test_sample_specs_reproducible():
    a = sample_candidate_specs(10, [3, 5], 20, seed=42)
    b = sample_candidate_specs(10, [3, 5], 20, seed=42)
    assert a == b


def test_sample_specs_rejects_impossible_size():
    with pytest.raises(InputError):
        sample_candidate_specs(6, [6], 10, seed=0)
    with pytest.raises(InputError):
        sample_candidate_specs(6, [0], 10, seed=0)
