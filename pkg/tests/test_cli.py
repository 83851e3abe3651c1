import json
from pathlib import Path

import pytest

from prunewise.cli import main
from prunewise.data import JsonlSchema, load_jsonl
from prunewise.pipeline import load_manifest, manifest_without_timings

from test_pipeline import tiny_config


def write_config(tmp_path, **kw):
    cfg = tiny_config(tmp_path / "out", **kw)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg.to_json_dict()))
    return path, cfg


# ---------------------------------------------------------------- basics

def test_usage_error_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["no-such-command"])
    assert exc.value.code == 2


def test_missing_config_file_exits_3(tmp_path, capsys):
    code = main(["train-base", "--pair", "a,b", "--config", str(tmp_path / "nope.json")])
    assert code == 3
    assert "error" in capsys.readouterr().err


def test_unknown_domain_exits_3(tmp_path, capsys):
    config_path, _ = write_config(tmp_path)
    code = main(["train-base", "--pair", "nope,dom1", "--config", str(config_path)])
    assert code == 3


# ---------------------------------------------------------------- gen-data

def test_gen_data_writes_jsonl_and_meta(tmp_path):
    spec_path = tmp_path / "spec.json"
    spec_path.write_text(json.dumps({
        "vocab_size": 40, "n_classes": 2, "n_domains": 2,
        "n_train": 20, "n_unlabeled": 10, "n_dev": 8, "n_test": 8, "seed": 1,
    }))
    out = tmp_path / "data"
    assert main(["gen-data", "--spec", str(spec_path), "--out", str(out)]) == 0
    files = sorted(p.name for p in out.iterdir())
    assert "meta.json" in files
    assert "dom0.train.jsonl" in files and "dom1.test.jsonl" in files
    meta = json.loads((out / "meta.json").read_text())
    schema = JsonlSchema(
        vocab={w: i + 1 for i, w in enumerate(meta["vocab"])},
        labels={lab: i for i, lab in enumerate(meta["labels"])},
    )
    ds = load_jsonl(out / "dom0.train.jsonl", schema)
    assert len(ds.labeled_train) == 20
    ds_unlabeled = load_jsonl(out / "dom0.unlabeled.jsonl", schema)
    assert len(ds_unlabeled.unlabeled) == 10


def test_gen_data_bad_spec_exits_3(tmp_path, capsys):
    spec_path = tmp_path / "spec.json"
    spec_path.write_text(json.dumps({"vocab_size": 40, "bogus_field": 1}))
    assert main(["gen-data", "--spec", str(spec_path), "--out", str(tmp_path / "d")]) == 3


# ---------------------------------------------------------------- pipeline commands

def test_full_cli_flow(tmp_path, capsys):
    config_path, cfg = write_config(tmp_path)

    assert main(["train-base", "--pair", "dom0,dom1", "--config", str(config_path)]) == 0
    assert (tmp_path / "out" / "pairs" / "dom0__dom1" / "base_model.bin").exists()

    assert main(["compress", "--pair", "dom0,dom1", "--config", str(config_path)]) == 0
    records_path = tmp_path / "out" / "pairs" / "dom0__dom1" / "records.csv"
    assert records_path.exists()
    assert main(["compress", "--pair", "dom2,dom1", "--config", str(config_path)]) == 0

    selector_path = tmp_path / "selector.json"
    pattern = str(tmp_path / "out" / "pairs" / "*" / "records.csv")
    assert main(["fit-selector", "--records", pattern, "--out", str(selector_path)]) == 0
    assert selector_path.exists()

    assert main([
        "select", "--pair", "dom0,dom2", "--config", str(config_path),
        "--selector", str(selector_path),
    ]) == 0
    out = capsys.readouterr().out
    assert "chose [" in out
    assert "target label reads during selection: 0" in out

    chosen = out.split("chose ", 1)[1].splitlines()[0].strip()
    assert main([
        "evaluate", "--pair", "dom0,dom2", "--config", str(config_path),
        "--chosen", chosen,
    ]) == 0
    out = capsys.readouterr().out
    assert "regret" in out

    assert main([
        "analyze", "--records", pattern, "--layers", "6",
        "--out", str(tmp_path / "analysis"),
    ]) == 0
    assert (tmp_path / "analysis" / "layer_frequency.csv").exists()
    assert (tmp_path / "analysis" / "layer_importance.csv").exists()
    assert (tmp_path / "analysis" / "summary.json").exists()


def test_select_with_missing_term_exits_3(tmp_path, capsys):
    config_path, _ = write_config(tmp_path)
    selector_path = tmp_path / "bad_selector.json"
    selector_path.write_text(json.dumps({
        "alpha": 0.01, "n": 10, "r2": 0.0, "adjusted_r2": 0.0,
        "candidate_terms": [],
        "intercept": {"beta": 0.0, "se": 0.0, "t": 0.0, "p": 1.0},
        "terms": [{"name": "not_a_feature", "beta": 1.0, "se": 0.0, "t": 0.0,
                   "p": 1.0, "delta_r2": 0.0}],
    }))
    code = main([
        "select", "--pair", "dom0,dom1", "--config", str(config_path),
        "--selector", str(selector_path),
    ])
    assert code == 3


def test_evaluate_oracle_choice_prints_zero_regret(tmp_path, capsys):
    config_path, _ = write_config(tmp_path, n_domains=2)
    # find the oracle best via a first evaluate call on any spec
    assert main(["compress", "--pair", "dom0,dom1", "--config", str(config_path)]) == 0
    capsys.readouterr()
    code = main(["evaluate", "--pair", "dom0,dom1", "--config", str(config_path),
                 "--chosen", "[2, 3]"])
    assert code == 0
    out = capsys.readouterr().out
    best = out.split("oracle best ", 1)[1].split(":", 1)[0]
    code = main(["evaluate", "--pair", "dom0,dom1", "--config", str(config_path),
                 "--chosen", best])
    out = capsys.readouterr().out
    assert code == 0
    assert "regret 0.0000" in out


def test_run_all_cli_and_seed_determinism(tmp_path, capsys):
    config_path, cfg = write_config(tmp_path, n_domains=4)
    assert main(["run-all", "--config", str(config_path)]) == 0
    man_1 = load_manifest(tmp_path / "out" / "manifest.json")
    out_b = tmp_path / "out_b"
    assert main(["run-all", "--config", str(config_path), "--out", str(out_b)]) == 0
    man_2 = load_manifest(out_b / "manifest.json")
    a = manifest_without_timings(man_1)
    b = manifest_without_timings(man_2)
    a["config"]["output_dir"] = b["config"]["output_dir"] = "X"
    assert a == b
