"""Configuration validation, output layout, and the console entry point."""

import json
import math

import pytest
import yaml

from branchkit.cli import (
    _build_parser,
    _merge_config,
    config_digest,
    main,
    run,
    validate_config,
)
from branchkit.errors import ConfigError


def test_validate_fills_documented_defaults():
    norm, errors = validate_config(
        {"experiment": "lln", "model": "two-type-m2", "seed": 1})
    assert errors == []
    assert norm["cap"] == 10_000_000
    assert norm["replicates"] == 100
    assert norm["out"] == "branchkit-out"
    assert norm["environment"] == {"kind": "constant", "token": 0}
    assert norm["params"]["ladder"] == [6, 10, 14]
    assert norm["params"]["f"] == {"kind": "identity"}
    assert norm["params"]["fn"] == {"kind": "id"}
    assert norm["params"]["x0"] == 0


def test_digest_ignores_out_and_tracks_seed():
    base = {"experiment": "lln", "model": "two-type-m2", "seed": 1}
    here, _ = validate_config(base)
    there, _ = validate_config(dict(base, out="elsewhere"))
    other, _ = validate_config(dict(base, seed=2))
    assert config_digest(here) == config_digest(there)
    assert config_digest(here) != config_digest(other)
    assert len(config_digest(here)) == 16


def test_error_aggregation_reports_every_field():
    _, errors = validate_config(
        {"experiment": "local-density",
         "model": {"name": "kimmel", "lambda": -1},
         "replicates": 0,
         "params": {"bogus": 3}})
    assert len(errors) == 3
    assert any(e.startswith("model.lambda:") for e in errors)
    assert any(e.startswith("replicates:") for e in errors)
    assert any(e.startswith("params.bogus:") and "a_n" in e for e in errors)


def test_documented_density_invocation_parses():
    argv = ["local-density", "--model", "kimmel", "--lambda", "1.4",
            "--a-n", "const:1", "--ladder", "10,20,30,40",
            "--replicates", "1000"]
    args = _build_parser().parse_args(argv)
    norm, errors = validate_config(_merge_config(args))
    assert errors == []
    assert norm["params"]["a_n"] == ["const", 1.0]
    assert norm["params"]["ladder"] == [10, 20, 30, 40]
    assert norm["replicates"] == 1000
    assert norm["model"] == {"name": "kimmel", "lambda": 1.4}


def test_fn_rescaling_validation():
    base = {"experiment": "lln", "model": "two-type-m2", "seed": 1}
    for text in ("affine:2,1", "affine(2,1)"):
        norm, errors = validate_config(
            dict(base, params={"fn": text, "ladder": [2, 4]}))
        assert errors == []
        assert norm["params"]["fn"] == {"kind": "affine", "a": 2.0, "b": 1.0}
    # log of the type-0 atom is undefined, so the rescaling is refused
    _, errors = validate_config(dict(base, params={"fn": "log-over-n"}))
    assert errors and "positive" in errors[0]
    _, errors = validate_config(dict(base, params={"fn": "bogus"}))
    assert errors and errors[0].startswith("params.fn:")
    positive = {
        "experiment": "lln", "seed": 1,
        "model": {"name": "neutral-gw", "atoms": [1, 2],
                  "chain": [[0.5, 0.5], [0.5, 0.5]],
                  "count": {"kind": "deterministic", "k": 2}},
        "params": {"fn": "log-over-n", "ladder": [2, 4]}}
    norm, errors = validate_config(positive)
    assert errors == []
    assert norm["params"]["fn"] == {"kind": "log-over-n"}


def test_validate_subcommand_writes_nothing(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    rc = main(["validate", "--experiment", "lln", "--model", "two-type-m2",
               "--seed", "1"])
    assert rc == 0
    shown = json.loads(capsys.readouterr().out)
    assert shown["experiment"] == "lln"
    assert len(shown["config_digest"]) == 16
    assert list(tmp_path.iterdir()) == []
    rc = main(["validate", "--experiment", "lln", "--model", "kimmel",
               "--lambda", "1.4"])
    assert rc == 2
    assert "errors" in json.loads(capsys.readouterr().out)
    assert list(tmp_path.iterdir()) == []


def test_run_writes_records_summary_manifest(tmp_path):
    out = tmp_path / "o"
    rc = main(["lln", "--model", "two-type-m2", "--seed", "3",
               "--replicates", "6", "--ladder", "2,4", "--out", str(out)])
    assert rc == 0
    lines = (out / "records.ndjson").read_text().splitlines()
    assert len(lines) == 12
    records = [json.loads(line) for line in lines]
    manifest = json.loads((out / "manifest.json").read_text())
    for rec in records:
        assert rec["seed"] == 3
        assert rec["config_digest"] == manifest["config_digest"]
    assert manifest["records"] == 12
    assert manifest["config"]["seed"] == 3
    assert manifest["workers"] == 1
    assert manifest["version"]
    csv_lines = (out / "summary.csv").read_text().splitlines()
    assert csv_lines[0] == "key,value"
    keys = [line.split(",", 1)[0] for line in csv_lines[1:]]
    assert keys[:3] == ["experiment", "config_digest", "seed"]
    assert len(csv_lines) - 1 == manifest["summary_rows"]


def test_config_file_flags_take_precedence(tmp_path):
    cfg = tmp_path / "run.yaml"
    cfg.write_text(yaml.safe_dump({
        "experiment": "simulate",
        "model": {"name": "kimmel", "lambda": 1.4},
        "seed": 5, "replicates": 3, "params": {"n": 5}}))
    out = tmp_path / "o"
    rc = main(["simulate", "--config", str(cfg), "--seed", "9",
               "--out", str(out)])
    assert rc == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["seed"] == 9
    assert manifest["config"]["replicates"] == 3
    assert manifest["config"]["model"] == {"name": "kimmel", "lambda": 1.4}
    assert manifest["config"]["params"]["n"] == 5


def test_worker_count_does_not_change_records(tmp_path):
    raw = {"experiment": "simulate",
           "model": {"name": "kimmel", "lambda": 1.4},
           "seed": 11, "replicates": 6, "params": {"n": 6}}
    one = run(dict(raw, out=str(tmp_path / "w1")), workers=1)
    two = run(dict(raw, out=str(tmp_path / "w2")), workers=2)
    assert (one / "records.ndjson").read_bytes() \
        == (two / "records.ndjson").read_bytes()


def test_config_errors_exit_two(capsys):
    # growth needs the exact finite machinery, which the cell model lacks
    rc = main(["growth", "--model", "kimmel", "--lambda", "1.4"])
    assert rc == 2
    err = json.loads(capsys.readouterr().err.splitlines()[-1])
    assert err["error"] == "ConfigError"
    assert err["messages"]
    with pytest.raises(ConfigError):
        run({"experiment": "growth", "model": "kimmel"})


def test_runtime_errors_exit_one(tmp_path, capsys):
    cfg = tmp_path / "run.yaml"
    cfg.write_text(yaml.safe_dump({
        "experiment": "simulate",
        "model": {"name": "neutral-gw", "atoms": [0], "chain": [[1.0]],
                  "count": {"kind": "deterministic", "k": 2}},
        "seed": 1, "replicates": 2, "cap": 500,
        "params": {"n": 30}}))
    rc = main(["simulate", "--config", str(cfg),
               "--out", str(tmp_path / "o")])
    assert rc == 1
    err = json.loads(capsys.readouterr().err.splitlines()[-1])
    assert err["error"] == "PopulationExceededCap"
