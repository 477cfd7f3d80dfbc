from __future__ import annotations

import json
import os
from pathlib import Path

import pytest

from coldrank.cli import main

REPORTS = Path(__file__).parent / "fixtures" / "reports"


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    assert main(["dataset", "synth", "--seed", "3", "--n-movies", "200", "--out", str(out)]) == 0
    return out


def _digest(text: str) -> str:
    return next(line for line in text.splitlines() if line.startswith("digest:"))


def test_synth_is_reproducible(tmp_path, capsys):
    assert main(["dataset", "synth", "--seed", "5", "--n-movies", "60", "--out", str(tmp_path / "a")]) == 0
    first = capsys.readouterr().out
    assert main(["dataset", "synth", "--seed", "5", "--n-movies", "60", "--out", str(tmp_path / "b")]) == 0
    second = capsys.readouterr().out
    assert _digest(first) == _digest(second)
    assert "movies: 60" in first
    assert (tmp_path / "a" / "catalog.jsonl").read_bytes() == (tmp_path / "b" / "catalog.jsonl").read_bytes()
    main(["dataset", "synth", "--seed", "6", "--n-movies", "60", "--out", str(tmp_path / "c")])
    assert _digest(capsys.readouterr().out) != _digest(first)


def test_synth_unwritable_output(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["dataset", "synth", "--out", str(blocker / "sub")]) != 0
    assert "cannot write" in capsys.readouterr().err


def test_synth_config_file(tmp_path, capsys):
    cfg = tmp_path / "gen.json"
    cfg.write_text(json.dumps({"n_movies": 40, "span_days": 70}))
    assert main(["dataset", "synth", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 0
    assert "movies: 40" in capsys.readouterr().out
    cfg.write_text(json.dumps({"n_movies": 1}))
    assert main(["dataset", "synth", "--config", str(cfg), "--out", str(tmp_path / "e")]) == 1


def test_validate(dataset, capsys):
    assert main(["dataset", "validate", str(dataset)]) == 0
    out = capsys.readouterr().out
    assert "movies: 200" in out
    n_cases = int(next(l for l in out.splitlines() if l.startswith("cases:")).split()[1])
    assert n_cases > 5


def test_validate_missing_dataset(tmp_path, capsys):
    assert main(["dataset", "validate", str(tmp_path / "nope")]) == 2


def test_validate_corrupt_dataset(tmp_path, dataset):
    broken = tmp_path / "broken"
    broken.mkdir()
    (broken / "catalog.jsonl").write_text((dataset / "catalog.jsonl").read_text())
    (broken / "observations.jsonl").write_text('{"movie_id": "m0000"\n')
    assert main(["dataset", "validate", str(broken)]) == 2


def test_rank_oracle_to_file(dataset, tmp_path, capsys):
    out = tmp_path / "pred.jsonl"
    assert main(["rank", str(dataset), "--tier", "V2", "--out", str(out)]) == 0
    records = [json.loads(l) for l in out.read_text().splitlines()]
    assert records and all(r["strategy"] == "listwise" for r in records)
    assert [r["case_id"] for r in records] == sorted(r["case_id"] for r in records)
    assert records[0]["provenance"]["tier"] == "V2"


@pytest.mark.parametrize("strategy", ["random", "pe", "pairwise"])
def test_rank_other_strategies(dataset, capsys, strategy):
    args = ["rank", str(dataset), "--strategy", strategy, "--tier", "V1"]
    assert main(args) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert all(json.loads(l)["strategy"] == strategy for l in lines)


def test_eval_writes_report_and_matches_own_table(dataset, tmp_path, capsys):
    out = tmp_path / "run"
    code = main(["eval", str(dataset), "--tier", "V1,V4", "--strategy", "listwise", "--strategy", "random",
                 "--trials", "2", "--baseline", "pe", "--out", str(out), "--cache-dir", str(tmp_path / "c")])
    assert code == 0
    printed = capsys.readouterr().out
    for name in ("report.json", "report.txt", "manifest.json", "config.json", "predictions.jsonl", "skipped.jsonl"):
        assert (out / name).exists()
    assert printed == (out / "report.txt").read_text()
    report = json.loads((out / "report.json").read_text())
    assert [(c["model_id"], c["tier"]) for c in report["cells"]] == [
        ("oracle", "V1"), ("oracle", "V4"), ("Random", "-")]
    assert report["cells"][0]["model"]["mean"]["ndcg_at_k"] == 1.0
    assert main(["report", str(out / "report.json")]) == 0
    assert capsys.readouterr().out == printed


def test_eval_unknown_config_key(dataset, tmp_path):
    cfg = tmp_path / "exp.json"
    cfg.write_text(json.dumps({"n_trails": 3}))
    assert main(["eval", str(dataset), "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1


def test_eval_config_file(dataset, tmp_path, capsys):
    cfg = tmp_path / "exp.json"
    cfg.write_text(json.dumps({"n_trials": 1, "tiers": ["V3"], "baseline": "random", "seed": 9}))
    assert main(["eval", str(dataset), "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    saved = json.loads((tmp_path / "o" / "config.json").read_text())
    assert saved["n_trials"] == 1 and saved["tiers"] == ["V3"] and saved["seed"] == 9
    assert "vs Random" in capsys.readouterr().out


def test_eval_exhausted_backend_exit_3(dataset, tmp_path, monkeypatch):
    # nothing listens on this port; every request fails at the transport layer
    monkeypatch.setenv("COLDRANK_ENDPOINT", "http://127.0.0.1:9/v1")
    import coldrank.llm_backend as lb

    monkeypatch.setattr(lb.time, "sleep", lambda s: None)
    code = main(["eval", str(dataset), "--backend", "http", "--model", "m", "--trials", "1",
                 "--tier", "V1", "--retries", "0", "--baseline", "random", "--out", str(tmp_path / "o")])
    assert code == 3
    report = json.loads((tmp_path / "o" / "report.json").read_text())
    assert report["cells"][0]["status"] == "FAILED"
    assert "FAILED" in (tmp_path / "o" / "report.txt").read_text()


def test_http_backend_without_endpoint(dataset, tmp_path, monkeypatch):
    monkeypatch.delenv("COLDRANK_ENDPOINT", raising=False)
    assert main(["eval", str(dataset), "--backend", "http", "--out", str(tmp_path / "o")]) == 1


def test_report_merges_fixture_tables(capsys):
    paths = sorted(str(p) for p in REPORTS.glob("*.json"))
    assert main(["report", *paths]) == 0
    out = capsys.readouterr().out
    assert out.startswith("Performance improvement (%) vs PE-text-embedding V4")
    row = next(l for l in out.splitlines() if l.startswith("Llama-405B") and " V4 " in l)
    assert row.split()[2:] == ["**28.33**", "**22.46**", "**12.90**", "**31.42**"]
    assert len([l for l in out.splitlines() if l.startswith("Llama")]) == 12


def test_report_errors(tmp_path, capsys):
    assert main(["report"]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"schema_version": 99, "cells": []}))
    assert main(["report", str(bad)]) == 1
    assert "schema_version" in capsys.readouterr().err


def test_cache_purge(dataset, tmp_path, capsys):
    cache = tmp_path / "cache"
    main(["rank", str(dataset), "--cache-dir", str(cache), "--out", str(tmp_path / "p.jsonl")])
    n = len(os.listdir(cache))
    assert n > 0
    capsys.readouterr()
    assert main(["cache", "purge", "--cache-dir", str(cache)]) == 0
    assert f"removed {n} cache entries" in capsys.readouterr().out
    assert os.listdir(cache) == []


def test_usage_errors_exit_1(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["rank"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main(["eval", "x", "--out", "y", "--backend", "gpt"])
    assert exc.value.code == 1


def test_bad_tier_is_config_error(dataset, tmp_path):
    assert main(["eval", str(dataset), "--tier", "V9", "--out", str(tmp_path / "o")]) == 1
