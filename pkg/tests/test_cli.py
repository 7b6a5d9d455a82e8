import json
import math

import pytest

from litmine.cli import main
from litmine.pipeline import STAGES

from conftest import write_jsonl
from golden import digest_tree, write_golden_fixture


def run_cli(*argv):
    return main(list(argv))


@pytest.fixture
def golden(tmp_path):
    config = write_golden_fixture(tmp_path / "fixture")
    return config, tmp_path


def read_manifest(run_dir):
    return json.loads((run_dir / "manifest.json").read_text(encoding="utf-8"))


class TestIngestIndex:
    def test_manifest_counts_match_window_formula(self, tmp_path, golden):
        config, _ = golden
        # a separate 100-doc corpus with varying paragraph counts
        rows = [{"doc_id": f"x{i:03d}",
                 "paragraphs": [f"p{j}" for j in range(1 + (i % 12))]}
                for i in range(100)]
        corpus_path = write_jsonl(tmp_path / "big.jsonl", rows)
        cfg_text = config.read_text(encoding="utf-8").replace(
            'path = "corpus.jsonl"', f'path = "{corpus_path}"')
        cfg2 = config.parent / "config_big.toml"
        cfg2.write_text(cfg_text, encoding="utf-8")
        run_dir = tmp_path / "run_big"

        assert run_cli("ingest", "--config", str(cfg2), "--run-dir", str(run_dir)) == 0
        manifest = read_manifest(run_dir)
        counts = manifest["stages"]["ingest"]["counts"]
        assert counts["documents"] == 100
        expected_windows = sum(
            1 if n <= 5 else 1 + math.ceil((n - 5) / 2)
            for n in (1 + (i % 12) for i in range(100)))
        assert counts["windows"] == expected_windows

    def test_missing_tag_file_is_config_exit(self, golden, capsys):
        config, tmp_path = golden
        cfg_text = config.read_text(encoding="utf-8").replace(
            'path = "tags.jsonl"', 'path = "no_such_tags.jsonl"')
        bad = config.parent / "bad.toml"
        bad.write_text(cfg_text, encoding="utf-8")
        assert run_cli("index", "--config", str(bad),
                       "--run-dir", str(tmp_path / "r")) == 2
        assert "no_such_tags.jsonl" in capsys.readouterr().err

    def test_rerun_identical_manifest(self, golden, tmp_path):
        config, _ = golden
        run_a = tmp_path / "a"
        run_b = tmp_path / "b"
        for run_dir in (run_a, run_b):
            assert run_cli("index", "--config", str(config),
                           "--run-dir", str(run_dir)) == 0
        assert (run_a / "manifest.json").read_bytes() == \
               (run_b / "manifest.json").read_bytes()

    def test_malformed_corpus_is_data_exit(self, golden, tmp_path):
        config, _ = golden
        (config.parent / "corpus.jsonl").write_text("{broken\n", encoding="utf-8")
        assert run_cli("ingest", "--config", str(config),
                       "--run-dir", str(tmp_path / "r")) == 3


class TestQuery:
    def test_ranked_hits_printed(self, golden, tmp_path, capsys):
        config, _ = golden
        run_dir = tmp_path / "runq"
        assert run_cli("index", "--config", str(config), "--run-dir", str(run_dir)) == 0
        spec_path = tmp_path / "spec.json"
        spec_path.write_text(json.dumps({
            "entity_groups": [["SmallMolecule"], ["blood-brain barrier"]],
            "semantic_query": "compound crossing the blood brain barrier",
        }), encoding="utf-8")
        capsys.readouterr()
        assert run_cli("query", "--config", str(config), "--run-dir", str(run_dir),
                       "--spec", str(spec_path), "--top-k", "3") == 0
        lines = [json.loads(line) for line in
                 capsys.readouterr().out.strip().splitlines()]
        assert len(lines) == 3
        # the BBB-tagged small-molecule docs are d00..d04
        assert all(hit["doc_id"] in {f"d{i:02d}" for i in range(5)} for hit in lines)
        assert all(set(hit) == {"window_id", "doc_id", "score"} for hit in lines)

    def test_matches_all_spec(self, golden, tmp_path, capsys):
        config, _ = golden
        run_dir = tmp_path / "runq2"
        run_cli("index", "--config", str(config), "--run-dir", str(run_dir))
        spec_path = tmp_path / "all.json"
        spec_path.write_text(json.dumps(
            {"entity_groups": [], "semantic_query": "study results"}), encoding="utf-8")
        capsys.readouterr()
        assert run_cli("query", "--config", str(config), "--run-dir", str(run_dir),
                       "--spec", str(spec_path), "--top-k", "3") == 0
        assert len(capsys.readouterr().out.strip().splitlines()) == 3

    def test_invalid_spec_is_config_exit(self, golden, tmp_path, capsys):
        config, _ = golden
        run_dir = tmp_path / "runq3"
        run_cli("index", "--config", str(config), "--run-dir", str(run_dir))
        spec_path = tmp_path / "bad.json"
        spec_path.write_text(json.dumps(
            {"entity_groups": [[]], "semantic_query": "x"}), encoding="utf-8")
        assert run_cli("query", "--config", str(config), "--run-dir", str(run_dir),
                       "--spec", str(spec_path)) == 2
        assert "entity_groups[0]" in capsys.readouterr().err


class TestFullRun:
    def test_pipeline_outputs(self, golden, tmp_path):
        config, _ = golden
        run_dir = tmp_path / "full"
        assert run_cli("run", "--config", str(config), "--run-dir", str(run_dir)) == 0

        report = json.loads((run_dir / "probe_loop" / "loop_report.json")
                            .read_text(encoding="utf-8"))
        assert report["termination"] == "thresholds_met"
        assert [it["recall_gap"]["gap"] for it in report["iterations"]] == [0.25, 0.0]

        records = [json.loads(line) for line in
                   (run_dir / "extract" / "records.jsonl").read_text().splitlines()]
        assert len(records) == 6  # 7 valid extractions, 1 duplicate collapsed
        failures = [json.loads(line) for line in
                    (run_dir / "extract" / "validation_failures.jsonl")
                    .read_text().splitlines()]
        assert len(failures) == 2
        reasons = {f["reason"] for f in failures}
        assert any("missing required" in r for r in reasons)
        assert any("enum violation" in r for r in reasons)

        judge_report = json.loads((run_dir / "judge" / "report.json")
                                  .read_text(encoding="utf-8"))
        assert judge_report["kept"] == 5
        assert judge_report["error_rate"] == pytest.approx(1 / 6)

        kept = [json.loads(line) for line in
                (run_dir / "judge" / "kept.jsonl").read_text().splitlines()]
        assert {r["record_id"] for r in kept} == {
            "d00:0:5#r0", "d02:0:5#r0", "d03:0:5#r0", "d04:0:5#r1", "d05:0:5#r1"}

        coverage = json.loads((run_dir / "analysis" / "coverage.json")
                              .read_text(encoding="utf-8"))
        assert coverage["coverage"] == pytest.approx(2 / 3)
        eta = json.loads((run_dir / "analysis" / "eta2.json").read_text(encoding="utf-8"))
        assert "route" in eta

    def test_two_invocations_byte_identical(self, golden, tmp_path):
        config, _ = golden
        run_a = tmp_path / "runA"
        run_b = tmp_path / "runB"
        assert run_cli("run", "--config", str(config), "--run-dir", str(run_a)) == 0
        assert run_cli("run", "--config", str(config), "--run-dir", str(run_b)) == 0
        assert digest_tree(run_a) == digest_tree(run_b)

    def test_stop_and_resume_byte_identical(self, golden, tmp_path):
        config, _ = golden
        full = tmp_path / "full"
        staged = tmp_path / "staged"
        assert run_cli("run", "--config", str(config), "--run-dir", str(full)) == 0
        assert run_cli("run", "--config", str(config), "--run-dir", str(staged),
                       "--stop-after", "probe_loop") == 0
        # interrupted run lacks later stages
        assert not (staged / "extract").exists()
        assert run_cli("run", "--config", str(config), "--run-dir", str(staged)) == 0
        assert digest_tree(staged) == digest_tree(full)

    def test_stage_markers_written(self, golden, tmp_path):
        config, _ = golden
        run_dir = tmp_path / "m"
        run_cli("run", "--config", str(config), "--run-dir", str(run_dir))
        for stage in STAGES:
            assert (run_dir / "markers" / f"{stage}.json").exists()

    def test_oracle_exhaustion_is_oracle_exit(self, golden, tmp_path, capsys):
        config, _ = golden
        # empty script: the first proposer call aborts the run
        (config.parent / "script.json").write_text("[]", encoding="utf-8")
        assert run_cli("run", "--config", str(config),
                       "--run-dir", str(tmp_path / "r")) == 4
        assert "script exhausted" in capsys.readouterr().err

    def test_unknown_stop_stage_is_config_exit(self, golden, tmp_path):
        config, _ = golden
        assert run_cli("run", "--config", str(config),
                       "--run-dir", str(tmp_path / "r"),
                       "--stop-after", "nope") == 2
