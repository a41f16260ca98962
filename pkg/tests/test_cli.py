from __future__ import annotations

import json

import numpy as np
import pytest

from conftest import make_instance, write_image
from migkit.benchdata import TaskKind, load_dataset, save_dataset
from migkit.cli import main
from migkit.dataforge import save_embedding_index
from migkit.mergekit import TensorArchive, write_archive
from mockserver import MockChatServer, oracle_script
from test_dataforge import synthetic_index


def run(argv: list[str]) -> int:
    return main(argv)


class TestValidate:
    def test_good_dataset_exits_zero(self, tmp_path, capsys):
        save_dataset([make_instance(tmp_path, f"v{k}") for k in range(3)],
                     tmp_path / "d.jsonl")
        assert run(["validate", "--dataset", str(tmp_path / "d.jsonl")]) == 0
        assert "ok" in capsys.readouterr().out

    def test_findings_exit_one(self, tmp_path, capsys):
        instances = [make_instance(tmp_path, "dup"), make_instance(tmp_path, "dup")]
        save_dataset(instances, tmp_path / "d.jsonl")
        assert run(["validate", "--dataset", str(tmp_path / "d.jsonl")]) == 1
        assert "duplicate_id" in capsys.readouterr().out

    def test_malformed_file_exits_one(self, tmp_path):
        bad = tmp_path / "bad.jsonl"
        bad.write_text('{"id": "x", "task": "nope"}\n')
        assert run(["validate", "--dataset", str(bad)]) == 1

    def test_unknown_flag_exits_two(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            run(["validate", "--nope"])
        assert exc.value.code == 2


class TestScoreAndTier:
    def _journal(self, tmp_path, instances, name, strategy="direct"):
        from migkit.orchestrator import Journal
        from migkit.scoring import constant_records

        journal = Journal(tmp_path / name)
        journal.write_header({"dataset_id": "x", "strategy": strategy, "form": "all"})
        for rec in constant_records(instances, strategy=strategy):
            journal.append(rec)
        return tmp_path / name

    def test_score_table_and_report(self, tmp_path, capsys):
        from conftest import region

        instances = [
            make_instance(tmp_path, "hit0", gt=[region(0, 0, 0, 900, 900)]),
            make_instance(tmp_path, "miss0", gt=[region(0, 0, 0, 100, 100)]),
        ]
        save_dataset(instances, tmp_path / "d.jsonl")
        journal = self._journal(tmp_path, instances, "j.jsonl")
        out = tmp_path / "report.json"
        assert run(["score", "--journal", str(journal),
                    "--dataset", str(tmp_path / "d.jsonl"), "--out", str(out)]) == 0
        table = capsys.readouterr().out
        assert "50.00" in table
        first = out.read_bytes()
        assert run(["score", "--journal", str(journal),
                    "--dataset", str(tmp_path / "d.jsonl"), "--out", str(out)]) == 0
        assert out.read_bytes() == first  # rescoring is byte-identical

    def test_tier_command(self, tmp_path, capsys):
        from conftest import region

        instances = [make_instance(tmp_path, f"t{k}", n_images=2,
                                   gt=[region(0, 0, 0, 900, 900)]) for k in range(3)]
        save_dataset(instances, tmp_path / "d.jsonl")
        direct = self._journal(tmp_path, instances, "direct.jsonl")
        cot = self._journal(tmp_path, instances, "cot.jsonl", strategy="cot_single")
        out = tmp_path / "tiers.jsonl"
        assert run(["tier", "--dataset", str(tmp_path / "d.jsonl"),
                    "--direct", str(direct), "--cot", str(cot),
                    "--out", str(out)]) == 0
        labels = [json.loads(line)["tier"] for line in out.read_text().splitlines()]
        assert len(labels) == 3
        assert set(labels) <= {"easy", "medium", "hard"}


class TestEvaluate:
    def test_end_to_end_against_mock(self, tmp_path, capsys):
        instances = [
            make_instance(tmp_path, f"e{k}", TaskKind.REASONING,
                          query_text=f"find the marker [iid:e{k}]")
            for k in range(4)
        ]
        save_dataset(instances, tmp_path / "d.jsonl")
        srv = MockChatServer(oracle_script(instances))
        url = srv.start()
        try:
            code = run(["evaluate", "--dataset", str(tmp_path / "d.jsonl"),
                        "--endpoint", url, "--model", "mock",
                        "--strategy", "cot_single", "--form", "polling",
                        "--out", str(tmp_path / "run")])
        finally:
            srv.stop()
        assert code == 0
        assert (tmp_path / "run" / "run_config.json").exists()
        assert run(["score", "--journal", str(tmp_path / "run" / "journal.jsonl"),
                    "--dataset", str(tmp_path / "d.jsonl")]) == 0
        assert "100.00" in capsys.readouterr().out

    def test_missing_endpoint_is_config_error(self, tmp_path):
        save_dataset([make_instance(tmp_path, "x")], tmp_path / "d.jsonl")
        assert run(["evaluate", "--dataset", str(tmp_path / "d.jsonl")]) == 2


class TestMergeCli:
    def test_merge_then_diff_is_zero(self, tmp_path, capsys):
        arc = TensorArchive(tensors={"t": np.arange(6, dtype=np.float32)})
        write_archive(arc, tmp_path / "a.arc")
        assert run(["merge", str(tmp_path / "a.arc"), str(tmp_path / "a.arc"),
                    "-o", str(tmp_path / "m.arc")]) == 0
        assert run(["diff", str(tmp_path / "m.arc"), str(tmp_path / "a.arc")]) == 0
        out = capsys.readouterr().out
        assert json.loads(out[out.index("{"):])["overall_max"] == 0.0

    def test_weighted_merge(self, tmp_path):
        write_archive(TensorArchive(tensors={"t": np.float32([0, 0])}), tmp_path / "a.arc")
        write_archive(TensorArchive(tensors={"t": np.float32([4, 8])}), tmp_path / "b.arc")
        assert run(["merge", str(tmp_path / "a.arc"), str(tmp_path / "b.arc"),
                    "-o", str(tmp_path / "m.arc"), "--weights", "0.25,0.75"]) == 0
        from migkit.mergekit import read_archive
        np.testing.assert_array_equal(read_archive(tmp_path / "m.arc").tensors["t"],
                                      np.float32([3, 6]))

    def test_incompatible_archives_exit_one(self, tmp_path):
        write_archive(TensorArchive(tensors={"t": np.float32([1])}), tmp_path / "a.arc")
        write_archive(TensorArchive(tensors={"u": np.float32([1])}), tmp_path / "b.arc")
        assert run(["merge", str(tmp_path / "a.arc"), str(tmp_path / "b.arc"),
                    "-o", str(tmp_path / "m.arc")]) == 1


class TestSliceCli:
    def test_slice_emits_instance_and_tiles(self, tmp_path, capsys):
        img = tmp_path / "big.png"
        write_image(img, 640, 480)
        assert run(["slice", "--image", str(img), "--grid", "2x2",
                    "--question", "find the sign", "--out", str(tmp_path / "s")]) == 0
        line = capsys.readouterr().out.strip().splitlines()[0]
        obj = json.loads(line)
        assert obj["task"] == "group_grounding"
        assert len(obj["images"]) == 4
        loaded = load_dataset(tmp_path / "s" / "sliced.jsonl",
                              require_ground_truth=False)
        assert len(loaded) == 1
        # the bundle is self-contained: tile paths resolve against the dataset
        from pathlib import Path
        assert all(Path(img.path).exists() for img in loaded[0].images)

    def test_bad_grid_is_config_error(self, tmp_path):
        img = tmp_path / "i.png"
        write_image(img, 64, 48)
        assert run(["slice", "--image", str(img), "--grid", "oops",
                    "--question", "q", "--out", str(tmp_path / "s")]) == 2


class TestForgeCli:
    def test_manifest_counts(self, tmp_path, capsys):
        sets = [f"--set={name}=1000000" for name in
                ("multi_grounding", "multi_understanding",
                 "single_grounding", "single_understanding")]
        assert run(["forge", "manifest", "--stage", "1", "--total", "1000",
                    *sets, "--out", str(tmp_path / "m.json")]) == 0
        counts = json.loads(capsys.readouterr().out.splitlines()[0])
        assert counts["multi_grounding"] == 540

    def test_groups_from_index(self, tmp_path, capsys):
        save_embedding_index(synthetic_index(n=30), tmp_path / "e.jsonl")
        assert run(["forge", "groups", "--index", str(tmp_path / "e.jsonl"),
                    "--mode", "clip_adaptive", "--seed", "1"]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        groups = [json.loads(line)["images"] for line in lines]
        assert sorted(p for g in groups for p in g) == \
            sorted(synthetic_index(n=30).paths)

    def test_tasks_subcommand(self, tmp_path, capsys):
        from test_dataforge import dog_record

        from migkit.dataforge import save_annotations

        records = [dog_record(tmp_path, f"c{k}") for k in range(3)]
        save_annotations(records, tmp_path / "ann.jsonl")
        assert run(["forge", "tasks", "--annotations", str(tmp_path / "ann.jsonl"),
                    "--task", "common_object", "--out", str(tmp_path / "t.jsonl")]) == 0
        assert len(load_dataset(tmp_path / "t.jsonl")) == 1
