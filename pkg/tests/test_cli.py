import json
import subprocess
import sys

import pytest

from agmask import cli


def run_cli(argv, capsys):
    code = cli.main(argv)
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def run_json(argv, capsys, expect=0):
    code, out, err = run_cli(argv, capsys)
    assert code == expect, err
    return json.loads(out)


class TestDispatch:
    def test_no_args_usage_exit_1(self, capsys):
        code, out, err = run_cli([], capsys)
        assert code == 1
        assert "usage" in err.lower()
        assert out == ""

    def test_unknown_flag_exit_1(self, capsys):
        code, _, err = run_cli(["score", "--bogus"], capsys)
        assert code == 1

    def test_missing_checkpoint_exit_1(self, capsys, tiny_corpus):
        root, entries = tiny_corpus
        code, _, err = run_cli(
            ["score", "--checkpoint", "/missing.agmw",
             "--image", str(entries[0].image_path), "--caption", "red circle"],
            capsys)
        assert code == 1

    def test_corrupt_checkpoint_exit_3(self, capsys, tiny_corpus, tmp_path):
        root, entries = tiny_corpus
        bad = tmp_path / "bad.agmw"
        bad.write_bytes(b"AGMW1\n{not json\n" + b"\x00" * 64)
        code, _, err = run_cli(
            ["score", "--checkpoint", str(bad),
             "--image", str(entries[0].image_path), "--caption", "red circle"],
            capsys)
        assert code == 3

    def test_subprocess_entry_point(self):
        proc = subprocess.run([sys.executable, "-m", "agmask.cli"],
                              capture_output=True, text=True)
        assert proc.returncode == 1
        assert "usage" in proc.stderr.lower()


class TestSynthTrain:
    def test_synth_and_train_round(self, capsys, tmp_path):
        doc = run_json(["synth", "--out", str(tmp_path / "data"),
                        "--per-concept", "2", "--size", "32", "--seed", "3",
                        "--distractors", "0",
                        "--colors", "red,blue", "--shapes", "circle,square"],
                       capsys)
        assert doc["count"] == 8
        assert doc["concepts"] == 4
        manifest = doc["manifest"]

        doc = run_json(["train", "--manifest", manifest,
                        "--out", str(tmp_path / "ck.agmw"),
                        "--epochs", "1", "--batch-size", "4", "--lr", "0.001",
                        "--split", "all", "--feature-channels", "4",
                        "--embed-dim", "8", "--token-dim", "8"],
                       capsys)
        assert (tmp_path / "ck.agmw").exists()
        assert "final_loss" in doc

    def test_synth_unknown_color_exit_1(self, capsys, tmp_path):
        code, _, err = run_cli(["synth", "--out", str(tmp_path),
                                "--colors", "mauve"], capsys)
        assert code == 1


@pytest.fixture()
def ck_args(tiny_checkpoint):
    return ["--checkpoint", str(tiny_checkpoint)]


class TestSingleImageCommands:
    def test_score_json(self, capsys, tiny_corpus, ck_args):
        _, entries = tiny_corpus
        doc = run_json(["score", *ck_args,
                        "--image", str(entries[0].image_path),
                        "--caption", entries[0].caption], capsys)
        assert set(doc) == {"similarity", "present", "gate"}
        assert doc["gate"] == 0.489

    def test_attend_writes_stable_pgm(self, capsys, tiny_corpus, ck_args,
                                      tmp_path):
        _, entries = tiny_corpus
        outs = []
        for name in ("a.pgm", "b.pgm"):
            out = tmp_path / name
            doc = run_json(["attend", *ck_args,
                            "--image", str(entries[0].image_path),
                            "--caption", entries[0].caption,
                            "--out", str(out)], capsys)
            assert doc["attention"] == str(out)
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]
        assert outs[0].startswith(b"P5\n48 48\n255\n")

    def test_prompt_outputs_schema_json(self, capsys, tiny_corpus, ck_args):
        _, entries = tiny_corpus
        doc = run_json(["prompt", *ck_args, "--gate", "-1",
                        "--image", str(entries[0].image_path),
                        "--caption", entries[0].caption, "--mode", "multi"],
                       capsys)
        assert doc["v"] == 1
        assert doc["kind"] in ("points", "box")

    def test_run_present_exit_0(self, capsys, tiny_corpus, ck_args, tmp_path):
        _, entries = tiny_corpus
        doc = run_json(["run", *ck_args, "--gate", "-1",
                        "--image", str(entries[0].image_path),
                        "--caption", entries[0].caption,
                        "--id", entries[0].id,
                        "--out-mask", str(tmp_path / "m.pgm")], capsys)
        assert doc["present"] is True
        assert doc["id"] == entries[0].id
        assert (tmp_path / "m.pgm").exists()

    def test_run_gated_absent_exit_2(self, capsys, tiny_corpus, ck_args):
        _, entries = tiny_corpus
        code, out, _ = run_cli(["run", *ck_args, "--gate", "1.0",
                                "--image", str(entries[0].image_path),
                                "--caption", entries[0].caption], capsys)
        assert code == 2
        doc = json.loads(out)
        assert doc["present"] is False
        assert doc["prompts"] is None and doc["mask"] is None

    def test_mask_gated_absent_exit_2(self, capsys, tiny_corpus, ck_args,
                                      tmp_path):
        _, entries = tiny_corpus
        code, out, _ = run_cli(["mask", *ck_args, "--gate", "1.0",
                                "--image", str(entries[0].image_path),
                                "--caption", entries[0].caption,
                                "--out", str(tmp_path / "m.pgm")], capsys)
        assert code == 2
        assert not (tmp_path / "m.pgm").exists()

    def test_stdout_is_single_json_document(self, capsys, tiny_corpus, ck_args):
        _, entries = tiny_corpus
        code, out, _ = run_cli(["run", *ck_args, "--gate", "-1",
                                "--image", str(entries[0].image_path),
                                "--caption", entries[0].caption], capsys)
        assert code == 0
        json.loads(out)  # whole stdout parses as one document
        assert out.count("\n") == 1


class TestEvalCommands:
    def test_eval_threshold_fixture(self, capsys, tmp_path):
        samples = tmp_path / "samples.jsonl"
        samples.write_text("\n".join([
            '{"id":"a","score":0.9,"correct":true}',
            '{"id":"b","score":0.8,"correct":true}',
            '{"id":"c","score":0.2,"correct":false}',
        ]) + "\n")
        doc = run_json(["eval-threshold", "--samples", str(samples)], capsys)
        assert doc["threshold"] == 0.8
        assert doc["f1"] == 1.0

    def test_eval_threshold_needs_input(self, capsys):
        code, _, err = run_cli(["eval-threshold"], capsys)
        assert code == 1

    def test_eval_accuracy(self, capsys, tiny_corpus, ck_args):
        root, _ = tiny_corpus
        doc = run_json(["eval-accuracy", *ck_args,
                        "--manifest", str(root / "manifest.jsonl"),
                        "--split", "all"], capsys)
        assert set(doc) == {"top1", "top5", "captions", "samples"}
        assert doc["captions"] == 2
        assert doc["top5"] == 1.0

    def test_eval_iou_report(self, capsys, tiny_corpus, ck_args):
        root, _ = tiny_corpus
        doc = run_json(["eval-iou", *ck_args,
                        "--manifest", str(root / "manifest.jsonl"),
                        "--modes", "multi", "--split", "all",
                        "--workers", "2"], capsys)
        assert "mean_iou_by_kind" in doc
        assert set(doc["mean_iou_by_kind"]) == {"multi"}
        assert doc["per_sample"]

    def test_eval_iou_deterministic_bytes(self, capsys, tiny_corpus, ck_args):
        root, _ = tiny_corpus
        outs = []
        for _ in range(2):
            code, out, _ = run_cli(["eval-iou", *ck_args,
                                    "--manifest", str(root / "manifest.jsonl"),
                                    "--modes", "single,multi", "--split", "all"],
                                   capsys)
            assert code == 0
            outs.append(out)
        assert outs[0] == outs[1]
