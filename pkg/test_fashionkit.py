"""End-to-end tests for the fashionkit command line"""

import json
import re
from pathlib import Path

import pytest
import torch

from checkpoint_io import read_checkpoint
from fashionkit import ExitStatus, main

CONFIGS = Path(__file__).resolve().parent / "configs"


def _config(task):
    return str(CONFIGS / f"{task}.json")


def _train(task, data_root, work_dir, *extra, epochs=1):
    argv = ["train", _config(task), "--work-dir", str(work_dir), "--override", f"data.root={data_root}",
            "--override", f"schedule.max_epochs={epochs}", *extra]
    return main(argv)


@pytest.fixture(scope="module")
def attribute_run(attribute_dir, tmp_path_factory):
    work = tmp_path_factory.mktemp("attribute_run")
    assert _train("attribute", attribute_dir, work, "--trace") == ExitStatus.OK
    return work


class TestTrainTestEvaluate:

    def test_train_outputs(self, attribute_run):
        assert (attribute_run / "latest.ckpt").is_file()
        saved = json.loads((attribute_run / "config.json").read_text())
        assert saved["schedule"]["max_epochs"] == 1
        trace = json.loads((attribute_run / "trace.json").read_text())
        assert trace[0] == "before_run" and trace[-1] == "after_run"
        assert trace.count("after_iter") == 2
        assert read_checkpoint(attribute_run / "latest.ckpt").state["iter"] == 2

    def test_predict_then_evaluate(self, attribute_run, attribute_dir, tmp_path, capsys):
        predictions = tmp_path / "predictions.json"
        assert main(["test", _config("attribute"), str(attribute_run / "latest.ckpt"), "--out", str(predictions),
                     "--override", f"data.root={attribute_dir}"]) == ExitStatus.OK
        document = json.loads(predictions.read_text())
        assert document["task"] == "attribute" and len(document["scores"]) == 12
        assert "fashionkit evaluate attribute" in capsys.readouterr().out

        report = tmp_path / "report.json"
        assert main(["evaluate", "attribute", str(predictions), str(attribute_dir / "attributes.txt"),
                     "--out", str(report), "--config", _config("attribute")]) == ExitStatus.OK
        scalars = json.loads(report.read_text())["scalars"]
        assert set(scalars) == {"attr/recall@3", "attr/accuracy@3", "attr/recall@5", "attr/accuracy@5"}

    def test_resume_matches_a_straight_run(self, attribute_dir, tmp_path):
        assert _train("attribute", attribute_dir, tmp_path / "straight", epochs=2) == ExitStatus.OK
        assert _train("attribute", attribute_dir, tmp_path / "first", epochs=1) == ExitStatus.OK
        assert _train("attribute", attribute_dir, tmp_path / "second", "--resume",
                      str(tmp_path / "first" / "latest.ckpt"), epochs=2) == ExitStatus.OK
        straight = read_checkpoint(tmp_path / "straight" / "latest.ckpt")
        resumed = read_checkpoint(tmp_path / "second" / "latest.ckpt")
        assert resumed.state == straight.state
        for name, tensor in straight.model_params.items():
            assert torch.equal(resumed.model_params[name], tensor)

    def test_training_twice_into_one_work_dir(self, attribute_dir, tmp_path):
        assert _train("attribute", attribute_dir, tmp_path, epochs=2) == ExitStatus.OK
        assert _train("attribute", attribute_dir, tmp_path, epochs=1) == ExitStatus.OK
        log = [json.loads(line) for line in (tmp_path / "run_log.jsonl").read_text().splitlines()]
        assert {r["epoch"] for r in log} == {0}
        assert [r["iter"] for r in log if r["mode"] == "train"] == [1, 2]

    def test_landmark_round_trip(self, landmark_dir, tmp_path):
        assert _train("landmark", landmark_dir, tmp_path) == ExitStatus.OK
        log = [json.loads(line) for line in (tmp_path / "run_log.jsonl").read_text().splitlines()]
        assert [r["mode"] for r in log] == ["train", "train", "val"]
        assert main(["test", _config("landmark"), str(tmp_path / "latest.ckpt"), "--work-dir", str(tmp_path),
                     "--override", f"data.root={landmark_dir}"]) == ExitStatus.OK
        assert main(["evaluate", "landmark", str(tmp_path / "predictions.json"), str(landmark_dir / "landmarks.txt"),
                     "--work-dir", str(tmp_path)]) == ExitStatus.OK
        assert (tmp_path / "report_curves.png").is_file()

    def test_retrieval_and_compat_predictions(self, retrieval_dir, compat_dir, tmp_path):
        for task, root, keys in (("retrieval", retrieval_dir, {"embeddings"}),
                                 ("compat", compat_dir, {"fitb", "compat_scores"})):
            work = tmp_path / task
            assert _train(task, root, work) == ExitStatus.OK
            assert main(["test", _config(task), str(work / "latest.ckpt"), "--work-dir", str(work),
                         "--override", f"data.root={root}"]) == ExitStatus.OK
            document = json.loads((work / "predictions.json").read_text())
            assert keys <= set(document) and document["task"] == task

    def test_detection_is_evaluate_only(self, detection_dir, tmp_path):
        assert main(["evaluate", "detection", str(detection_dir / "detections.json"),
                     str(detection_dir / "instances.json"), "--out", str(tmp_path / "det.json")]) == ExitStatus.OK
        assert "bbox/AP" in json.loads((tmp_path / "det.json").read_text())["scalars"]
        assert main(["train", _config("detection"), "--work-dir", str(tmp_path)]) == ExitStatus.USAGE


class TestDemo:

    def test_attribute_demo(self, attribute_run, attribute_dir, tmp_path, capsys):
        assert main(["demo", _config("attribute"), str(attribute_run / "latest.ckpt"),
                     str(attribute_dir / "img" / "000000.png"), "--work-dir", str(tmp_path), "--topk", "3",
                     "--override", f"data.root={attribute_dir}"]) == ExitStatus.OK
        out = capsys.readouterr().out
        assert "top-3 attributes" in out and "3. " in out
        assert (tmp_path / "demo_000000.png").is_file()

    def test_landmark_demo_points_inside_the_image(self, landmark_dir, tmp_path, capsys):
        assert _train("landmark", landmark_dir, tmp_path) == ExitStatus.OK
        capsys.readouterr()
        assert main(["demo", _config("landmark"), str(tmp_path / "latest.ckpt"),
                     str(landmark_dir / "img" / "000003.png"), "--work-dir", str(tmp_path),
                     "--override", f"data.root={landmark_dir}"]) == ExitStatus.OK
        out = capsys.readouterr().out
        assert "(64x64)" in out
        points = [(float(x), float(y)) for x, y in re.findall(r"\((-?[\d.]+), (-?[\d.]+)\) visible", out)]
        assert len(points) == 4
        # printed with one decimal
        assert all(0.0 <= x <= 64.0 and 0.0 <= y <= 64.0 for x, y in points)
        assert (tmp_path / "demo_000003.png").is_file()

    def test_retrieval_demo_lists_gallery_matches(self, retrieval_dir, tmp_path, capsys):
        assert _train("retrieval", retrieval_dir, tmp_path) == ExitStatus.OK
        capsys.readouterr()
        assert main(["demo", _config("retrieval"), str(tmp_path / "latest.ckpt"),
                     str(retrieval_dir / "img" / "item0002_2.png"), "--work-dir", str(tmp_path), "--topk", "3",
                     "--override", f"data.root={retrieval_dir}"]) == ExitStatus.OK
        out = capsys.readouterr().out
        assert "top-3 gallery matches" in out
        matches = re.findall(r"^\s+(\d)\. (item\d{4})\s+img/(item\d{4})_3\.png\s+[\d.]+$", out, re.MULTILINE)
        assert [rank for rank, _, _ in matches] == ["1", "2", "3"]
        assert all(item == image_item for _, item, image_item in matches)
        assert len({item for _, item, _ in matches}) == 3
        assert (tmp_path / "demo_item0002_2.png").is_file()

    def test_demo_needs_an_image(self, attribute_run, attribute_dir, tmp_path):
        assert main(["demo", _config("attribute"), str(attribute_run / "latest.ckpt"), "--work-dir", str(tmp_path),
                     "--override", f"data.root={attribute_dir}"]) == ExitStatus.USAGE
        assert main(["demo", _config("attribute"), str(attribute_run / "latest.ckpt"), str(tmp_path / "none.png"),
                     "--override", f"data.root={attribute_dir}"]) == ExitStatus.DATA

    def test_compat_demo(self, compat_dir, tmp_path):
        assert _train("compat", compat_dir, tmp_path) == ExitStatus.OK
        assert main(["demo", _config("compat"), str(tmp_path / "latest.ckpt"), "--work-dir", str(tmp_path),
                     "--question", "1", "--override", f"data.root={compat_dir}"]) == ExitStatus.OK
        assert (tmp_path / "demo_fitb_1.png").is_file()
        assert main(["demo", _config("compat"), str(tmp_path / "latest.ckpt"), "--question", "99",
                     "--override", f"data.root={compat_dir}"]) == ExitStatus.USAGE


class TestExitCodes:

    def test_usage(self, tmp_path):
        assert main([]) == ExitStatus.USAGE
        assert main(["train", str(tmp_path / "missing.json")]) == ExitStatus.USAGE
        assert main(["synth", "pose", "--out", str(tmp_path)]) == ExitStatus.USAGE
        assert main(["zoo", "fetch"]) == ExitStatus.USAGE
        assert main(["train", _config("attribute"), "--override", "noequals"]) == ExitStatus.USAGE

    def test_data(self, attribute_run, attribute_dir, tmp_path):
        assert main(["evaluate", "attribute", str(tmp_path / "p.json"), str(tmp_path / "missing.txt")]) \
            == ExitStatus.DATA
        (tmp_path / "p.json").write_text(json.dumps({"task": "landmark", "landmarks": {}}))
        assert main(["evaluate", "attribute", str(tmp_path / "p.json"), str(attribute_dir / "attributes.txt"),
                     "--work-dir", str(tmp_path)]) == ExitStatus.DATA

    def test_fingerprint_mismatch(self, attribute_run, attribute_dir, tmp_path, caplog):
        argv = ["test", _config("attribute"), str(attribute_run / "latest.ckpt"), "--work-dir", str(tmp_path),
                "--override", f"data.root={attribute_dir}", "--override", "model.window=5"]
        assert main(argv) == ExitStatus.DATA
        assert main(argv + ["--allow-fingerprint-mismatch"]) == ExitStatus.OK
        assert "FINGERPRINT MISMATCH OVERRIDDEN" in caplog.text

    def test_runtime(self, tmp_path):
        (tmp_path / "blocker").write_text("a file, not a directory")
        assert main(["synth", "landmark", "--n", "2", "--out", str(tmp_path / "blocker" / "out")]) \
            == ExitStatus.RUNTIME
        manifest = tmp_path / "zoo.json"
        manifest.write_text(json.dumps({"entries": [{
            "model_id": "m", "task": "attribute", "config_path": "configs/attribute.json",
            "artifact_url": "http://127.0.0.1:9/m.ckpt", "byte_size": 1, "sha256": "0" * 64}]}))
        assert main(["zoo", "fetch", "m", "--dest", str(tmp_path / "ckpt"), "--manifest", str(manifest)]) \
            == ExitStatus.RUNTIME


class TestSynthAndZoo:

    def test_synth(self, tmp_path, capsys):
        assert main(["synth", "retrieval", "--n", "3", "--seed", "2", "--out", str(tmp_path)]) == ExitStatus.OK
        assert (tmp_path / "retrieval_split.txt").is_file()
        assert "synthetic retrieval dataset" in capsys.readouterr().out

    def test_zoo_list(self, capsys):
        assert main(["zoo", "list"]) == ExitStatus.OK
        assert "0 model(s)" in capsys.readouterr().out
