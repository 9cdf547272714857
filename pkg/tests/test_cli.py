import json
import os
from pathlib import Path

import numpy as np
import pytest

from cascadenet.cli import main
from cascadenet.image import GrayImage, save_image


def write_json(path, doc):
    Path(path).write_text(json.dumps(doc))
    return str(path)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    """One small synthetic dataset reused by most CLI checks."""
    root = tmp_path_factory.mktemp("cli-data")
    cfg = write_json(root / "gen.json", {
        "preset": "stage1",
        "per_class": {"train": 20, "validation": 8, "test": 8},
        "seed": 3,
    })
    assert main(["gen-data", "--config", cfg, "--run-dir", str(root / "run")]) == 0
    return root / "run"


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    root = tmp_path_factory.mktemp("cli-train")
    cfg = write_json(root / "train.json", {
        "manifest": str(dataset / "data" / "manifest.csv"),
        "model": {"preset": "mini-seme", "input_shape": [1, 64, 64],
                  "options": {"widths": [4, 8, 8, 8], "reduction": 4}},
        "train": {"epochs": 2, "batch_size": 16, "optimizer": "adam",
                  "lr": 2e-3},
    })
    run = root / "run"
    assert main(["train", "--config", cfg, "--seed", "5",
                 "--run-dir", str(run)]) == 0
    return run


class TestContracts:
    def test_gen_data_outputs(self, dataset):
        assert (dataset / "data" / "manifest.csv").is_file()
        assert (dataset / "produced.json").is_file()
        assert (dataset / "config.json").is_file()

    def test_train_outputs(self, trained):
        assert (trained / "checkpoints" / "best.ckpt").is_file()
        assert (trained / "checkpoints" / "final.ckpt").is_file()
        history = (trained / "metrics" / "history.jsonl").read_text().splitlines()
        assert len(history) == 2
        record = json.loads(history[0])
        assert set(record) == {"epoch", "lr", "train_loss", "val_acc"}
        log_lines = [json.loads(l) for l in
                     (trained / "log.jsonl").read_text().splitlines()]
        epochs = [l for l in log_lines if l.get("event") == "epoch"]
        assert epochs and all("wall_ms" in e for e in epochs)

    def test_eval_outputs(self, dataset, trained, tmp_path):
        cfg = write_json(tmp_path / "eval.json", {
            "manifest": str(dataset / "data" / "manifest.csv")})
        run = tmp_path / "run"
        assert main(["eval", "--config", cfg,
                     "--checkpoint", str(trained / "checkpoints" / "best.ckpt"),
                     "--split", "test", "--run-dir", str(run)]) == 0
        metrics = json.loads((run / "metrics" / "metrics.json").read_text())
        assert {"accuracy", "per_class_f1", "macro_f1", "per_class_auc",
                "macro_auc", "confusion", "class_names",
                "split", "n"} == set(metrics)
        confusion = (run / "metrics" / "confusion.csv").read_text().splitlines()
        assert confusion[0] == "true_class,bacterial,normal,viral"
        roc = (run / "metrics" / "roc.csv").read_text().splitlines()
        assert roc[0] == "class,fpr,tpr"

    def test_explain_outputs(self, dataset, trained, tmp_path):
        manifest = (dataset / "data" / "manifest.csv").read_text().splitlines()
        image_path = manifest[1].split(",")[0]
        cfg = write_json(tmp_path / "ex.json", {"audit_region": [2, 2, 10, 10]})
        run = tmp_path / "run"
        assert main(["explain", "--config", cfg,
                     "--checkpoint", str(trained / "checkpoints" / "best.ckpt"),
                     "--image", image_path, "--class", "1",
                     "--run-dir", str(run)]) == 0
        stem = Path(image_path).stem
        assert (run / "heatmaps" / f"{stem}_heatmap.png").is_file()
        assert (run / "heatmaps" / f"{stem}_overlay.png").is_file()
        audits = json.loads((run / "metrics" / "region_mass.json").read_text())
        assert audits[0]["region"] == [2, 2, 10, 10]
        assert 0.0 <= audits[0]["mass"] <= 1.0

    def test_gradcheck_runs_subset(self, tmp_path):
        cfg = write_json(tmp_path / "gc.json",
                         {"trials": 2, "ops": ["add", "relu"]})
        run = tmp_path / "run"
        assert main(["gradcheck", "--config", cfg, "--seed", "1",
                     "--run-dir", str(run)]) == 0
        doc = json.loads((run / "metrics" / "gradcheck.json").read_text())
        assert doc["passed"]

    def test_segment_train_and_segment_outputs(self, dataset, tmp_path):
        cfg = write_json(tmp_path / "st.json", {
            "manifest": str(dataset / "data" / "manifest.csv"),
            "epochs": 1, "batch_size": 8, "base": 4})
        run = tmp_path / "unet"
        assert main(["segment-train", "--config", cfg, "--seed", "0",
                     "--run-dir", str(run)]) == 0
        ckpt = run / "checkpoints" / "unet.ckpt"
        assert ckpt.is_file()
        assert (run / "metrics" / "history.jsonl").is_file()

        manifest_rows = (dataset / "data" / "manifest.csv").read_text().splitlines()
        image_path = manifest_rows[1].split(",")[0]
        seg_run = tmp_path / "seg"
        assert main(["segment", "--checkpoint", str(ckpt),
                     "--image", image_path, "--run-dir", str(seg_run)]) == 0
        stem = Path(image_path).stem
        assert (seg_run / "masks" / f"{stem}_mask.png").is_file()
        assert (seg_run / "masked" / f"{stem}.png").is_file()

    def test_cascade_outputs_and_routing_audit(self, dataset, tmp_path):
        import numpy as np
        from cascadenet.models import build_model, preset_config
        from cascadenet.training import save_checkpoint

        def forced(path, class_names, favored):
            model = build_model(preset_config(
                "mini-seme", (1, 64, 64), len(class_names),
                widths=(2, 4, 4, 4), reduction=2), seed=0)
            params = model.parameters()
            params["head.w"].data[...] = 0.0
            bias = np.zeros(len(class_names), dtype=np.float32)
            bias[favored] = 5.0
            params["head.b"].data[...] = bias
            save_checkpoint(path, model, class_names)

        forced(tmp_path / "s1.ckpt", ["normal", "bacterial", "viral"], 2)
        forced(tmp_path / "s2.ckpt", ["covid-like", "other-viral"], 0)
        cfg = write_json(tmp_path / "cascade.json", {
            "stage1": str(tmp_path / "s1.ckpt"),
            "stage2": str(tmp_path / "s2.ckpt"),
            "route_on": "viral",
            "manifest": str(dataset / "data" / "manifest.csv")})
        run = tmp_path / "run"
        assert main(["cascade", "--config", cfg, "--split", "test",
                     "--run-dir", str(run)]) == 0
        rows = (run / "metrics" / "cascade.csv").read_text().splitlines()
        assert rows[0] == "path,true_label,final_label,stage2_invoked"
        summary = json.loads((run / "metrics" / "cascade_metrics.json").read_text())
        assert summary["routing_violations"] == 0
        assert summary["stage2_invocations"] == summary["n"]  # argmax forced viral
        assert summary["leaf_labels"] == ["normal", "bacterial", "covid-like",
                                          "other-viral"]

    def test_analyze_dist_outputs(self, tmp_path, rng):
        for group, level in (("bright", 200), ("dark", 40)):
            d = tmp_path / group
            d.mkdir()
            for i in range(6):
                pixels = np.clip(rng.normal(level, 10, (16, 16)), 0, 255)
                save_image(GrayImage(pixels.astype(np.uint8)), d / f"{i}.png")
        cfg = write_json(tmp_path / "ad.json", {
            "groups": [{"name": "bright", "root": str(tmp_path / "bright")},
                       {"name": "dark", "root": str(tmp_path / "dark")}],
            "k": 2})
        run = tmp_path / "run"
        assert main(["analyze-dist", "--config", cfg, "--seed", "0",
                     "--run-dir", str(run)]) == 0
        assert (run / "metrics" / "clusters.csv").is_file()
        doc = json.loads((run / "metrics" / "analysis.json").read_text())
        assert doc["k"] == 2 and doc["n"] == 12


class TestValidation:
    def test_unknown_config_key_exits_one(self, dataset, tmp_path):
        cfg = write_json(tmp_path / "bad.json", {
            "manifest": str(dataset / "data" / "manifest.csv"),
            "modle": {"preset": "mini-seme"},
        })
        rc = main(["train", "--config", cfg, "--run-dir", str(tmp_path / "r")])
        assert rc == 1

    def test_unknown_flag_exits_one(self):
        assert main(["train", "--nope"]) == 1

    def test_missing_run_dir_exits_one(self, tmp_path):
        cfg = write_json(tmp_path / "c.json", {"trials": 1})
        assert main(["gradcheck", "--config", cfg]) == 1

    def test_unknown_nested_key_exits_one(self, dataset, tmp_path):
        cfg = write_json(tmp_path / "bad2.json", {
            "manifest": str(dataset / "data" / "manifest.csv"),
            "train": {"epochz": 3},
        })
        assert main(["train", "--config", cfg,
                     "--run-dir", str(tmp_path / "r")]) == 1

    def test_missing_checkpoint_file_is_validation_error(self, tmp_path):
        cfg = write_json(tmp_path / "c.json", {"manifest": "none.csv"})
        rc = main(["eval", "--config", cfg, "--checkpoint",
                   str(tmp_path / "missing.ckpt"), "--run-dir",
                   str(tmp_path / "r")])
        assert rc == 2  # unreadable file surfaces as a runtime failure


class TestDeterminismAndSandbox:
    def test_train_twice_identical_history_files(self, dataset, tmp_path):
        cfg = write_json(tmp_path / "t.json", {
            "manifest": str(dataset / "data" / "manifest.csv"),
            "model": {"preset": "mini-seme", "input_shape": [1, 64, 64],
                      "options": {"widths": [2, 4, 4, 4], "reduction": 2}},
            "train": {"epochs": 2, "batch_size": 16, "optimizer": "sgd",
                      "lr": 0.05},
        })
        r1, r2 = tmp_path / "r1", tmp_path / "r2"
        assert main(["train", "--config", cfg, "--seed", "7",
                     "--run-dir", str(r1)]) == 0
        assert main(["train", "--config", cfg, "--seed", "7",
                     "--run-dir", str(r2)]) == 0
        h1 = (r1 / "metrics" / "history.jsonl").read_bytes()
        h2 = (r2 / "metrics" / "history.jsonl").read_bytes()
        assert h1 == h2
        c1 = (r1 / "checkpoints" / "best.ckpt").read_bytes()
        c2 = (r2 / "checkpoints" / "best.ckpt").read_bytes()
        assert c1 == c2

    def test_all_outputs_under_run_dir(self, tmp_path, monkeypatch):
        workdir = tmp_path / "cwd"
        workdir.mkdir()
        monkeypatch.chdir(workdir)
        cfg = write_json(tmp_path / "gen.json", {
            "preset": "stage2", "per_class": {"train": 2}, "seed": 1})
        run = tmp_path / "run"
        before = set(os.listdir(workdir))
        assert main(["gen-data", "--config", cfg, "--run-dir", str(run)]) == 0
        assert set(os.listdir(workdir)) == before   # nothing leaked into cwd
        produced = json.loads((run / "produced.json").read_text())
        for rel in produced:
            assert not rel.startswith("/")
            assert (run / rel).exists()

    def test_produced_manifest_lists_outputs(self, trained):
        produced = json.loads((trained / "produced.json").read_text())
        assert "metrics/history.jsonl" in produced
        assert "checkpoints/best.ckpt" in produced
