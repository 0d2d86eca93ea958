import csv
import json

import numpy as np
import pytest

from wavunits.cli import main, parse_config_file
from wavunits.manifest import load_manifest
from wavunits.synth import (
    build_classification_dataset,
    build_detection_dataset,
    build_pretrain_corpus,
)

TINY_MODEL_CONFIG = """
# desk-test model, small enough for quick CLI runs
model.cnn_channels = 8,8,16,16
model.transformer_depth = 2
model.hidden_dim = 16
model.heads = 2
model.ffn_dim = 32
model.num_units = 8
model.proj_dim = 12
pretrain.total_steps = 4
pretrain.batch_seconds = 2.0
pretrain.checkpoint_every = 2
finetune.lrs = 1e-4,1e-3
finetune.epochs = 2
finetune.batch_size = 8
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Micro corpora + config + one pretrained checkpoint, shared per module."""
    root = tmp_path_factory.mktemp("cli")
    rng = np.random.default_rng(0)
    paths = {
        "pretrain": build_pretrain_corpus(root / "pre", rng, n_clips=5, clip_seconds=1.0),
        "classify": build_classification_dataset(root / "cls", rng, per_class=(3, 2, 2)),
        "detect": build_detection_dataset(root / "det", rng, per_split=(2, 1, 1),
                                          recording_seconds=6.0),
    }
    config = root / "desk.cfg"
    config.write_text(TINY_MODEL_CONFIG)
    out = root / "pretrained"
    code = main(["--seed", "7", "--config", str(config), "pretrain",
                 "--manifest", str(paths["pretrain"]), "--out", str(out)])
    assert code == 0
    return {"root": root, "config": config, "paths": paths,
            "checkpoint": out / "stage2_final.avsc"}


class TestSynthCommand:
    def test_generates_loadable_manifests(self, tmp_path, capsys):
        code = main(["--seed", "1", "synth", "--out", str(tmp_path / "corpus"),
                     "--clips", "4", "--clip-seconds", "1.0"])
        assert code == 0
        for name in ("pretrain", "classify", "detect"):
            line = [l for l in capsys.readouterr().out.splitlines()
                    if l.startswith(name)]
            manifest = load_manifest(tmp_path / "corpus" / name / f"{name}.json")
            assert len(manifest.entries) > 0

    def test_deterministic_wavs(self, tmp_path):
        main(["--seed", "5", "synth", "--out", str(tmp_path / "a"), "--clips", "2"])
        main(["--seed", "5", "synth", "--out", str(tmp_path / "b"), "--clips", "2"])
        a = (tmp_path / "a/pretrain/wavs/clip_000.wav").read_bytes()
        b = (tmp_path / "b/pretrain/wavs/clip_000.wav").read_bytes()
        assert a == b


class TestConfig:
    def test_unknown_key_named(self, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text("model.hiden_dim = 32\n")
        code = main(["--config", str(bad), "pretrain",
                     "--manifest", "whatever.json", "--out", str(tmp_path)])
        assert code == 2

    def test_unknown_key_message(self, tmp_path, capsys):
        bad = tmp_path / "bad.cfg"
        bad.write_text("model.hiden_dim = 32\n")
        main(["--config", str(bad), "pretrain",
              "--manifest", "x.json", "--out", str(tmp_path)])
        assert "model.hiden_dim" in capsys.readouterr().err

    def test_parse_types(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("model.cnn_channels = 8, 8, 16, 16\n"
                       "finetune.lrs = 1e-5,5e-5\n"
                       "model.use_positional = false\n")
        sections = parse_config_file(cfg)
        assert sections["model"]["cnn_channels"] == (8, 8, 16, 16)
        assert sections["finetune"]["lrs"] == (1e-5, 5e-5)
        assert sections["model"]["use_positional"] is False


class TestPretrainCommand:
    def test_missing_manifest_exit_and_message(self, tmp_path, capsys):
        code = main(["pretrain", "--manifest", str(tmp_path / "ghost.json"),
                     "--out", str(tmp_path / "out")])
        assert code == 2
        assert "ghost.json" in capsys.readouterr().err

    def test_stage1_only(self, workspace, tmp_path):
        out = tmp_path / "s1"
        code = main(["--seed", "7", "--config", str(workspace["config"]),
                     "pretrain", "--manifest", str(workspace["paths"]["pretrain"]),
                     "--out", str(out), "--stage", "1-only"])
        assert code == 0
        assert (out / "stage1_final.avsc").exists()
        assert not list(out.glob("stage2*"))

    def test_two_stage_artifacts(self, workspace):
        out = workspace["checkpoint"].parent
        assert (out / "stage1_final.avsc").exists()
        assert (out / "stage2_final.avsc").exists()
        assert (out / "train_log.jsonl").exists()
        rows = [json.loads(l) for l in (out / "train_log.jsonl").read_text().splitlines()]
        assert {r["stage"] for r in rows} == {1, 2}
        from wavunits.checkpoint import load_model

        _, meta, codebooks = load_model(workspace["checkpoint"])
        assert set(codebooks) == {"stage1", "stage2"}
        assert codebooks["stage2"].stage == 2


@pytest.fixture(scope="module")
def finetuned(workspace):
    out = workspace["root"] / "ft_cls"
    code = main(["--seed", "3", "--config", str(workspace["config"]),
                 "finetune", "--checkpoint", str(workspace["checkpoint"]),
                 "--manifest", str(workspace["paths"]["classify"]),
                 "--out", str(out)])
    assert code == 0
    return out


class TestFinetuneEvalCommands:
    def test_report_structure(self, finetuned):
        report = json.loads((finetuned / "sweep_report.json").read_text())
        assert len(report["runs"]) == 2
        assert all(len(r["val_metrics"]) == 2 for r in report["runs"])
        assert report["selection_metric"] == "accuracy"

    def test_rerun_same_seed_identical_report(self, workspace, finetuned, tmp_path):
        out = tmp_path / "again"
        code = main(["--seed", "3", "--config", str(workspace["config"]),
                     "finetune", "--checkpoint", str(workspace["checkpoint"]),
                     "--manifest", str(workspace["paths"]["classify"]),
                     "--out", str(out)])
        assert code == 0
        assert (out / "sweep_report.json").read_text() == \
            (finetuned / "sweep_report.json").read_text()

    def test_eval_classification_metric_name(self, workspace, finetuned, tmp_path, capsys):
        report_path = tmp_path / "report.json"
        csv_path = tmp_path / "row.csv"
        code = main(["eval", "--model", str(finetuned / "finetuned.avsc"),
                     "--manifest", str(workspace["paths"]["classify"]),
                     "--out-json", str(report_path), "--out-csv", str(csv_path),
                     "--model-id", "desk"])
        assert code == 0
        report = json.loads(report_path.read_text())
        assert report["metric_name"] == "accuracy"
        assert 0.0 <= report["value"] <= 1.0
        with open(csv_path) as f:
            rows = list(csv.DictReader(f))
        assert rows[0]["model_id"] == "desk"
        assert rows[0]["metric"] == "accuracy"

    def test_detection_pipeline(self, workspace, tmp_path):
        out = workspace["root"] / "ft_det"
        code = main(["--seed", "3", "--config", str(workspace["config"]),
                     "finetune", "--checkpoint", str(workspace["checkpoint"]),
                     "--manifest", str(workspace["paths"]["detect"]),
                     "--out", str(out)])
        assert code == 0
        report = json.loads((out / "sweep_report.json").read_text())
        assert report["task"] == "detection"
        assert report["selection_metric"] == "map"

        report_path = tmp_path / "det_report.json"
        code = main(["eval", "--model", str(out / "finetuned.avsc"),
                     "--manifest", str(workspace["paths"]["detect"]),
                     "--out-json", str(report_path)])
        assert code == 0
        assert json.loads(report_path.read_text())["metric_name"] == "map"

        det_manifest = load_manifest(workspace["paths"]["detect"])
        wav = det_manifest.entries[0].path
        out_json = tmp_path / "events.json"
        code = main(["detect", "--model", str(out / "finetuned.avsc"),
                     "--input", str(wav), "--win", "2.0", "--hop", "1.0",
                     "--out", str(out_json)])
        assert code == 0
        payload = json.loads(out_json.read_text())
        assert len(payload["scores"]) == len(payload["segments"])
        assert len(payload["scores"][0]) == 2


class TestEmbedCommand:
    def test_rows_and_dims(self, workspace, tmp_path):
        out = tmp_path / "emb.csv"
        code = main(["embed", "--model", str(workspace["checkpoint"]),
                     "--manifest", str(workspace["paths"]["classify"]),
                     "--out", str(out)])
        assert code == 0
        with open(out) as f:
            rows = list(csv.reader(f))
        manifest = load_manifest(workspace["paths"]["classify"])
        assert len(rows) == len(manifest.entries) + 1  # header
        assert len(rows[0]) == 2 + 16  # recording_id, label, hidden dims

    def test_identical_clips_identical_vectors(self, workspace, tmp_path):
        import shutil

        manifest = load_manifest(workspace["paths"]["classify"])
        src = manifest.entries[0]
        dup_dir = tmp_path / "dup"
        (dup_dir / "wavs").mkdir(parents=True)
        for name in ("a", "b"):
            shutil.copy(src.path, dup_dir / "wavs" / f"{name}.wav")
        (dup_dir / "m.json").write_text(json.dumps({
            "task": "pretrain", "classes": [], "entries": "entries.jsonl"}))
        (dup_dir / "entries.jsonl").write_text("\n".join(
            json.dumps({"path": f"wavs/{n}.wav", "recording_id": n})
            for n in ("a", "b")) + "\n")
        out = tmp_path / "emb.jsonl"
        code = main(["embed", "--model", str(workspace["checkpoint"]),
                     "--manifest", str(dup_dir / "m.json"), "--out", str(out)])
        assert code == 0
        rows = [json.loads(l) for l in out.read_text().splitlines()]
        assert rows[0]["embedding"] == rows[1]["embedding"]


class TestTscoreCommand:
    def _write_rows(self, path, rows):
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["model_id", "dataset_id", "task", "metric", "value"])
            writer.writerows(rows)

    def test_identical_column_gives_50(self, tmp_path, capsys):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        self._write_rows(a, [["m1", "d1", "classification", "accuracy", "0.7"]])
        self._write_rows(b, [["m2", "d1", "classification", "accuracy", "0.7"]])
        code = main(["tscore", str(a), str(b)])
        assert code == 0
        out = capsys.readouterr().out
        rows = list(csv.reader(out.splitlines()))
        assert rows[1][1] == "50.0000" and rows[2][1] == "50.0000"

    def test_two_value_column_40_60(self, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        self._write_rows(a, [["m1", "d1", "classification", "accuracy", "0.0"]])
        self._write_rows(b, [["m2", "d1", "classification", "accuracy", "1.0"]])
        out = tmp_path / "t.csv"
        code = main(["tscore", str(a), str(b), "--out", str(out)])
        assert code == 0
        rows = list(csv.reader(out.read_text().splitlines()))
        assert [rows[1][1], rows[2][1]] == ["40.0000", "60.0000"]

    def test_output_stats(self, tmp_path):
        rng = np.random.default_rng(0)
        paths = []
        for i in range(5):
            p = tmp_path / f"m{i}.csv"
            self._write_rows(p, [[f"m{i}", d, "classification", "accuracy",
                                  f"{rng.random():.6f}"] for d in ("d1", "d2")])
            paths.append(str(p))
        out = tmp_path / "t.csv"
        assert main(["tscore", *paths, "--out", str(out)]) == 0
        rows = list(csv.reader(out.read_text().splitlines()))
        table = np.array([[float(x) for x in r[1:]] for r in rows[1:]])
        np.testing.assert_allclose(table.mean(axis=0), 50.0, atol=1e-3)
        np.testing.assert_allclose(table.std(axis=0), 10.0, atol=1e-3)

    def test_single_model_rejected(self, tmp_path):
        a = tmp_path / "a.csv"
        self._write_rows(a, [["m1", "d1", "classification", "accuracy", "0.5"]])
        assert main(["tscore", str(a)]) == 2


class TestExitCodes:
    def test_usage_error_unknown_command(self):
        assert main(["frobnicate"]) == 1

    def test_usage_error_missing_required(self):
        assert main(["pretrain"]) == 1

    def test_data_error_bad_checkpoint(self, tmp_path, workspace):
        bad = tmp_path / "bad.avsc"
        bad.write_bytes(b"not a checkpoint")
        code = main(["embed", "--model", str(bad),
                     "--manifest", str(workspace["paths"]["classify"]),
                     "--out", str(tmp_path / "e.csv")])
        assert code == 2
