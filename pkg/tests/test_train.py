import dataclasses
import io

import numpy as np
import pytest

from wavunits import autodiff as ad
from wavunits.audio import AudioClip
from wavunits.checkpoint import load_model, save_model
from wavunits.manifest import DatasetManifest, ManifestEntry
from wavunits.model import ModelConfig, init_model, n_encoder_frames
from wavunits.train import (
    Adam,
    AdamState,
    FinetuneConfig,
    PretrainConfig,
    TrainError,
    adam_step,
    finetune,
    pretrain,
    run_two_stage,
)
from wavunits.units import UnitSequence

from conftest import TINY_CFG, noise_clip, tone


def param(value, dtype=np.float64):
    return ad.Tensor(np.asarray(value, dtype=dtype), requires_grad=True)


class TestAdamStep:
    def test_zero_gradient_fixed_point(self):
        params = {"w": param([1.0, -2.0])}
        state = AdamState()
        adam_step(params, {"w": np.zeros(2)}, state, lr=0.1)
        np.testing.assert_array_equal(params["w"].data, [1.0, -2.0])

    def test_first_step_closed_form(self):
        # g=1 at step 1: bias correction gives m_hat = v_hat = 1,
        # so the update is exactly lr / (1 + eps)
        lr = 0.05
        params = {"w": param([0.0])}
        state = AdamState()
        adam_step(params, {"w": np.ones(1)}, state, lr=lr)
        expected = -lr / (1.0 + state.eps)
        np.testing.assert_allclose(params["w"].data, expected, rtol=1e-12)

    def test_identical_params_identical_trajectories(self):
        params = {"a": param([0.3]), "b": param([0.3])}
        state = AdamState()
        rng = np.random.default_rng(0)
        for _ in range(25):
            g = rng.normal(size=1)
            adam_step(params, {"a": g.copy(), "b": g.copy()}, state, lr=0.01)
            np.testing.assert_array_equal(params["a"].data, params["b"].data)

    def test_nonfinite_gradient_names_parameter(self):
        params = {"enc.w": param([1.0])}
        with pytest.raises(TrainError, match="enc.w"):
            adam_step(params, {"enc.w": np.array([np.nan])}, AdamState(), lr=0.1)

    def test_state_not_advanced_on_bad_gradient(self):
        params = {"w": param([1.0])}
        state = AdamState()
        with pytest.raises(TrainError):
            adam_step(params, {"w": np.array([np.inf])}, state, lr=0.1)
        assert state.step == 0


class TestAdamWrapper:
    def test_warmup_schedule(self):
        opt = Adam({"w": param([0.0])}, lr=1.0, warmup_steps=4)
        lrs = []
        for _ in range(6):
            lrs.append(opt.current_lr())
            opt.params["w"].grad = np.ones(1)
            opt.step()
        np.testing.assert_allclose(lrs, [0.25, 0.5, 0.75, 1.0, 1.0, 1.0])

    def test_gradient_clipping(self):
        w = param([0.0])
        opt = Adam({"w": w}, lr=0.1, clip_grad_norm=1.0)
        w.grad = np.array([100.0])
        opt.step()  # clipped to norm 1 -> same as g=1 at step 1
        np.testing.assert_allclose(w.data, -0.1 / (1.0 + 1e-8), rtol=1e-9)


def make_corpus(n_clips=6, seconds=0.5, seed=0, k=8):
    rng = np.random.default_rng(seed)
    clips, units = [], []
    freqs = (500.0, 1000.0, 2000.0)
    for i in range(n_clips):
        clip = tone(freqs[i % 3], seconds, amplitude=0.5, phase=rng.uniform(0, 6.28),
                    source_id=f"clip{i}")
        clip = AudioClip(samples=clip.samples + rng.normal(0, 0.01, len(clip)),
                         sample_rate=16000, source_id=clip.source_id)
        T = n_encoder_frames(len(clip))
        units.append(UnitSequence(units=np.full(T, i % 3, dtype=int) + (i % 2) * 3,
                                  source_id=clip.source_id, frame_rate=50))
        clips.append(clip)
    return clips, units


class TestPretrain:
    def test_runs_and_logs(self):
        clips, units = make_corpus()
        model = init_model(TINY_CFG, seed=0)
        log = io.StringIO()
        cfg = PretrainConfig(total_steps=5, batch_seconds=1.0, seed=0)
        result = pretrain(model, clips, units, cfg, log_writer=log)
        assert len(result["loss_trace"]) == 5
        lines = [line for line in log.getvalue().splitlines() if line]
        assert len(lines) == 5
        import json

        row = json.loads(lines[0])
        assert {"step", "stage", "loss", "lr", "wall_ms"} <= set(row)

    def test_initial_loss_near_log_k(self):
        clips, units = make_corpus(k=TINY_CFG.num_units)
        model = init_model(TINY_CFG, seed=1)
        cfg = PretrainConfig(total_steps=1, batch_seconds=3.0, seed=1)
        result = pretrain(model, clips, units, cfg)
        expected = np.log(TINY_CFG.num_units)
        assert abs(result["loss_trace"][0] - expected) / expected < 0.15

    def test_deterministic(self):
        clips, units = make_corpus()
        cfg = PretrainConfig(total_steps=8, batch_seconds=1.0, seed=3)
        m1 = init_model(TINY_CFG, seed=2)
        m2 = init_model(TINY_CFG, seed=2)
        r1 = pretrain(m1, clips, units, cfg)
        r2 = pretrain(m2, clips, units, cfg)
        assert r1["loss_trace"] == r2["loss_trace"]
        for name in m1.params:
            np.testing.assert_array_equal(m1.params[name].data, m2.params[name].data)

    def test_checkpoint_resume_identity(self, tmp_path):
        clips, units = make_corpus()
        model = init_model(TINY_CFG, seed=0)
        cfg = PretrainConfig(total_steps=3, batch_seconds=1.0, seed=0)
        pretrain(model, clips, units, cfg, checkpoint_dir=str(tmp_path))
        loaded, _, _ = load_model(tmp_path / "stage1_final.avsc")
        for name in model.params:
            np.testing.assert_array_equal(model.params[name].data,
                                          loaded.params[name].data)

    def test_length_mismatch_rejected(self):
        clips, units = make_corpus()
        bad = UnitSequence(units=np.zeros(3, dtype=int), frame_rate=50)
        model = init_model(TINY_CFG, seed=0)
        cfg = PretrainConfig(total_steps=1, seed=0)
        with pytest.raises(TrainError, match="frame count"):
            pretrain(model, clips, [bad] + units[1:], cfg)

    def test_unit_id_range_rejected(self):
        clips, units = make_corpus()
        T = len(units[0])
        bad = UnitSequence(units=np.full(T, TINY_CFG.num_units, dtype=int), frame_rate=50)
        model = init_model(TINY_CFG, seed=0)
        with pytest.raises(TrainError, match="k="):
            pretrain(model, clips, [bad] + units[1:], PretrainConfig(total_steps=1))

    def test_empty_corpus_rejected(self):
        model = init_model(TINY_CFG, seed=0)
        with pytest.raises(TrainError, match="empty"):
            pretrain(model, [], [], PretrainConfig(total_steps=1))


class TestRunTwoStage:
    def test_completes_with_provenance(self, tmp_path):
        clips, _ = make_corpus(n_clips=6, seconds=0.6)
        cfg1 = PretrainConfig(total_steps=4, batch_seconds=1.0, seed=0)
        cfg2 = PretrainConfig(total_steps=4, batch_seconds=1.0, seed=0)
        result = run_two_stage(clips, TINY_CFG, cfg1, cfg2,
                               checkpoint_dir=str(tmp_path))
        assert result["codebooks"]["stage1"].stage == 1
        assert result["codebooks"]["stage2"].stage == 2
        assert result["relabel_layer"] == TINY_CFG.transformer_depth // 2
        assert len(result["stage1"]["loss_trace"]) == 4
        assert len(result["stage2"]["loss_trace"]) == 4
        loaded, meta, codebooks = load_model(result["final_checkpoint"])
        assert meta["stage"] == 2
        assert set(codebooks) == {"stage1", "stage2"}
        assert meta["stage1_loss_trace"] == result["stage1"]["loss_trace"]

    def test_stage1_only(self, tmp_path):
        clips, _ = make_corpus(n_clips=6, seconds=0.6)
        cfg = PretrainConfig(total_steps=3, batch_seconds=1.0, seed=0)
        result = run_two_stage(clips, TINY_CFG, cfg, cfg, stages=1,
                               checkpoint_dir=str(tmp_path))
        assert result["stage2"] is None
        assert "stage2" not in result["codebooks"]
        assert not list(tmp_path.glob("stage2*"))

    def test_deterministic_across_runs(self):
        clips, _ = make_corpus(n_clips=6, seconds=0.6)
        cfg1 = PretrainConfig(total_steps=3, batch_seconds=1.0, seed=5)
        cfg2 = PretrainConfig(total_steps=3, batch_seconds=1.0, seed=5)
        a = run_two_stage(clips, TINY_CFG, cfg1, cfg2)
        b = run_two_stage(clips, TINY_CFG, cfg1, cfg2)
        for name in a["model"].params:
            np.testing.assert_array_equal(a["model"].params[name].data,
                                          b["model"].params[name].data)

    def test_fresh_init_differs_from_continue(self):
        clips, _ = make_corpus(n_clips=6, seconds=0.6)
        cfg1 = PretrainConfig(total_steps=3, batch_seconds=1.0, seed=5)
        cfg2 = PretrainConfig(total_steps=3, batch_seconds=1.0, seed=5)
        cont = run_two_stage(clips, TINY_CFG, cfg1, cfg2, stage2_init="continue")
        fresh = run_two_stage(clips, TINY_CFG, cfg1, cfg2, stage2_init="fresh")
        same = all(
            np.array_equal(cont["model"].params[n].data, fresh["model"].params[n].data)
            for n in cont["model"].params
        )
        assert not same


def make_manifest(tmp_path, per_split=(4, 2), seconds=0.5, seed=0):
    from wavunits.audio import save_wav

    rng = np.random.default_rng(seed)
    wav_dir = tmp_path / "wavs"
    wav_dir.mkdir(parents=True, exist_ok=True)
    classes = ("tone_500", "tone_1000", "tone_2000")
    freqs = {"tone_500": 500.0, "tone_1000": 1000.0, "tone_2000": 2000.0}
    entries = []
    for label in classes:
        for split, count in zip(("train", "valid"), per_split):
            for i in range(count):
                rid = f"{label}_{split}_{i}"
                clip = tone(freqs[label], seconds, amplitude=0.5,
                            phase=rng.uniform(0, 6.28))
                samples = clip.samples + rng.normal(0, 0.02, len(clip))
                save_wav(wav_dir / f"{rid}.wav", AudioClip(samples, 16000))
                entries.append(ManifestEntry(path=(wav_dir / f"{rid}.wav").resolve(),
                                             recording_id=rid, split=split, label=label))
    return DatasetManifest(task="classification", classes=classes,
                           entries=tuple(entries), dataset_id="mini")


class TestFinetune:
    def test_sweep_report_and_frozen_cnn(self, tmp_path):
        manifest = make_manifest(tmp_path)
        base = init_model(TINY_CFG, seed=0)
        before = {n: t.data.copy() for n, t in base.params.items()
                  if n.startswith("cnn.")}
        cfg = FinetuneConfig(lrs=(1e-4, 5e-4), epochs=3, batch_size=8, seed=0)
        result = finetune(base, manifest, cfg)
        report = result["report"]
        assert len(report["runs"]) == 2
        assert all(len(r["val_metrics"]) == 3 for r in report["runs"])
        assert report["best"]["lr"] in (1e-4, 5e-4)
        model = result["model"]
        for name, data in before.items():
            np.testing.assert_array_equal(model.params[name].data, data)
            assert not model.params[name].requires_grad
        assert model.classifier_mode == "softmax_ce"

    def test_deterministic_report(self, tmp_path):
        manifest = make_manifest(tmp_path)
        cfg = FinetuneConfig(lrs=(2e-4,), epochs=2, batch_size=8, seed=1)
        r1 = finetune(init_model(TINY_CFG, seed=0), manifest, cfg)
        r2 = finetune(init_model(TINY_CFG, seed=0), manifest, cfg)
        assert r1["report"] == r2["report"]

    def test_task_mismatch_rejected(self, tmp_path):
        manifest = make_manifest(tmp_path)
        cfg = FinetuneConfig(task="detection", epochs=1)
        with pytest.raises(TrainError, match="task"):
            finetune(init_model(TINY_CFG, seed=0), manifest, cfg)

    def test_unfrozen_cnn_changes_weights(self, tmp_path):
        manifest = make_manifest(tmp_path, per_split=(2, 1))
        base = init_model(TINY_CFG, seed=0)
        before = {n: t.data.copy() for n, t in base.params.items()
                  if n.startswith("cnn.")}
        cfg = FinetuneConfig(lrs=(1e-3,), epochs=2, batch_size=8,
                             freeze_cnn=False, seed=0)
        result = finetune(base, manifest, cfg)
        changed = any(
            not np.array_equal(result["model"].params[n].data, before[n])
            for n in before
        )
        assert changed
