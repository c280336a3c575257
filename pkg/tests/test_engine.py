"""Training, checkpoint reload, generation, evaluation and the command-line entry point on a tiny run."""

import json

import pytest
import torch

from api.config import CONFIG_ECHO, load_config
from api.errors import ContextLengthError, TrainingDivergedError
from api.models.report_model import ContextImages
from api.services.data_pipeline import collate_reports
from api.services import engine as engine_module
from api.services.engine import (
    CHECKPOINT_NAME,
    RUN_LOG_NAME,
    ReportEngine,
    cmd_evaluate,
    cmd_generate,
    cmd_train,
)
from main import main
from tests.conftest import tiny_overrides, write_balanced_dataset


def tiny(tiny_data_dir, out_dir, **extra):
    return load_config(overrides={**tiny_overrides(tiny_data_dir, out_dir), **extra})


class TestTraining:
    def test_outputs_written(self, trained_run):
        config, result = trained_run
        out = result.checkpoint.parent
        assert result.checkpoint.name == CHECKPOINT_NAME and result.checkpoint.exists()
        assert (out / CONFIG_ECHO).exists()
        assert len(result.epoch_losses) == 2
        assert result.steps == 6  # 12 training records, batches of 4
        assert all(torch.isfinite(torch.tensor(result.epoch_losses)))

        log = json.loads((out / RUN_LOG_NAME).read_text())
        assert log["metadata"]["total_steps"] == 6
        assert log["metadata"]["epoch_losses"] == result.epoch_losses
        assert log["metadata"]["context_pairs"] == 2
        assert {"epoch", "step", "loss", "tokens"} <= set(log["data"][0])

    def test_zero_learning_rate_keeps_epoch_loss_constant(self, tiny_data_dir, tmp_path):
        config = tiny(tiny_data_dir, tmp_path, **{"train.learning_rate": 0.0, "train.epochs": 3})
        losses = cmd_train(config).epoch_losses
        assert losses[1] == pytest.approx(losses[0], rel=1e-5)
        assert losses[2] == pytest.approx(losses[0], rel=1e-5)

    def test_epoch_loss_matches_full_pass(self, tiny_data_dir, tmp_path):
        engine = ReportEngine(tiny(tiny_data_dir, tmp_path, **{"train.learning_rate": 0.0, "train.epochs": 1}))
        result = engine.train()
        assert engine.evaluate_loss("train") == pytest.approx(result.epoch_losses[0], rel=1e-5)

    def test_repeat_runs_are_identical(self, tiny_data_dir, tmp_path):
        a = ReportEngine(tiny(tiny_data_dir, tmp_path / "a"))
        b = ReportEngine(tiny(tiny_data_dir, tmp_path / "b"))
        assert a.train().epoch_losses == b.train().epoch_losses
        for (name, pa), (_, pb) in zip(a.model.state_dict().items(), b.model.state_dict().items()):
            assert torch.equal(pa, pb), name

    def test_training_reduces_loss(self, tiny_data_dir, tmp_path):
        losses = cmd_train(tiny(tiny_data_dir, tmp_path, **{"train.epochs": 4})).epoch_losses
        assert losses[-1] < losses[0]

    def test_without_context(self, tiny_data_dir, tmp_path):
        engine = ReportEngine(tiny(tiny_data_dir, tmp_path, **{"context.n_pairs": 0}))
        result = engine.train()
        assert engine.index is None
        assert len(result.epoch_losses) == 2
        echo = json.loads((tmp_path / CONFIG_ECHO).read_text())
        assert echo["context"]["n_pairs"] == 0

    @pytest.mark.parametrize("stage", ["after_projection", "before_projection"])
    def test_residual_stages_train(self, tiny_data_dir, tmp_path, stage):
        result = cmd_train(tiny(tiny_data_dir, tmp_path, **{"context.residual_stage": stage, "train.epochs": 1}))
        assert len(result.epoch_losses) == 1

    def test_frozen_backbone_is_unchanged(self, tiny_data_dir, tmp_path):
        engine = ReportEngine(tiny(tiny_data_dir, tmp_path, **{"model.freeze_backbone": True, "train.epochs": 1}))
        engine.prepare()
        before = {k: v.clone() for k, v in engine.model.backbone.state_dict().items()}
        engine.train()
        for name, value in engine.model.backbone.state_dict().items():
            assert torch.equal(value, before[name]), name

    def test_attention_variants_train(self, tiny_data_dir, tmp_path):
        config = tiny(
            tiny_data_dir, tmp_path, **{"model.block_kind": "attention", "model.decoder_kind": "attention", "train.epochs": 1}
        )
        assert len(cmd_train(config).epoch_losses) == 1

    def test_non_finite_loss_stops_training(self, tiny_data_dir, tmp_path, monkeypatch):
        monkeypatch.setattr(engine_module, "loss", lambda *args, **kwargs: torch.tensor(float("nan"), requires_grad=True))
        with pytest.raises(TrainingDivergedError) as info:
            cmd_train(tiny(tiny_data_dir, tmp_path))
        assert (info.value.epoch, info.value.step) == (0, 0)

    def test_tensorboard_events(self, tiny_data_dir, tmp_path):
        cmd_train(tiny(tiny_data_dir, tmp_path, **{"train.tensorboard": True, "train.epochs": 1}))
        assert any((tmp_path / "tensorboard").iterdir())


class TestGeneration:
    def test_reload_generates_the_same_reports(self, trained_run, tiny_manifest):
        config, result = trained_run
        engine = ReportEngine.from_checkpoint(result.checkpoint, config)
        records = tiny_manifest.split("test")[:3]
        first = engine.generate_reports(records=records)
        again = ReportEngine.from_checkpoint(result.checkpoint, config).generate_reports(records=records)
        assert [r.hypothesis for r in first] == [r.hypothesis for r in again]
        assert [r.reference for r in first] == [r.report for r in records]

    def test_generate_and_evaluate_commands(self, trained_run, tmp_path):
        config, result = trained_run
        out = config.model_copy(update={"output_dir": str(tmp_path)})
        results = cmd_generate(out, result.checkpoint)
        payload = json.loads(results.read_text())
        assert payload["metadata"]["split"] == "test"
        assert payload["metadata"]["samples"] == 6 == len(payload["data"])
        assert (tmp_path / "reports.txt").read_text().count("\n") == 6

        report = cmd_evaluate(out, results).to_dict()
        assert report["corpus_size"] == 6
        assert 0.0 <= report["BLEU-4"] <= 1.0
        assert json.loads((tmp_path / "metrics.json").read_text())["corpus_size"] == 6

    def test_call_overrides_do_not_touch_config(self, trained_run, tiny_manifest):
        config, result = trained_run
        engine = ReportEngine.from_checkpoint(result.checkpoint, config)
        rows = engine.generate_reports(records=tiny_manifest.split("val")[:1], beam_width=1, max_len=3)
        assert len(rows[0].hypothesis.split()) <= 3
        assert engine.config.generate.beam_width == config.generate.beam_width

    def test_reload_keeps_trained_resolution(self, trained_run):
        config, result = trained_run
        fresh = load_config(overrides={"data.data_dir": config.data.data_dir})
        engine = ReportEngine.from_checkpoint(result.checkpoint, fresh)
        assert engine.config.data.image_size == config.data.image_size
        assert engine.config.data.data_dir == config.data.data_dir

    def test_missing_checkpoint(self, tiny_config, tmp_path):
        with pytest.raises(FileNotFoundError):
            cmd_generate(tiny_config, tmp_path / "none.ckpt")

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            ReportEngine(load_config(overrides={"data.data_dir": str(tmp_path)})).load_data()

    def test_zero_pairs_match_the_no_context_model(self, trained_run, tiny_manifest):
        config, result = trained_run
        engine = ReportEngine.from_checkpoint(result.checkpoint, config)
        engine.load_data()
        records = tiny_manifest.split("test")[:2]
        dataset = engine._dataset("test")
        images = torch.stack([dataset.image(r) for r in records])
        reports = collate_reports([dataset[i] for i in range(2)])["report_ids"]
        empty = ContextImages(
            positives=torch.zeros(2, 0, *images.shape[1:]), negatives=torch.zeros(2, 0, *images.shape[1:])
        )
        model = engine.model
        with torch.no_grad():
            assert torch.equal(model.build_prompt(images, empty).embeddings, model.build_prompt(images, None).embeddings)
            assert torch.equal(model(images, reports, empty)[0], model(images, reports, None)[0])
        assert model.generate(images, empty, beam_width=2, max_len=6) == model.generate(images, None, beam_width=2, max_len=6)

        context = engine.config.context.model_copy(update={"n_pairs": 0})
        engine.config = engine.config.model_copy(update={"context": context})
        rows = engine.generate_reports(records=records, beam_width=2, max_len=6)
        expected = [model.generate(images[i : i + 1], None, beam_width=2, max_len=6)[0] for i in range(2)]
        assert [r.hypothesis for r in rows] == [engine.vocab.decode(ids) for ids in expected]


class TestContextWindow:
    def test_default_config_builds_and_decodes(self, tmp_path):
        write_balanced_dataset(tmp_path / "data", num_samples=16, image_size=224)
        engine = ReportEngine(load_config(overrides={"data.data_dir": str(tmp_path / "data")}))
        assert engine.config.model.context_window is None
        engine.prepare()
        window = engine.config.model.context_window
        assert window >= 784 + engine.config.generate.max_len + 1
        assert engine.model.decoder.config.context_window == window

        dataset = engine._dataset("train")
        batch = collate_reports([dataset[0]])
        with torch.no_grad():
            logits, tb = engine.model(batch["images"], batch["report_ids"], engine.context_images(batch["ids"]))
        assert tb.prompt_length > 784
        assert logits.shape[1] <= window

        row = engine.generate_reports(records=[dataset.records[0]], beam_width=1)[0]
        assert row.id == dataset.records[0].id

    def test_sized_window_is_saved_with_the_run(self, trained_run):
        config, result = trained_run
        echoed = json.loads((result.checkpoint.parent / CONFIG_ECHO).read_text())
        assert echoed["model"]["context_window"] is not None
        reloaded = ReportEngine.from_checkpoint(result.checkpoint, config)
        assert reloaded.model.decoder.config.context_window == echoed["model"]["context_window"]

    def test_explicit_window_too_short_for_the_prompt(self, tiny_data_dir, tmp_path):
        # 4 visual tokens, 4 residuals and 9 decode positions pass the config check; the instruction does not fit
        engine = ReportEngine(tiny(tiny_data_dir, tmp_path, **{"model.context_window": 17}))
        with pytest.raises(ContextLengthError):
            engine.prepare()


class TestCommandLine:
    def test_synth_data(self, tmp_path):
        code = main(["synth-data", "--data-dir", str(tmp_path / "d"), "--num-samples", "10", "--image-size", "16"])
        assert code == 0
        assert (tmp_path / "d" / "manifest.tsv").exists()
        assert (tmp_path / "d" / CONFIG_ECHO).exists()

    def test_train_from_config_file(self, tiny_data_dir, tmp_path):
        nested = {}
        for dotted, value in tiny_overrides(tiny_data_dir, tmp_path / "run").items():
            *parents, leaf = dotted.split(".")
            node = nested
            for part in parents:
                node = node.setdefault(part, {})
            node[leaf] = value
        path = tmp_path / "run.json"
        path.write_text(json.dumps(nested), encoding="utf-8")
        assert main(["train", "--config", str(path), "--epochs", "1"]) == 0
        assert (tmp_path / "run" / CHECKPOINT_NAME).exists()

    def test_evaluate_prints_table(self, tmp_path, capsys):
        rows = [
            {"id": "a", "hypothesis": "the lungs are clear", "reference": "the lungs are clear"},
            {"id": "b", "hypothesis": "small effusion", "reference": "a small effusion"},
        ]
        (tmp_path / "results.json").write_text(json.dumps({"metadata": {}, "data": rows}), encoding="utf-8")
        assert main(["evaluate", "--results", str(tmp_path / "results.json"), "--output-dir", str(tmp_path)]) == 0
        assert "CIDEr" in capsys.readouterr().out

    def test_failures_return_one(self, tmp_path):
        assert main(["generate", "--checkpoint", str(tmp_path / "none.ckpt"), "--output-dir", str(tmp_path)]) == 1
        assert main(["evaluate", "--results", str(tmp_path / "none.json"), "--output-dir", str(tmp_path)]) == 1
        assert main(["train", "--data-dir", str(tmp_path / "empty"), "--output-dir", str(tmp_path)]) == 1
        assert main(["bench", "--lengths", "64", "32", "--output-dir", str(tmp_path)]) == 1
