import json

import numpy as np
import pytest
import torch

from crossreid.errors import ConfigurationError
from crossreid.model import load_checkpoint
from crossreid.trainer import (
    METRIC_FIELDS,
    TrainConfig,
    desk_config,
    lr_at,
    save_run,
    train,
    train_config_hash,
    write_metrics_csv,
)


class TestConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert c.batch_size == 64
        assert c.base_lr == pytest.approx(7e-4)
        assert c.weight_decay == pytest.approx(5e-4)

    def test_decay_must_precede_end(self):
        with pytest.raises(ConfigurationError):
            TrainConfig(epochs=50, decay_epochs=(40, 70))
        with pytest.raises(ConfigurationError):
            TrainConfig(epochs=100, decay_epochs=(70, 40))

    def test_desk_preset_is_small(self):
        c = desk_config("ftwa", seed=3)
        assert c.P * c.K <= 16 and c.backbone == "tiny" and c.seed == 3

    def test_desk_preset_epoch_override_rescales_decay(self):
        c = desk_config("ftwa", seed=0, epochs=8)
        assert c.epochs == 8
        assert all(e < 8 for e in c.decay_epochs)
        assert c.warmup_epochs <= 8

    def test_hash_sensitive_to_seed(self):
        a = train_config_hash(desk_config("ftwa", seed=0))
        b = train_config_hash(desk_config("ftwa", seed=1))
        assert a != b


class TestSchedule:
    def test_warmup_start_tenth_of_base(self):
        c = TrainConfig()
        assert lr_at(c, 0) == pytest.approx(7e-5)

    def test_plateau_at_base(self):
        c = TrainConfig()
        for epoch in (10, 25, 39):
            assert lr_at(c, epoch) == pytest.approx(7e-4)

    def test_step_decays(self):
        c = TrainConfig()
        assert lr_at(c, 40) == pytest.approx(1.4e-4)
        assert lr_at(c, 69) == pytest.approx(1.4e-4)
        assert lr_at(c, 70) == pytest.approx(2.8e-5)

    def test_warmup_is_linear(self):
        c = TrainConfig()
        vals = [lr_at(c, e) for e in range(c.warmup_epochs)]
        diffs = np.diff(vals)
        np.testing.assert_allclose(diffs, diffs[0], rtol=1e-9)

    def test_out_of_range_epoch_rejected(self):
        with pytest.raises(ConfigurationError):
            lr_at(TrainConfig(), 120)


class TestTrainingLoop:
    def test_history_layout(self, quick_train_result):
        config, result = quick_train_result
        assert len(result.history) == config.epochs * config.batches_per_epoch
        assert set(result.history[0]) == set(METRIC_FIELDS)
        assert not result.diverged

    def test_losses_finite_and_lr_follows_schedule(self, quick_train_result):
        config, result = quick_train_result
        for row in result.history:
            assert np.isfinite(row["total"])
            assert row["lr"] == pytest.approx(lr_at(config, row["epoch"]))

    def test_ftwa_weights_in_unit_interval(self, quick_train_result):
        _, result = quick_train_result
        for row in result.history:
            for key in ("w_hr", "w_shr", "w_lr", "w_slr"):
                assert 0.0 < row[key] < 1.0

    def test_id_map_is_dense(self, quick_train_result, split):
        _, result = quick_train_result
        assert sorted(result.id_map.values()) == list(range(len(result.id_map)))
        assert set(result.id_map) == {r.person_id for r in split.train}

    def test_deterministic_reruns_identical(self, split):
        def run():
            config = desk_config("ftwa_b", seed=5, epochs=2, decay_epochs=(1,),
                                 warmup_epochs=1, batches_per_epoch=2,
                                 deterministic=True)
            return train(config, split.train).history
        a, b = run(), run()
        assert a == b

    def test_baseline_trains_without_lr_records(self, split):
        from crossreid.data import ResolutionTag
        hr_only = [r for r in split.train if r.tag == ResolutionTag.REAL_HR]
        config = desk_config("baseline", seed=0, epochs=2, decay_epochs=(1,),
                             warmup_epochs=0, batches_per_epoch=1)
        result = train(config, hr_only)
        assert len(result.history) == 2
        assert all(row["transform"] == 0.0 for row in result.history)

    def test_transform_loss_logged_only_with_transform(self, split):
        config = desk_config("ftwa_r", seed=0, epochs=1, decay_epochs=(),
                             warmup_epochs=0, batches_per_epoch=1)
        result = train(config, split.train)
        assert result.history[0]["transform"] > 0.0


class TestArtifacts:
    def test_metrics_csv_byte_reproducible(self, quick_train_result, tmp_path):
        _, result = quick_train_result
        a = write_metrics_csv(result.history, tmp_path / "a.csv").read_bytes()
        b = write_metrics_csv(result.history, tmp_path / "b.csv").read_bytes()
        assert a == b
        header = a.decode().splitlines()[0]
        assert header == ",".join(METRIC_FIELDS)

    def test_save_run_layout_and_reload(self, quick_train_result, tmp_path):
        config, result = quick_train_result
        manifest = save_run(result, config, tmp_path / "run")
        assert (tmp_path / "run" / "checkpoint.pt").is_file()
        assert (tmp_path / "run" / "metrics.csv").is_file()
        run_meta = json.loads((tmp_path / "run" / "run.json").read_text())
        assert run_meta["variant"] == "ftwa"
        assert run_meta["config_hash"] == train_config_hash(config)

        model, extra = load_checkpoint(tmp_path / "run" / "checkpoint.pt")
        assert model.config.variant == "ftwa"
        assert extra["id_map"] == {str(k): v for k, v in result.id_map.items()}
        x = torch.randn(1, 3, 64, 32)
        with torch.no_grad():
            assert torch.equal(result.model.backbone(x, "hr").values,
                               model.backbone(x, "hr").values)
