import dataclasses
import os

import numpy as np
import pytest
from mock import patch

from components.neuro_ssl import autodiff as ad
from components.neuro_ssl.core import (LeakageError, ModelConfig, NonFiniteLossError, RangeError, Rng, ShapeError,
                                       TrainConfig, UnknownDatasetError)
from components.neuro_ssl.data import SynthSpec, generate_synthetic, labelled_windows, make_windows
from components.neuro_ssl.evaluation import t_test_vs_chance
from components.neuro_ssl.model import BACKBONE_PREFIXES, CortexModel, save_model
from components.neuro_ssl.train import (RUN_COLUMNS, RunRecord, chance_level, check_leakage, evaluate_zero_shot,
                                        finetune, pretext_accuracies, pretrain, rho_sweep_configs,
                                        train_supervised_baseline)


@pytest.fixture
def windows(tiny_dataset):
    return [w for r in tiny_dataset.recordings for w in make_windows(r, 0.5)]


@pytest.fixture
def speech_items(tiny_dataset):
    return labelled_windows(tiny_dataset.recordings, tiny_dataset.tracks, 'speech', 0.5, 5)


@pytest.fixture
def model(tiny_model_cfg):
    return CortexModel(tiny_model_cfg, Rng(0), dtype=np.float64)


class TestRunRecord:

    def test_test_metric_follows_first_best_val_epoch(self):
        record = RunRecord('finetune', 0)
        for epoch, (val, test) in enumerate([(0.5, 0.1), (0.7, 0.2), (0.7, 0.3)]):
            record.add_row(epoch=epoch, val_metric=val, test_metric=test)
        assert record.best_epoch == 1
        assert record.test_metric == 0.2

    def test_no_validation(self):
        record = RunRecord('finetune', 0)
        record.add_row(epoch=0)
        assert record.best_epoch is None
        assert record.test_metric is None

    def test_unknown_column(self):
        with pytest.raises(RangeError):
            RunRecord('pretrain', 0).add_row(accuracy=1.0)

    def test_csv_leaves_missing_cells_empty(self):
        record = RunRecord('pretrain', 0)
        record.add_row(epoch=0, loss_ssl=0.25)
        header, row = record.to_csv().splitlines()
        assert header == ','.join(RUN_COLUMNS)
        assert row == '0,,,,0.25,,,,,,,'

    def test_write(self, tmpdir):
        record = RunRecord('pretrain', 3, config='lr = 0.1\n', extras={'checkpoint': 'ckpt-ab.bin'})
        record.add_row(epoch=0, val_metric=0.5, test_metric=0.4)
        record.write(str(tmpdir), 'seed-3')
        for suffix in ('.csv', '.summary.txt', '.config.ini'):
            assert os.path.isfile(os.path.join(str(tmpdir), 'seed-3' + suffix))
        summary = tmpdir.join('seed-3.summary.txt').read()
        assert 'test_metric: 0.4' in summary
        assert 'checkpoint: ckpt-ab.bin' in summary
        assert 'wall_clock' not in summary


class TestPretrain:

    def test_rows_per_epoch(self, model, windows, tiny_train_cfg):
        record = pretrain(model, windows, tiny_train_cfg)
        assert [row['epoch'] for row in record.rows] == [0, 1]
        row = record.rows[0]
        weighted = row['loss_band'] + row['loss_phase'] + row['loss_amplitude']
        assert row['loss_ssl'] == pytest.approx(weighted)
        assert row['loss_supervised'] is None
        assert 0.0 <= row['val_metric'] <= 1.0
        assert record.pretrain_hours == pytest.approx(64 * 0.5 / 3600)

    def test_deterministic(self, tiny_model_cfg, windows, tiny_train_cfg):
        first = pretrain(CortexModel(tiny_model_cfg, Rng(0), dtype=np.float64), windows, tiny_train_cfg)
        second = pretrain(CortexModel(tiny_model_cfg, Rng(0), dtype=np.float64), windows, tiny_train_cfg)
        assert first.to_csv() == second.to_csv()

    def test_single_task_weights_still_log_every_loss(self, model, windows, tiny_train_cfg):
        cfg = dataclasses.replace(tiny_train_cfg, loss_weights=(1.0, 0.0, 0.0), pretrain_epochs=1)
        row = pretrain(model, windows, cfg).rows[0]
        assert row['loss_ssl'] == row['loss_band']
        assert row['loss_phase'] > 0
        assert row['loss_amplitude'] > 0

    def test_zero_semi_weight_matches_pure_ssl(self, tiny_model_cfg, windows, speech_items, tiny_train_cfg):
        cfg = dataclasses.replace(tiny_train_cfg, pretrain_epochs=1)
        pure = pretrain(CortexModel(tiny_model_cfg, Rng(0), dtype=np.float64), windows, cfg)
        semi_off = pretrain(CortexModel(tiny_model_cfg, Rng(0), dtype=np.float64), windows,
                            dataclasses.replace(cfg, semi_supervised_weight=0.0), labelled=speech_items)
        assert pure.to_csv() == semi_off.to_csv()

    def test_semi_supervised_term(self, model, windows, speech_items, tiny_train_cfg):
        cfg = dataclasses.replace(tiny_train_cfg, pretrain_epochs=1)
        row = pretrain(model, windows, cfg, labelled=speech_items).rows[0]
        assert row['loss_supervised'] > 0
        assert row['loss_total'] == pytest.approx(row['loss_ssl'] + row['loss_supervised'])
        assert 'speech' in model.heads

    def test_unknown_dataset(self, windows, tiny_train_cfg):
        model = CortexModel(ModelConfig(d_shared=8, d_backbone=8, conv_channels=(8, 8, 8, 8), projector_hidden=8,
                                        head_hidden=8, dataset_sensor_counts={'other': 8}), Rng(0))
        with pytest.raises(UnknownDatasetError):
            pretrain(model, windows, tiny_train_cfg)

    def test_non_finite_loss(self, model, windows, tiny_train_cfg):
        model.projector.output.bias.values = np.full_like(model.projector.output.bias.values, np.nan)
        with pytest.raises(NonFiniteLossError) as excinfo:
            pretrain(model, windows, tiny_train_cfg)
        assert 'epoch 0 batch 0' in str(excinfo.value)
        assert excinfo.value.exit_code == 4

    def test_pretext_accuracies(self, model, windows, tiny_train_cfg):
        accuracies = pretext_accuracies(model, windows[:10], tiny_train_cfg, Rng(1))
        assert set(accuracies) == {'band', 'phase', 'amplitude'}
        assert all(0.0 <= v <= 1.0 for v in accuracies.values())
        assert pretext_accuracies(model, [], tiny_train_cfg, Rng(1)) is None

    @pytest.mark.slow
    def test_loss_decreases(self):
        spec = SynthSpec(n_subjects=4, n_sensors=16, duration_s=60.0, seed=1)
        dataset = generate_synthetic(spec)
        windows = [w for r in dataset.recordings for w in make_windows(r, 0.5)]
        cfg = ModelConfig(d_shared=32, d_backbone=32, conv_channels=(32, 32, 32, 32), projector_hidden=32,
                          head_hidden=32, dataset_sensor_counts={'synth': 16})
        train = TrainConfig(lr=0.001, pretrain_epochs=2, batch_size=32)
        record = pretrain(CortexModel(cfg, Rng(0)), windows, train)
        assert record.rows[1]['loss_ssl'] < record.rows[0]['loss_ssl']

    @pytest.mark.slow
    def test_pretext_tasks_learnable(self):
        spec = SynthSpec(n_subjects=8, n_sensors=32, duration_s=600.0, seed=2)
        dataset = generate_synthetic(spec)
        windows = [w for r in dataset.recordings for w in make_windows(r, 0.5)]
        cfg = ModelConfig(d_shared=64, d_backbone=64, conv_channels=(64, 64, 64, 64), projector_hidden=64,
                          head_hidden=64, dataset_sensor_counts={'synth': 32})
        train = TrainConfig(lr=0.001, pretrain_epochs=30, batch_size=64)
        model = CortexModel(cfg, Rng(0))
        pretrain(model, windows, train)
        held_out = [w for r in generate_synthetic(dataclasses.replace(spec, n_subjects=1, seed=9)).recordings
                    for w in make_windows(r, 0.5)]
        accuracies = pretext_accuracies(model, held_out, train, Rng(3))
        for task in accuracies:
            assert accuracies[task] >= 3 * chance_level(task), task


class TestFinetune:

    def test_shallow_keeps_backbone(self, model, speech_items, tiny_train_cfg):
        record = finetune(model, speech_items, tiny_train_cfg, 'speech', mode='shallow', epochs=1)
        assert record.extras['backbone_hash_before'] == record.extras['backbone_hash_after']
        assert len(record.rows) == 1
        assert 0.0 <= record.test_metric <= 1.0

    def test_deep_moves_backbone(self, model, speech_items, tiny_train_cfg):
        record = finetune(model, speech_items, tiny_train_cfg, 'speech', mode='deep', epochs=1)
        assert record.extras['backbone_hash_before'] != record.extras['backbone_hash_after']

    def test_registers_new_dataset(self, speech_items, tiny_train_cfg):
        model = CortexModel(ModelConfig(d_shared=8, d_backbone=8, conv_channels=(8, 8, 8, 8), projector_hidden=8,
                                        head_hidden=8, dataset_sensor_counts={'other': 6}), Rng(0),
                            dtype=np.float64)
        record = finetune(model, speech_items, tiny_train_cfg, 'speech', epochs=1)
        assert 'synth' in model.encoder.projections
        assert record.extras['backbone_hash_before'] == record.extras['backbone_hash_after']

    def test_voicing(self, model, tiny_dataset, tiny_train_cfg):
        items = labelled_windows(tiny_dataset.recordings, tiny_dataset.tracks, 'voicing', 0.5, 5)
        record = finetune(model, items, tiny_train_cfg, 'voicing', epochs=1)
        assert record.task == 'voicing'
        assert model.heads['voicing'].tau == 5

    def test_speech_label_shape(self, model, speech_items, tiny_train_cfg):
        broken = [(w, labels[:4]) for w, labels in speech_items]
        with pytest.raises(ShapeError):
            finetune(model, broken, tiny_train_cfg, 'speech')

    def test_bad_arguments(self, model, speech_items, tiny_train_cfg):
        with pytest.raises(RangeError):
            finetune(model, speech_items, tiny_train_cfg, 'sentiment')
        with pytest.raises(RangeError):
            finetune(model, [], tiny_train_cfg, 'speech')

    def test_deterministic(self, tiny_model_cfg, speech_items, tiny_train_cfg):
        runs = [finetune(CortexModel(tiny_model_cfg, Rng(0), dtype=np.float64), speech_items, tiny_train_cfg,
                         'speech', epochs=1).to_csv() for _ in range(2)]
        assert runs[0] == runs[1]

    @pytest.mark.parametrize('kind', ['linear', 'mlp'])
    def test_supervised_baseline(self, speech_items, tiny_train_cfg, kind):
        record = train_supervised_baseline(speech_items, tiny_train_cfg, 'speech', kind, 5, epochs=2, hidden=8)
        assert record.mode == 'supervised-' + kind
        assert len(record.rows) == 2

    def test_restores_best_validation_epoch(self, model, speech_items, tiny_train_cfg):
        val_metrics = iter([0.9, 0.5, 0.6])
        snapshots, calls = [], []

        def scripted_metric(forward, items, batch_size, rng):
            # val and test alternate, val first
            calls.append(len(items))
            if len(calls) % 2 == 0:
                return 0.5
            snapshots.append({n: np.array(p.values, copy=True) for n, p in model.heads['speech'].named_parameters()})
            return next(val_metrics)

        with patch('components.neuro_ssl.train._metric', side_effect=scripted_metric):
            record = finetune(model, speech_items, tiny_train_cfg, 'speech', epochs=3)
        assert [row['val_metric'] for row in record.rows] == [0.9, 0.5, 0.6]
        assert record.best_epoch == 0
        assert any(not np.array_equal(snapshots[2][n], snapshots[0][n]) for n in snapshots[0])
        for name, p in model.heads['speech'].named_parameters():
            assert np.array_equal(p.values, snapshots[0][name])

    @pytest.mark.parametrize('mode, moved', [('shallow', False), ('deep', True)])
    def test_checkpointed_backbone_bytes(self, model, speech_items, tiny_train_cfg, tmpdir, mode, moved):
        paths = [str(tmpdir.join('before.bin')), str(tmpdir.join('after.bin'))]
        save_model(paths[0], model)
        finetune(model, speech_items, tiny_train_cfg, 'speech', mode=mode, epochs=1)
        save_model(paths[1], model)
        before, after = ({n: a for n, a in ad.read_checkpoint(path)[1].items() if n.startswith(BACKBONE_PREFIXES)}
                         for path in paths)
        assert sorted(before) == sorted(after)
        assert any(not np.array_equal(before[n], after[n]) for n in before) == moved

    @pytest.mark.slow
    def test_pretraining_helps_shallow_finetuning(self):
        spec = SynthSpec(n_subjects=4, n_sensors=16, duration_s=300.0, seed=5)
        dataset = generate_synthetic(spec)
        windows = [w for r in dataset.recordings for w in make_windows(r, 0.5)]
        items = labelled_windows(dataset.recordings, dataset.tracks, 'speech', 0.5, 5)
        cfg = ModelConfig(d_shared=32, d_backbone=32, conv_channels=(32, 32, 32, 32), projector_hidden=32,
                          head_hidden=32, dataset_sensor_counts={'synth': 16})
        pretrained, control = [], []
        for seed in range(3):
            train = TrainConfig(lr=0.001, pretrain_epochs=10, finetune_epochs=10, batch_size=32, seed=seed)
            model = CortexModel(cfg, Rng(seed).fork('model'))
            pretrain(model, windows, train)
            pretrained.append(finetune(model, items, train, 'speech', mode='shallow').test_metric)
            random_backbone = CortexModel(cfg, Rng(seed).fork('model'))
            control.append(finetune(random_backbone, items, train, 'speech', mode='shallow').test_metric)
        assert np.mean(pretrained) - np.mean(control) >= 0.05
        assert t_test_vs_chance(pretrained, chance_level('speech')).p < 0.05


class TestZeroShot:

    @pytest.fixture
    def conditioned(self, tiny_model_cfg):
        cfg = dataclasses.replace(tiny_model_cfg, conditioning_mode='film')
        return CortexModel(cfg, Rng(0), subject_ids=['sub-01'], dtype=np.float64)

    def test_seen_and_unseen_reported_separately(self, conditioned, speech_items, tiny_train_cfg):
        training = [item for item in speech_items if item[0].subject_id == 'sub-01']
        finetune(conditioned, training, tiny_train_cfg, 'speech', epochs=1)
        record = evaluate_zero_shot(conditioned, speech_items, ['sub-02'], 'speech', tiny_train_cfg,
                                    training_items=training)
        assert [row['group'] for row in record.rows] == ['seen', 'unseen']
        assert [row['n_subjects'] for row in record.rows] == [1, 1]
        assert [row['n_windows'] for row in record.rows] == [40, 40]

    def test_leakage_through_training_items(self, speech_items):
        with pytest.raises(LeakageError):
            check_leakage(speech_items, ['sub-02'])

    def test_leakage_through_subject_table(self, conditioned, speech_items, tiny_train_cfg):
        with pytest.raises(LeakageError):
            evaluate_zero_shot(conditioned, speech_items, ['sub-01'], 'speech', tiny_train_cfg)

    def test_leakage_through_pretraining_without_conditioning(self, model, windows, speech_items, tiny_train_cfg):
        assert model.subjects is None
        pretrain(model, windows, dataclasses.replace(tiny_train_cfg, pretrain_epochs=1))
        assert model.trained_subjects == {'sub-01', 'sub-02'}
        training = [item for item in speech_items if item[0].subject_id == 'sub-01']
        with pytest.raises(LeakageError) as excinfo:
            evaluate_zero_shot(model, speech_items, ['sub-02'], 'speech', tiny_train_cfg, training_items=training)
        assert 'sub-02' in str(excinfo.value)

    def test_pretraining_on_seen_subjects_only(self, model, windows, speech_items, tiny_train_cfg):
        seen_windows = [w for w in windows if w.subject_id == 'sub-01']
        training = [item for item in speech_items if item[0].subject_id == 'sub-01']
        pretrain(model, seen_windows, dataclasses.replace(tiny_train_cfg, pretrain_epochs=1))
        finetune(model, training, tiny_train_cfg, 'speech', epochs=1)
        assert model.trained_subjects == {'sub-01'}
        record = evaluate_zero_shot(model, speech_items, ['sub-02'], 'speech', tiny_train_cfg,
                                    training_items=training)
        assert [row['n_subjects'] for row in record.rows] == [1, 1]


class TestSweeps:

    def test_rho_sweep(self):
        configs = rho_sweep_configs(TrainConfig(), 'phase')
        assert [c.rho_phase for c in configs] == [0.1, 0.2, 0.3, 0.4, 0.5]
        assert all(c.loss_weights == (0.0, 1.0, 0.0) for c in configs)
        assert rho_sweep_configs(TrainConfig(), 'amplitude', rhos=(0.3,))[0].rho_amplitude == 0.3
        with pytest.raises(RangeError):
            rho_sweep_configs(TrainConfig(), 'band')

    def test_chance_level(self):
        assert chance_level('band') == pytest.approx(1 / 7)
        assert chance_level('speech') == 0.5
