import numpy as np
import pytest

from components.neuro_ssl.core import (BANDS, CompatibilityError, ConfigError, DivisibilityError, FactorError,
                                       IndexOutOfRangeError, ModelConfig, NumericError, PreprocessConfig,
                                       RangeError, Rng, ShapeError, SpecError, TrainConfig, band_by_name,
                                       dump_settings, floor_fraction, parse_record, parse_settings, settings_hash,
                                       validate_config, window_samples_for)

from .conftest import make_recording


class TestBands:

    def test_bands_are_contiguous(self):
        for lower, upper in zip(BANDS, BANDS[1:]):
            assert lower.hi_hz == upper.lo_hz

    def test_membership_at_250hz_window(self):
        freqs = np.fft.rfftfreq(125, d=1 / 250.0)
        owners = np.sum([band.contains(freqs) for band in BANDS], axis=0)
        # every bin up to the top band edge belongs to exactly one band
        assert np.all(owners == 1)
        assert list(freqs[band_by_name('delta').contains(freqs)]) == [0.0, 2.0]
        assert 124.0 in freqs[band_by_name('high_gamma_upper').contains(freqs)]

    def test_unknown_band(self):
        with pytest.raises(RangeError):
            band_by_name('kappa')


class TestRecording:

    def test_position_shape_is_checked(self):
        with pytest.raises(ShapeError):
            make_recording(np.zeros((4, 10)), positions=np.zeros((3, 3)))

    def test_recording_id(self):
        rec = make_recording(np.zeros((2, 10)), dataset_id='meg', subject_id='s7')
        assert rec.recording_id == 'meg/s7'
        assert rec.duration_s == pytest.approx(0.04)


class TestValidateConfig:

    def test_defaults_give_tau_five(self):
        checked = validate_config(ModelConfig(), TrainConfig(), 125)
        assert checked.tau == 5

    def test_indivisible_window(self):
        with pytest.raises(DivisibilityError):
            validate_config(ModelConfig(), TrainConfig(), 124)

    def test_all_violations_are_reported(self):
        with pytest.raises(DivisibilityError) as excinfo:
            validate_config(ModelConfig(), TrainConfig(rho_phase=0.0), 124)
        assert len(excinfo.value.violations) == 2
        assert isinstance(excinfo.value.violations[1], RangeError)

    @pytest.mark.parametrize('train', [
        TrainConfig(loss_weights=(1.0, -1.0, 1.0)),
        TrainConfig(split_ratios=(0.8, 0.1, 0.2)),
        TrainConfig(precision='float16'),
        TrainConfig(rho_amplitude=1.5),
    ])
    def test_range_violations(self, train):
        with pytest.raises(RangeError):
            validate_config(ModelConfig(), train, 125)

    def test_conv_channels_must_match_ratios(self):
        with pytest.raises(RangeError):
            validate_config(ModelConfig(conv_channels=(512, 512)), TrainConfig(), 125)

    def test_window_samples(self):
        assert window_samples_for(0.5, 250.0) == 125
        with pytest.raises(FactorError):
            window_samples_for(0.5, 255.0)


class TestErrors:

    def test_exit_codes(self):
        assert SpecError('x').exit_code == 2
        assert ShapeError('x').exit_code == 3
        assert NumericError('x').exit_code == 4

    def test_hierarchy(self):
        assert issubclass(DivisibilityError, ConfigError)
        assert issubclass(ShapeError, CompatibilityError)
        assert issubclass(IndexOutOfRangeError, IndexError)

    def test_stage_prefix(self):
        error = FactorError('bad rate', stage='decimate')
        assert str(error) == 'decimate: bad rate'


class TestSettings:

    def test_parse_flat_text(self):
        model, train, preprocess = parse_settings('lr = 0.001\nbatch_size: 16\nconditioning_mode = film\n')
        assert train.lr == 0.001
        assert train.batch_size == 16
        assert model.conditioning_mode == 'film'
        assert preprocess == PreprocessConfig()

    def test_unknown_key_reports_line(self):
        with pytest.raises(SpecError) as excinfo:
            parse_settings('lr = 0.001\nseed = 3\nfoo = 1\n', source='run.ini')
        assert 'run.ini:3' in str(excinfo.value)
        assert 'foo' in str(excinfo.value)

    def test_bad_value(self):
        with pytest.raises(SpecError):
            parse_settings('batch_size = many\n')

    def test_deprecated_keys_are_upgraded(self):
        model, train, _ = parse_settings('learning_rate = 0.01\nw1 = 1\nw2 = 0\nw3 = 0\nratios = 5, 5, 1\n')
        assert train.lr == 0.01
        assert train.loss_weights == (1.0, 0.0, 0.0)
        assert model.downsampling_ratios == (5, 5, 1)

    def test_sensor_map(self):
        model, _, _ = parse_settings('dataset_sensor_counts = camcan:269, mous:273\n')
        assert model.dataset_sensor_counts == {'camcan': 269, 'mous': 273}

    def test_dump_parse_round_trip(self):
        records = (ModelConfig(dataset_sensor_counts={'a': 4}), TrainConfig(seed=7, lr=6.6e-05),
                   PreprocessConfig(allow_low_rate=True))
        assert parse_settings(dump_settings(*records)) == records

    def test_parse_record(self):
        preprocess = parse_record(PreprocessConfig, 'target_rate_hz = 200\n')
        assert preprocess.target_rate_hz == 200.0
        with pytest.raises(SpecError):
            parse_record(PreprocessConfig, 'lr = 0.1\n')

    def test_settings_hash(self):
        base = settings_hash(ModelConfig(), TrainConfig(), seed=0)
        assert base == settings_hash(ModelConfig(), TrainConfig(), seed=0)
        assert base != settings_hash(ModelConfig(), TrainConfig(), seed=1)
        assert base != settings_hash(ModelConfig(), TrainConfig(lr=0.1), seed=0)


class TestRng:

    def test_same_path_same_draws(self):
        assert np.array_equal(Rng(5).fork('a').normal(size=4), Rng(5).fork('a').normal(size=4))

    def test_fork_ignores_parent_draws(self):
        rng = Rng(1)
        first = rng.fork('x').normal(size=3)
        rng.normal(size=10)
        assert np.array_equal(first, rng.fork('x').normal(size=3))

    def test_labels_and_seeds_separate_streams(self):
        assert not np.array_equal(Rng(1).fork('x').normal(size=3), Rng(1).fork('y').normal(size=3))
        assert not np.array_equal(Rng(1).normal(size=3), Rng(2).normal(size=3))

    def test_seed_range(self):
        with pytest.raises(RangeError):
            Rng(-1)
        with pytest.raises(RangeError):
            Rng(2 ** 64)


class TestFloorFraction:

    @pytest.mark.parametrize('rho, count, expected', [
        (0.5, 269, 134),
        (0.2, 5, 1),
        (0.1, 3, 1),
        (0.3, 10, 3),
        (0.29, 100, 29),
        (1.0, 7, 7),
    ])
    def test_values(self, rho, count, expected):
        assert floor_fraction(rho, count) == expected
