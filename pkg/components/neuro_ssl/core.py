"""Shared domain types, settings records, the seeded RNG and the error taxonomy."""
import configparser
import dataclasses
import hashlib
import logging
import math
import re
from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np

logger = logging.getLogger(__name__)

SETTINGS_SECTION = 'settings'


# ----------------------------------------------------------
#  Errors
# ----------------------------------------------------------

class NeuroSslError(Exception):
    exit_code = 1

    def __init__(self, message='', stage=None, violations=None):
        super().__init__(message)
        self.message = message
        self.stage = stage
        self.violations = list(violations) if violations else []

    def __str__(self):
        if self.stage:
            return '{}: {}'.format(self.stage, self.message)
        return self.message


class ConfigError(NeuroSslError):
    exit_code = 2


class DivisibilityError(ConfigError):
    pass


class RangeError(ConfigError):
    pass


class CutoffError(ConfigError):
    pass


class LengthError(ConfigError):
    pass


class FactorError(ConfigError):
    pass


class OverlapError(ConfigError):
    pass


class SpecError(ConfigError):
    pass


class CompatibilityError(NeuroSslError):
    exit_code = 3


class ShapeError(CompatibilityError):
    pass


class UnknownDatasetError(CompatibilityError):
    pass


class DuplicateError(CompatibilityError):
    pass


class LeakageError(CompatibilityError):
    pass


class FormatError(CompatibilityError):
    pass


class ChecksumError(CompatibilityError):
    pass


class NoGoodSensorsError(CompatibilityError):
    pass


class MissingFileError(CompatibilityError):
    pass


class NumericError(NeuroSslError):
    exit_code = 4


class NonFiniteLossError(NumericError):
    pass


class DegenerateError(NumericError):
    pass


class EmptyError(NumericError):
    pass


class IndexOutOfRangeError(NeuroSslError, IndexError):
    exit_code = 3


# ----------------------------------------------------------
#  Frequency bands
# ----------------------------------------------------------

@dataclass(frozen=True)
class BandSpec:
    name: str
    lo_hz: float
    hi_hz: float

    def __post_init__(self):
        if not 0 < self.lo_hz < self.hi_hz:
            raise RangeError('band {} needs 0 < lo < hi, got ({}, {})'.format(self.name, self.lo_hz, self.hi_hz))

    def contains(self, freqs):
        """Half-open membership [lo, hi); delta also owns DC and the top band is closed."""
        freqs = np.asarray(freqs)
        inside = (freqs >= self.lo_hz) & (freqs < self.hi_hz)
        if self.name == 'delta':
            inside |= freqs < self.lo_hz
        if self.name == BANDS[-1].name:
            inside |= freqs == self.hi_hz
        return inside


BANDS = (
    BandSpec('delta', 0.1, 4.0),
    BandSpec('theta', 4.0, 8.0),
    BandSpec('alpha', 8.0, 12.0),
    BandSpec('beta', 12.0, 30.0),
    BandSpec('gamma', 30.0, 70.0),
    BandSpec('high_gamma_lower', 70.0, 100.0),
    BandSpec('high_gamma_upper', 100.0, 150.0),
)


def band_by_name(name):
    for band in BANDS:
        if band.name == name:
            return band
    raise RangeError('unknown band {}'.format(name))


# ----------------------------------------------------------
#  Signals
# ----------------------------------------------------------

@dataclass(frozen=True)
class Recording:
    data: np.ndarray
    sample_rate_hz: float
    sensor_positions: np.ndarray
    dataset_id: str
    subject_id: str

    def __post_init__(self):
        data = np.asarray(self.data)
        positions = np.asarray(self.sensor_positions, dtype=np.float64)
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise ShapeError('recording data must be S x T with S, T >= 1, got {}'.format(data.shape))
        if not self.sample_rate_hz > 0:
            raise RangeError('sample_rate_hz must be positive, got {}'.format(self.sample_rate_hz))
        if positions.shape != (data.shape[0], 3):
            raise ShapeError('sensor_positions must be {} x 3, got {}'.format(data.shape[0], positions.shape))
        object.__setattr__(self, 'data', data)
        object.__setattr__(self, 'sensor_positions', positions)

    @property
    def n_sensors(self):
        return self.data.shape[0]

    @property
    def n_samples(self):
        return self.data.shape[1]

    @property
    def recording_id(self):
        return '{}/{}'.format(self.dataset_id, self.subject_id)

    @property
    def duration_s(self):
        return self.n_samples / self.sample_rate_hz

    def with_data(self, data, sample_rate_hz=None):
        return dataclasses.replace(self, data=data,
                                   sample_rate_hz=self.sample_rate_hz if sample_rate_hz is None else sample_rate_hz)

    def __repr__(self):
        return '<Recording {} S={} T={} fs={}>'.format(self.recording_id, self.n_sensors, self.n_samples,
                                                       self.sample_rate_hz)


@dataclass(frozen=True)
class Window:
    data: np.ndarray
    origin: Tuple[str, int]
    sample_rate_hz: float
    dataset_id: str
    subject_id: str
    standardised: bool = False

    @property
    def n_sensors(self):
        return self.data.shape[0]

    @property
    def n_samples(self):
        return self.data.shape[1]

    def with_data(self, data, standardised=None):
        return dataclasses.replace(self, data=data,
                                   standardised=self.standardised if standardised is None else standardised)

    def __repr__(self):
        return '<Window {}@{} {}x{}{}>'.format(self.origin[0], self.origin[1], self.n_sensors, self.n_samples,
                                              ' std' if self.standardised else '')


# ----------------------------------------------------------
#  Settings records
# ----------------------------------------------------------

@dataclass(frozen=True)
class ModelConfig:
    d_shared: int = 512
    d_backbone: int = 512
    conv_channels: Tuple[int, ...] = (512, 512, 512, 512)
    downsampling_ratios: Tuple[int, ...] = (5, 5, 1)
    projector_hidden: int = 512
    head_hidden: int = 512
    conditioning_mode: str = 'none'
    conditioning_dim: int = 16
    input_kernel: int = 7
    output_kernel: int = 7
    dataset_sensor_counts: Dict[str, int] = field(default_factory=dict)

    @property
    def total_downsampling(self):
        return int(np.prod(self.downsampling_ratios))


@dataclass(frozen=True)
class TrainConfig:
    loss_weights: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    rho_phase: float = 0.5
    rho_amplitude: float = 0.2
    lr: float = 0.000066
    weight_decay: float = 0.01
    pretrain_epochs: int = 200
    finetune_epochs: int = 30
    split_ratios: Tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0
    batch_size: int = 32
    semi_supervised_weight: float = 1.0
    window_s: float = 0.5
    precision: str = 'float32'

    @property
    def dtype(self):
        return np.float64 if self.precision == 'float64' else np.float32


@dataclass(frozen=True)
class PreprocessConfig:
    lowpass_hz: float = 125.0
    highpass_hz: float = 0.5
    notch_base_hz: float = 50.0
    notch_width_hz: float = 2.0
    target_rate_hz: float = 250.0
    bad_channel_z: float = 3.0
    interpolation_k: int = 3
    qc_stage: str = 'after'
    allow_low_rate: bool = False


@dataclass(frozen=True)
class CheckedConfig:
    model: ModelConfig
    train: TrainConfig
    window_samples: int
    tau: int


def validate_config(model, train, window_samples):
    """Check both records against each other and the window length; return them with tau."""
    violations = []
    ratios = tuple(model.downsampling_ratios)
    if not ratios or any(r < 1 for r in ratios):
        violations.append(RangeError('downsampling_ratios must be positive integers, got {}'.format(ratios)))
    elif window_samples % model.total_downsampling != 0:
        violations.append(DivisibilityError('window of {} samples is not divisible by prod{} = {}'.format(
            window_samples, ratios, model.total_downsampling)))
    if len(model.conv_channels) != len(ratios) + 1:
        violations.append(RangeError('conv_channels needs {} entries for {} ratios, got {}'.format(
            len(ratios) + 1, len(ratios), len(model.conv_channels))))
    for name in ('d_shared', 'd_backbone', 'projector_hidden', 'head_hidden', 'conditioning_dim'):
        if getattr(model, name) < 1:
            violations.append(RangeError('{} must be positive'.format(name)))
    if model.conditioning_mode not in ('none', 'embedding', 'film'):
        violations.append(RangeError('conditioning_mode must be none, embedding or film, got {}'.format(
            model.conditioning_mode)))
    for name in ('rho_phase', 'rho_amplitude'):
        rho = getattr(train, name)
        if not 0 < rho <= 1:
            violations.append(RangeError('{} must lie in (0, 1], got {}'.format(name, rho)))
    if len(train.loss_weights) != 3 or any(w < 0 for w in train.loss_weights):
        violations.append(RangeError('loss_weights must be three non-negative reals, got {}'.format(
            train.loss_weights)))
    if train.semi_supervised_weight < 0:
        violations.append(RangeError('semi_supervised_weight must be non-negative'))
    if not train.lr > 0:
        violations.append(RangeError('lr must be positive, got {}'.format(train.lr)))
    if len(train.split_ratios) != 3 or abs(sum(train.split_ratios) - 1.0) > 1e-9 \
            or any(r < 0 for r in train.split_ratios):
        violations.append(RangeError('split_ratios must be three non-negative reals summing to 1, got {}'.format(
            train.split_ratios)))
    for name in ('pretrain_epochs', 'finetune_epochs', 'batch_size'):
        if getattr(train, name) < 1:
            violations.append(RangeError('{} must be a positive integer'.format(name)))
    if train.precision not in ('float32', 'float64'):
        violations.append(RangeError('precision must be float32 or float64, got {}'.format(train.precision)))
    if not 0 <= train.seed < 2 ** 64:
        violations.append(RangeError('seed must be a 64-bit unsigned integer'))

    if violations:
        message = '; '.join(str(v) for v in violations)
        raise type(violations[0])(message, violations=violations)
    tau = window_samples // model.total_downsampling
    return CheckedConfig(model=model, train=train, window_samples=window_samples, tau=tau)


def window_samples_for(window_s, sample_rate_hz):
    samples = window_s * sample_rate_hz
    if abs(samples - round(samples)) > 1e-9 or round(samples) < 1:
        raise FactorError('window of {} s at {} Hz is not a whole number of samples'.format(window_s, sample_rate_hz))
    return int(round(samples))


# ----------------------------------------------------------
#  Settings files
# ----------------------------------------------------------

_MODEL_FIELDS = {f.name: f for f in dataclasses.fields(ModelConfig)}
_TRAIN_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}
_PREPROCESS_FIELDS = {f.name: f for f in dataclasses.fields(PreprocessConfig)}


def new_parser():
    return configparser.ConfigParser(inline_comment_prefixes=('#', ';'), delimiters=('=', ':'),
                                     comment_prefixes=('#', ';'))


def read_settings_text(text, source='<string>'):
    """Parse flat `key = value` text; a `[settings]` header is implied when missing."""
    parser = new_parser()
    body = text
    if not re.search(r'^\s*\[', text, flags=re.MULTILINE):
        body = '[{}]\n{}'.format(SETTINGS_SECTION, text)
    try:
        parser.read_string(body, source=source)
    except configparser.Error as e:
        raise SpecError('{}: {}'.format(source, e))
    if not parser.has_section(SETTINGS_SECTION):
        raise SpecError('{}: no [{}] section'.format(source, SETTINGS_SECTION))
    return parser


def line_of_key(text, key):
    for number, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if re.match(r'^{}\s*[=:]'.format(re.escape(key)), stripped):
            return number
    return 0


def _parse_value(raw, kind, key):
    raw = raw.strip()
    if kind is bool:
        lowered = raw.lower()
        if lowered in ('1', 'yes', 'true', 'on'):
            return True
        if lowered in ('0', 'no', 'false', 'off'):
            return False
        raise ValueError('not a boolean: {}'.format(raw))
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    if kind is str:
        return raw
    if kind == 'ints':
        return tuple(int(v) for v in raw.split(',') if v.strip())
    if kind == 'floats':
        return tuple(float(v) for v in raw.split(',') if v.strip())
    if kind == 'sensor_map':
        result = {}
        for item in raw.split(','):
            if not item.strip():
                continue
            name, count = item.split(':')
            result[name.strip()] = int(count)
        return result
    raise ValueError('unsupported kind for {}'.format(key))


def _kind_of(dataclass_field):
    annotation = str(dataclass_field.type)
    if dataclass_field.name == 'dataset_sensor_counts':
        return 'sensor_map'
    if annotation.startswith('Tuple[int') or annotation.startswith('typing.Tuple[int'):
        return 'ints'
    if annotation.startswith('Tuple[float') or annotation.startswith('typing.Tuple[float'):
        return 'floats'
    return dataclass_field.type


def _format_value(value):
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, dict):
        return ', '.join('{}:{}'.format(k, v) for k, v in value.items())
    if isinstance(value, (tuple, list)):
        return ', '.join(_format_value(v) for v in value)
    return str(value)


def _build(cls, fields, values, text, source):
    kwargs = {}
    for key, raw in values.items():
        if key not in fields:
            continue
        try:
            kwargs[key] = _parse_value(raw, _kind_of(fields[key]), key)
        except ValueError as e:
            raise SpecError('{}:{}: bad value for {}: {}'.format(source, line_of_key(text, key), key, e))
    return cls(**kwargs)


def parse_settings(text, source='<string>'):
    """Return (ModelConfig, TrainConfig, PreprocessConfig) from settings text."""
    from .config_compatibility import upgrade_settings

    parser = read_settings_text(text, source)
    upgrade_settings(parser)
    values = dict(parser.items(SETTINGS_SECTION))
    known = set(_MODEL_FIELDS) | set(_TRAIN_FIELDS) | set(_PREPROCESS_FIELDS)
    for key in values:
        if key not in known:
            raise SpecError('{}:{}: unknown key {}'.format(source, line_of_key(text, key), key))
    model = _build(ModelConfig, _MODEL_FIELDS, values, text, source)
    train = _build(TrainConfig, _TRAIN_FIELDS, values, text, source)
    preprocess = _build(PreprocessConfig, _PREPROCESS_FIELDS, values, text, source)
    return model, train, preprocess


def parse_record(cls, text, source='<string>'):
    """Build one settings dataclass from flat settings text; every key must be a field of cls."""
    parser = read_settings_text(text, source)
    values = dict(parser.items(SETTINGS_SECTION))
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key in values:
        if key not in fields:
            raise SpecError('{}:{}: unknown key {}'.format(source, line_of_key(text, key), key))
    return _build(cls, fields, values, text, source)


def load_settings(path):
    from .config_compatibility import check_and_upgrade

    with open(path, 'r', encoding='utf-8') as f:
        text = f.read()
    check_and_upgrade(read_settings_text(text, path), path)
    with open(path, 'r', encoding='utf-8') as f:
        text = f.read()
    return parse_settings(text, source=path)


def dump_settings(*records):
    lines = []
    for record in records:
        lines.append('# {}'.format(type(record).__name__))
        for f in dataclasses.fields(record):
            lines.append('{} = {}'.format(f.name, _format_value(getattr(record, f.name))))
    return '\n'.join(lines) + '\n'


def settings_hash(*records, seed=None):
    digest = hashlib.sha256(dump_settings(*records).encode('utf-8'))
    if seed is not None:
        digest.update('seed={}'.format(seed).encode('utf-8'))
    return digest.hexdigest()


# ----------------------------------------------------------
#  Random streams
# ----------------------------------------------------------

class Rng:
    """Counter-based stream keyed by (seed, fork path); single owner, fork instead of sharing."""

    def __init__(self, seed, path=()):
        if not 0 <= int(seed) < 2 ** 64:
            raise RangeError('seed must be a 64-bit unsigned integer, got {}'.format(seed))
        self.seed = int(seed)
        self.path = tuple(path)
        digest = hashlib.blake2b('{}|{}'.format(self.seed, '/'.join(self.path)).encode('utf-8'),
                                 digest_size=16).digest()
        self.generator = np.random.Generator(np.random.Philox(key=int.from_bytes(digest, 'little')))

    def fork(self, label):
        return Rng(self.seed, self.path + (str(label),))

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size=size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size=size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size=size)

    def choice(self, n, size, replace=False):
        return self.generator.choice(n, size=size, replace=replace)

    def permutation(self, n):
        return self.generator.permutation(n)

    def __repr__(self):
        return '<Rng seed={} path={}>'.format(self.seed, '/'.join(self.path) or '-')


def rng_fork(rng, label):
    return rng.fork(label)


def floor_fraction(rho, count):
    return max(1, int(math.floor(rho * count + 1e-9)))
