"""Deterministic signal-processing kernels for recordings and windows.

Filters are linear-phase windowed-sinc FIRs (Hamming) applied centred with reflect
padding, so every stage is zero phase. Kernels are pure functions of their inputs.
"""
import logging
import math
from dataclasses import dataclass
from typing import FrozenSet, Optional, Tuple

import numpy as np
from scipy import signal as sps
from scipy.spatial import cKDTree

from .core import (CutoffError, DegenerateError, FactorError, LengthError, NeuroSslError, NoGoodSensorsError,
                   PreprocessConfig, RangeError)

logger = logging.getLogger(__name__)

FILTER_KINDS = ('lowpass', 'highpass', 'notch_comb', 'bandstop_mask')
REFERENCE_TAPS = 255
REFERENCE_RATE_HZ = 1000.0


def default_num_taps(sample_rate_hz):
    """255 taps at 1 kHz, scaled with the rate and kept odd."""
    taps = int(round(REFERENCE_TAPS * sample_rate_hz / REFERENCE_RATE_HZ))
    return max(3, taps | 1)


def notch_num_taps(sample_rate_hz, width_hz):
    taps = int(math.ceil(6.0 * sample_rate_hz / width_hz))
    return taps | 1


@dataclass(frozen=True)
class FilterSpec:
    kind: str
    cutoff_hz: Optional[float] = None
    band: Optional[Tuple[float, float]] = None
    notch_base_hz: Optional[float] = None
    num_taps: Optional[int] = None

    def __post_init__(self):
        if self.kind not in FILTER_KINDS:
            raise RangeError('unknown filter kind {}'.format(self.kind))
        if self.num_taps is not None and (self.num_taps < 1 or self.num_taps % 2 == 0):
            raise RangeError('num_taps must be odd and positive, got {}'.format(self.num_taps))

    def taps_for(self, sample_rate_hz):
        return self.num_taps if self.num_taps is not None else default_num_taps(sample_rate_hz)


@dataclass(frozen=True)
class ChannelQcReport:
    variances: np.ndarray
    z_scores: np.ndarray
    bad_indices: FrozenSet[int]
    threshold: float

    def to_text(self):
        lines = ['index variance z bad']
        for i, (var, z) in enumerate(zip(self.variances, self.z_scores)):
            lines.append('{} {!r} {!r} {}'.format(i, float(var), float(z), int(i in self.bad_indices)))
        return '\n'.join(lines) + '\n'


def _check_cutoff(cutoff_hz, sample_rate_hz):
    nyquist = sample_rate_hz / 2.0
    if not 0 < cutoff_hz < nyquist:
        raise CutoffError('cutoff {} Hz must lie strictly inside (0, {}) Hz'.format(cutoff_hz, nyquist))


def design_fir(spec, sample_rate_hz):
    """Linear-phase Hamming windowed-sinc taps for a lowpass, highpass or band-stop spec."""
    num_taps = spec.taps_for(sample_rate_hz)
    if spec.kind == 'lowpass':
        _check_cutoff(spec.cutoff_hz, sample_rate_hz)
        return sps.firwin(num_taps, spec.cutoff_hz, window='hamming', pass_zero='lowpass', fs=sample_rate_hz)
    if spec.kind == 'highpass':
        _check_cutoff(spec.cutoff_hz, sample_rate_hz)
        # spectral inversion of a unit-DC lowpass: DC gain is exactly zero
        lowpass = sps.firwin(num_taps, spec.cutoff_hz, window='hamming', pass_zero='lowpass', fs=sample_rate_hz)
        taps = -lowpass
        taps[num_taps // 2] += 1.0
        return taps
    if spec.kind in ('bandstop_mask', 'notch_comb'):
        lo, hi = spec.band
        _check_cutoff(lo, sample_rate_hz)
        _check_cutoff(hi, sample_rate_hz)
        return sps.firwin(num_taps, [lo, hi], window='hamming', pass_zero='bandstop', fs=sample_rate_hz)
    raise RangeError('cannot design taps for {}'.format(spec.kind))


def filter_rows(data, taps):
    """Centred convolution of each row with reflect padding; output keeps the row length."""
    data = np.asarray(data)
    taps = np.asarray(taps, dtype=np.float64)
    if not np.all(np.isfinite(taps)):
        raise RangeError('filter taps must be finite')
    if data.shape[-1] <= len(taps):
        raise LengthError('signal of {} samples is too short for {} taps'.format(data.shape[-1], len(taps)))
    half = len(taps) // 2
    padded = np.pad(data, [(0, 0)] * (data.ndim - 1) + [(half, half)], mode='reflect')
    kernel = taps.reshape((1,) * (data.ndim - 1) + (-1,))
    return sps.fftconvolve(padded, kernel, mode='valid', axes=-1)


def apply_fir_zero_phase(recording, taps):
    return recording.with_data(filter_rows(recording.data, taps))


def notch_harmonics(base_hz, sample_rate_hz, width_hz=2.0):
    nyquist = sample_rate_hz / 2.0
    if not 0 < base_hz < nyquist:
        raise CutoffError('notch base {} Hz must lie inside (0, {}) Hz'.format(base_hz, nyquist))
    harmonics = []
    multiple = base_hz
    while multiple + width_hz / 2.0 < nyquist:
        harmonics.append(multiple)
        multiple += base_hz
    return harmonics


def apply_notch_comb(recording, base_hz, width_hz=2.0):
    """Cascade one narrow band-stop stage per harmonic of base_hz below nyquist."""
    fs = recording.sample_rate_hz
    num_taps = notch_num_taps(fs, width_hz)
    if recording.n_samples <= num_taps:
        raise LengthError('a {} Hz wide notch needs {} taps, so recordings longer than {:.2f} s; {} has {:.2f} s'
                          .format(width_hz, num_taps, num_taps / fs, recording.recording_id, recording.n_samples / fs))
    data = recording.data
    for harmonic in notch_harmonics(base_hz, fs, width_hz):
        spec = FilterSpec('notch_comb', band=(harmonic - width_hz / 2.0, harmonic + width_hz / 2.0),
                          notch_base_hz=base_hz, num_taps=num_taps)
        logger.debug('notch stage at {} Hz ({} taps)'.format(harmonic, num_taps))
        data = filter_rows(data, design_fir(spec, fs))
    return recording.with_data(data)


def decimate(recording, target_hz):
    """Pure subsampling by the integer factor rate / target_hz."""
    factor = recording.sample_rate_hz / target_hz
    if factor < 1 or abs(factor - round(factor)) > 1e-9:
        raise FactorError('{} Hz -> {} Hz is not an integer decimation'.format(recording.sample_rate_hz, target_hz))
    k = int(round(factor))
    if k == 1:
        return recording
    return recording.with_data(np.ascontiguousarray(recording.data[:, ::k]), sample_rate_hz=float(target_hz))


def detect_bad_channels(recording, z_threshold=3.0):
    """Flag channels whose robust z-score of log-variance exceeds the threshold in either tail."""
    if recording.n_sensors < 4:
        raise DegenerateError('bad-channel detection needs at least 4 channels, got {}'.format(recording.n_sensors))
    variances = np.var(recording.data, axis=1)
    with np.errstate(divide='ignore'):
        log_var = np.log(variances)
    finite = np.isfinite(log_var)
    median = np.median(log_var[finite]) if finite.any() else 0.0
    mad = np.median(np.abs(log_var[finite] - median)) if finite.any() else 0.0

    if mad == 0:
        deviants = frozenset(int(i) for i in np.flatnonzero(log_var != median))
        z_scores = np.where(log_var == median, 0.0, np.where(log_var > median, np.inf, -np.inf))
        report = ChannelQcReport(variances, z_scores, deviants, z_threshold)
        if deviants:
            error = DegenerateError('MAD of log-variance is zero; {} deviant channel(s) flagged'.format(len(deviants)))
            error.report = report
            raise error
        return report

    # 0.6745 scales the MAD to a standard deviation under normality
    with np.errstate(invalid='ignore'):
        z_scores = 0.6745 * (log_var - median) / mad
    z_scores = np.where(np.isneginf(log_var), -np.inf, z_scores)
    bad = frozenset(int(i) for i in np.flatnonzero(np.abs(z_scores) > z_threshold))
    return ChannelQcReport(variances, z_scores, bad, z_threshold)


def interpolate_channels(recording, bad, k=3):
    """Replace each bad channel by the mean of its k nearest good sensors (fewer if fewer exist)."""
    bad = sorted(set(int(i) for i in bad))
    if not bad:
        return recording
    good = [i for i in range(recording.n_sensors) if i not in bad]
    if not good:
        raise NoGoodSensorsError('all {} channels are bad'.format(recording.n_sensors))
    neighbours = min(k, len(good))
    tree = cKDTree(recording.sensor_positions[good])
    _, nearest = tree.query(recording.sensor_positions[bad], k=neighbours)
    nearest = np.asarray(nearest).reshape(len(bad), neighbours)
    data = np.array(recording.data, copy=True)
    good = np.asarray(good)
    for row, neighbour_rows in zip(bad, nearest):
        data[row] = recording.data[good[neighbour_rows]].mean(axis=0)
    return recording.with_data(data)


def _run_stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except NeuroSslError as e:
        e.stage = e.stage or name
        raise


def _quality_control(recording, settings):
    if recording.n_sensors < 4:
        logger.info('{}: skipping bad-channel detection for {} channels'.format(
            recording.recording_id, recording.n_sensors))
        return recording, ChannelQcReport(np.var(recording.data, axis=1), np.zeros(recording.n_sensors),
                                          frozenset(), settings.bad_channel_z)
    try:
        report = _run_stage('detect_bad_channels', detect_bad_channels, recording, settings.bad_channel_z)
    except DegenerateError as e:
        logger.warning('{}: {}'.format(recording.recording_id, e))
        report = e.report
    for index in sorted(report.bad_indices):
        logger.warning('{}: channel {} flagged bad (z={:.2f})'.format(
            recording.recording_id, index, report.z_scores[index]))
    recording = _run_stage('interpolate_channels', interpolate_channels, recording, report.bad_indices,
                           settings.interpolation_k)
    return recording, report


def preprocess(recording, settings=None):
    """lowpass -> highpass -> notch comb -> decimate -> bad-channel QC; returns (recording, report)."""
    settings = settings or PreprocessConfig()
    fs = recording.sample_rate_hz
    if fs < 2 * settings.target_rate_hz and not settings.allow_low_rate:
        raise _stage_error(FactorError('sample rate {} Hz is below {} Hz; set allow_low_rate to process it'.format(
            fs, 2 * settings.target_rate_hz)), 'preprocess')
    logger.info('{}: preprocessing at {} Hz'.format(recording.recording_id, fs))

    if settings.lowpass_hz < fs / 2.0:
        taps = _run_stage('lowpass', design_fir, FilterSpec('lowpass', cutoff_hz=settings.lowpass_hz), fs)
        recording = _run_stage('lowpass', apply_fir_zero_phase, recording, taps)
    else:
        logger.info('lowpass at {} Hz skipped, nyquist is {} Hz'.format(settings.lowpass_hz, fs / 2.0))
    taps = _run_stage('highpass', design_fir, FilterSpec('highpass', cutoff_hz=settings.highpass_hz), fs)
    recording = _run_stage('highpass', apply_fir_zero_phase, recording, taps)
    recording = _run_stage('notch_comb', apply_notch_comb, recording, settings.notch_base_hz,
                           settings.notch_width_hz)

    report = None
    if settings.qc_stage == 'before':
        recording, report = _quality_control(recording, settings)
    if fs != settings.target_rate_hz:
        recording = _run_stage('decimate', decimate, recording, settings.target_rate_hz)
    else:
        logger.info('already at {} Hz, decimation skipped'.format(fs))
    if report is None:
        recording, report = _quality_control(recording, settings)
    if not np.all(np.isfinite(recording.data)):
        raise _stage_error(DegenerateError('non-finite samples after preprocessing'), 'preprocess')
    return recording, report


def _stage_error(error, stage):
    error.stage = stage
    return error


def fft_real(x):
    x = np.asarray(x)
    if x.shape[-1] < 2:
        raise LengthError('need at least 2 samples for a transform')
    return np.fft.rfft(x, axis=-1)


def ifft_real(spectrum, n):
    return np.fft.irfft(spectrum, n=n, axis=-1)


def rfft_frequencies(n, sample_rate_hz):
    return np.fft.rfftfreq(n, d=1.0 / sample_rate_hz)
