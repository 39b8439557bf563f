"""Recording containers, synthetic datasets, windows, labels, splits and batches.

A recording `<stem>` is stored as `<stem>.hdr` (settings-style text header),
`<stem>.bin` (channel-major float32 little-endian samples) and one
`<stem>.<kind>.csv` per event track.
"""
import configparser
import csv
import logging
import math
import os
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np

from .core import (BANDS, ChecksumError, FormatError, MissingFileError, NeuroSslError, OverlapError, RangeError,
                   Recording, Rng, SpecError, Window, line_of_key, parse_record, window_samples_for)

logger = logging.getLogger(__name__)

CONTAINER_VERSION = 1
HEADER_SECTION = 'recording'
TRACK_KINDS = ('detection', 'voicing')
CSV_HEADER = ('onset_sample', 'duration_samples', 'class')
SPLITS = ('train', 'val', 'test')
_F32 = np.dtype('<f4')


# ----------------------------------------------------------
#  Event tracks
# ----------------------------------------------------------

@dataclass(frozen=True)
class EventTrack:
    events: Tuple[Tuple[int, int, int], ...]
    kind: str

    def __post_init__(self):
        if self.kind not in TRACK_KINDS:
            raise FormatError('unknown event track kind {}'.format(self.kind))
        events = tuple((int(o), int(d), int(c)) for o, d, c in self.events)
        object.__setattr__(self, 'events', events)
        if self.kind == 'detection':
            for (onset, duration, _), (next_onset, _, _) in zip(events, events[1:]):
                if next_onset < onset + duration:
                    raise OverlapError('detection events at {} and {} overlap'.format(onset, next_onset))

    def __len__(self):
        return len(self.events)

    def check_within(self, n_samples):
        for onset, duration, _ in self.events:
            if onset < 0 or duration < 1 or onset + duration > n_samples:
                raise FormatError('event ({}, {}) does not fit in {} samples'.format(onset, duration, n_samples))

    def occupancy(self, start, length):
        """0/1 per sample of [start, start + length) marking samples inside any event."""
        occupied = np.zeros(length, dtype=np.int64)
        for onset, duration, _ in self.events:
            lo = max(onset, start)
            hi = min(onset + duration, start + length)
            if lo < hi:
                occupied[lo - start:hi - start] = 1
        return occupied


def write_track(path, track):
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(CSV_HEADER)
        writer.writerows(track.events)


def read_track(path, kind):
    with open(path, 'r', newline='', encoding='utf-8') as f:
        rows = list(csv.reader(f))
    if not rows or tuple(rows[0]) != CSV_HEADER:
        raise FormatError('{}: expected header {}'.format(path, ','.join(CSV_HEADER)))
    try:
        events = tuple(tuple(int(v) for v in row) for row in rows[1:] if row)
    except ValueError as e:
        raise FormatError('{}: {}'.format(path, e))
    return EventTrack(events, kind)


# ----------------------------------------------------------
#  Container IO
# ----------------------------------------------------------

def ini_parser():
    parser = configparser.ConfigParser(delimiters=('=',))
    parser.optionxform = str
    return parser


def write_recording(stem, recording, tracks=None):
    """Write header, payload and event tracks; returns the payload CRC32."""
    payload = np.ascontiguousarray(recording.data, dtype=_F32).tobytes()
    crc = zlib.crc32(payload)
    parser = ini_parser()
    parser[HEADER_SECTION] = OrderedDict([
        ('format_version', str(CONTAINER_VERSION)),
        ('sample_rate_hz', repr(float(recording.sample_rate_hz))),
        ('n_sensors', str(recording.n_sensors)),
        ('n_samples', str(recording.n_samples)),
        ('dataset_id', recording.dataset_id),
        ('subject_id', recording.subject_id),
        ('payload_crc32', str(crc)),
        ('sensor_positions', ', '.join(repr(float(v)) for v in recording.sensor_positions.reshape(-1))),
    ])
    with open(stem + '.hdr', 'w', encoding='utf-8') as f:
        parser.write(f)
    with open(stem + '.bin', 'wb') as f:
        f.write(payload)
    for kind, track in sorted((tracks or {}).items()):
        track.check_within(recording.n_samples)
        write_track('{}.{}.csv'.format(stem, kind), track)
    logger.debug('wrote {} ({} bytes, crc32 {})'.format(stem, len(payload), crc))
    return crc


def read_recording(stem):
    """Return (Recording, {kind: EventTrack}) for a container stem."""
    header_path = stem + '.hdr'
    if not os.path.isfile(header_path):
        raise MissingFileError('recording header {} does not exist'.format(header_path))
    parser = ini_parser()
    try:
        parser.read(header_path, encoding='utf-8')
        header = parser[HEADER_SECTION]
        version = int(header['format_version'])
        rate = float(header['sample_rate_hz'])
        n_sensors = int(header['n_sensors'])
        n_samples = int(header['n_samples'])
        crc = int(header['payload_crc32'])
        positions = np.array([float(v) for v in header['sensor_positions'].split(',')], dtype=np.float64)
        dataset_id, subject_id = header['dataset_id'], header['subject_id']
    except (configparser.Error, KeyError, ValueError) as e:
        raise FormatError('{}: malformed header: {}'.format(header_path, e))
    if version != CONTAINER_VERSION:
        raise FormatError('{}: container version {} is not supported'.format(header_path, version))
    if positions.size != 3 * n_sensors:
        raise FormatError('{}: {} position values for {} sensors'.format(header_path, positions.size, n_sensors))

    with open(stem + '.bin', 'rb') as f:
        payload = f.read()
    expected = n_sensors * n_samples * _F32.itemsize
    if len(payload) != expected:
        raise FormatError('{}.bin: payload ends at byte offset {}, header implies {} bytes ({} x {} float32)'.format(
            stem, len(payload), expected, n_sensors, n_samples))
    if zlib.crc32(payload) != crc:
        raise ChecksumError('{}.bin: payload CRC32 {} does not match header {}'.format(
            stem, zlib.crc32(payload), crc))
    data = np.frombuffer(payload, dtype=_F32).reshape(n_sensors, n_samples).astype(np.float32)
    recording = Recording(data, rate, positions.reshape(n_sensors, 3), dataset_id, subject_id)

    tracks = {}
    for kind in TRACK_KINDS:
        path = '{}.{}.csv'.format(stem, kind)
        if os.path.isfile(path):
            tracks[kind] = read_track(path, kind)
            tracks[kind].check_within(n_samples)
    return recording, tracks


def recording_stem(recording):
    return '{}_{}'.format(recording.dataset_id, recording.subject_id)


# ----------------------------------------------------------
#  Synthetic data
# ----------------------------------------------------------

def _keyed(error, key):
    error.key = key
    return error


@dataclass(frozen=True)
class SynthSpec:
    dataset_id: str = 'synth'
    n_subjects: int = 4
    n_sensors: int = 32
    duration_s: float = 120.0
    sample_rate_hz: float = 250.0
    band_powers: Tuple[float, ...] = (4.0, 2.0, 3.0, 1.0, 0.5, 0.25, 0.125)
    event_rate_hz: float = 0.2
    event_duration_s: float = 1.0
    event_amplitude: float = 2.0
    voiced_carrier_hz: float = 10.0
    voiceless_carrier_hz: float = 40.0
    sensor_subset_fraction: float = 0.25
    subject_gain_jitter: float = 0.1
    seed: int = 0

    def validate(self):
        nyquist = self.sample_rate_hz / 2.0
        if len(self.band_powers) != len(BANDS) or any(p < 0 for p in self.band_powers):
            raise _keyed(SpecError('band_powers needs {} non-negative values, got {}'.format(
                len(BANDS), self.band_powers)), 'band_powers')
        for name in ('voiced_carrier_hz', 'voiceless_carrier_hz'):
            carrier = getattr(self, name)
            if not 0 < carrier < nyquist:
                raise _keyed(SpecError('{} = {} Hz must lie inside (0, {}) Hz'.format(name, carrier, nyquist)), name)
        for name in ('n_subjects', 'n_sensors'):
            if getattr(self, name) < 1:
                raise _keyed(RangeError('{} must be positive'.format(name)), name)
        for name in ('duration_s', 'event_duration_s'):
            if not getattr(self, name) > 0:
                raise _keyed(RangeError('{} must be positive'.format(name)), name)
        if self.event_rate_hz < 0:
            raise _keyed(RangeError('event_rate_hz must be non-negative'), 'event_rate_hz')
        if not 0 < self.sensor_subset_fraction <= 1:
            raise _keyed(RangeError('sensor_subset_fraction must lie in (0, 1]'), 'sensor_subset_fraction')
        if self.subject_gain_jitter < 0:
            raise _keyed(RangeError('subject_gain_jitter must be non-negative'), 'subject_gain_jitter')
        for name in ('duration_s', 'event_duration_s'):
            try:
                window_samples_for(getattr(self, name), self.sample_rate_hz)
            except NeuroSslError as e:
                raise _keyed(e, name)
        return self

    @property
    def n_samples(self):
        return int(round(self.duration_s * self.sample_rate_hz))

    @property
    def n_events(self):
        return int(math.floor(self.event_rate_hz * self.duration_s + 1e-9))


def parse_synth_spec(text, source='<string>'):
    spec = parse_record(SynthSpec, text, source)
    try:
        return spec.validate()
    except NeuroSslError as e:
        key = getattr(e, 'key', None)
        if key:
            e.message = '{}:{}: {}'.format(source, line_of_key(text, key), e.message)
            e.args = (e.message,)
        raise


def load_synth_spec(path):
    with open(path, 'r', encoding='utf-8') as f:
        return parse_synth_spec(f.read(), source=path)


@dataclass
class SyntheticDataset:
    spec: SynthSpec
    recordings: List[Recording] = field(default_factory=list)
    tracks: Dict[str, Dict[str, EventTrack]] = field(default_factory=dict)


def sensor_positions_on_sphere(n_sensors, radius=0.1):
    """Fibonacci lattice on a sphere of the given radius (metres)."""
    i = np.arange(n_sensors) + 0.5
    polar = np.arccos(1.0 - 2.0 * i / n_sensors)
    azimuth = np.pi * (1.0 + 5 ** 0.5) * i
    return radius * np.stack([np.cos(azimuth) * np.sin(polar), np.sin(azimuth) * np.sin(polar), np.cos(polar)],
                             axis=1)


def band_limited_noise(rng, n_sensors, n_samples, sample_rate_hz, band_powers):
    """Sum over bands of Gaussian noise masked to the band, each row scaled to the band's power."""
    freqs = np.fft.rfftfreq(n_samples, d=1.0 / sample_rate_hz)
    signal = np.zeros((n_sensors, n_samples))
    for band, power in zip(BANDS, band_powers):
        if power == 0:
            continue
        mask = band.contains(freqs) & (freqs < sample_rate_hz / 2.0)
        if not mask.any():
            logger.warning('band {} has no bins below nyquist at {} Hz'.format(band.name, sample_rate_hz))
            continue
        spectrum = np.fft.rfft(rng.fork(band.name).normal(size=(n_sensors, n_samples)), axis=-1)
        spectrum[:, ~mask] = 0
        component = np.fft.irfft(spectrum, n=n_samples, axis=-1)
        component *= np.sqrt(power / component.var(axis=1, keepdims=True))
        signal += component
    return signal


def place_events(rng, n_events, duration, n_samples):
    """Sorted, non-overlapping onsets for n_events events of `duration` samples."""
    if n_events == 0:
        return []
    slack = n_samples - n_events * duration
    if slack < 0:
        raise OverlapError('{} events of {} samples cannot fit in {} samples without overlap'.format(
            n_events, duration, n_samples))
    gaps = np.sort(rng.integers(0, slack + 1, size=n_events))
    return [int(gap) + i * duration for i, gap in enumerate(gaps)]


def burst(n_samples, carrier_hz, sample_rate_hz, amplitude):
    t = np.arange(n_samples) / sample_rate_hz
    return amplitude * np.hanning(n_samples) * np.sin(2 * np.pi * carrier_hz * t)


def generate_subject(spec, rng, subject_index, event_sensors, event_weights):
    n_samples = spec.n_samples
    data = band_limited_noise(rng.fork('background'), spec.n_sensors, n_samples, spec.sample_rate_hz,
                              spec.band_powers)
    duration = int(round(spec.event_duration_s * spec.sample_rate_hz))
    onsets = place_events(rng.fork('events'), spec.n_events, duration, n_samples)
    voiced = rng.fork('voicing').integers(0, 2, size=len(onsets))
    for onset, is_voiced in zip(onsets, voiced):
        carrier = spec.voiced_carrier_hz if is_voiced else spec.voiceless_carrier_hz
        wave = burst(duration, carrier, spec.sample_rate_hz, spec.event_amplitude)
        data[event_sensors, onset:onset + duration] += event_weights[:, None] * wave
    gains = np.exp(rng.fork('gains').normal(0.0, spec.subject_gain_jitter, size=spec.n_sensors))
    data *= gains[:, None]

    recording = Recording(data.astype(np.float32), spec.sample_rate_hz, sensor_positions_on_sphere(spec.n_sensors),
                          spec.dataset_id, 'sub-{:02d}'.format(subject_index + 1))
    tracks = {
        'detection': EventTrack(tuple((onset, duration, 1) for onset in onsets), 'detection'),
        'voicing': EventTrack(tuple((onset, duration, int(v)) for onset, v in zip(onsets, voiced)), 'voicing'),
    }
    return recording, tracks


def generate_synthetic(spec):
    """Recordings and event tracks fully determined by the spec and its seed."""
    spec.validate()
    rng = Rng(spec.seed).fork(spec.dataset_id)
    layout = rng.fork('layout')
    n_event_sensors = max(1, int(math.floor(spec.sensor_subset_fraction * spec.n_sensors + 1e-9)))
    event_sensors = np.sort(layout.choice(spec.n_sensors, n_event_sensors, replace=False))
    event_weights = layout.uniform(0.5, 1.0, size=n_event_sensors)
    dataset = SyntheticDataset(spec)
    for i in range(spec.n_subjects):
        recording, tracks = generate_subject(spec, rng.fork('subject-{}'.format(i)), i, event_sensors, event_weights)
        dataset.recordings.append(recording)
        dataset.tracks[recording.recording_id] = tracks
        logger.info('generated {} with {} events'.format(recording, len(tracks['detection'])))
    return dataset


# ----------------------------------------------------------
#  Windows and labels
# ----------------------------------------------------------

def make_windows(recording, window_s):
    length = window_samples_for(window_s, recording.sample_rate_hz)
    return [Window(recording.data[:, start:start + length], (recording.recording_id, start),
                   recording.sample_rate_hz, recording.dataset_id, recording.subject_id)
            for start in range(0, recording.n_samples - length + 1, length)]


def align_detection_labels(window, track, tau):
    """Block label is 1 iff at least half of the block's samples fall inside an event."""
    length = window.n_samples
    if length % tau:
        raise RangeError('tau {} does not divide window length {}'.format(tau, length))
    block = length // tau
    counts = track.occupancy(window.origin[1], length).reshape(tau, block).sum(axis=1)
    return (2 * counts >= block).astype(np.int64)


def align_voicing_windows(track, recording, window_s):
    length = window_samples_for(window_s, recording.sample_rate_hz)
    labelled = []
    for onset, _, cls in track.events:
        if onset + length > recording.n_samples:
            continue
        window = Window(recording.data[:, onset:onset + length], (recording.recording_id, onset),
                        recording.sample_rate_hz, recording.dataset_id, recording.subject_id)
        labelled.append((window, cls))
    return labelled


def labelled_windows(recordings, tracks, task, window_s, tau):
    """(Window, label) pairs for a downstream task over every recording with the needed track."""
    kind = 'detection' if task == 'speech' else 'voicing'
    items = []
    for recording in recordings:
        track = tracks.get(recording.recording_id, {}).get(kind)
        if track is None:
            logger.warning('{} has no {} track, skipped'.format(recording.recording_id, kind))
            continue
        if task == 'speech':
            items.extend((w, align_detection_labels(w, track, tau)) for w in make_windows(recording, window_s))
        else:
            items.extend(align_voicing_windows(track, recording, window_s))
    return items


def rescale_track(track, factor):
    """Event positions after decimating the recording by an integer factor."""
    return EventTrack(tuple((onset // factor, max(1, duration // factor), cls)
                            for onset, duration, cls in track.events), track.kind)


# ----------------------------------------------------------
#  Splits and batches
# ----------------------------------------------------------

@dataclass(frozen=True)
class SplitPlan:
    train: Tuple[int, ...]
    val: Tuple[int, ...]
    test: Tuple[int, ...]
    ratios: Tuple[float, float, float]

    def indices(self, split):
        return getattr(self, split)

    def take(self, items, split):
        return [items[i] for i in self.indices(split)]

    def sizes(self):
        return tuple(len(self.indices(s)) for s in SPLITS)


def _round_half_up(x):
    return int(math.floor(x + 0.5))


def plan_splits(windows, ratios, seed):
    """Split each recording's windows into contiguous train/val/test segments.

    Segment sizes follow the ratios (val and test rounded, train takes the rest);
    the seed picks the order of the three segments within each recording.
    `windows` may be Windows or (Window, label) pairs.
    """
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9:
        raise RangeError('split ratios must be three values summing to 1, got {}'.format(ratios))
    by_recording = OrderedDict()
    for index, item in enumerate(windows):
        window = item[0] if isinstance(item, tuple) else item
        by_recording.setdefault(window.origin[0], []).append((window.origin[1], index))
    rng = Rng(seed).fork('splits')
    assigned = {s: [] for s in SPLITS}
    for recording_id, members in by_recording.items():
        ordered = [index for _, index in sorted(members)]
        n = len(ordered)
        n_val = _round_half_up(n * ratios[1])
        n_test = min(n - n_val, _round_half_up(n * ratios[2]))
        sizes = {'train': n - n_val - n_test, 'val': n_val, 'test': n_test}
        start = 0
        for position in rng.fork(recording_id).permutation(3):
            split = SPLITS[int(position)]
            assigned[split].extend(ordered[start:start + sizes[split]])
            start += sizes[split]
    return SplitPlan(*(tuple(sorted(assigned[s])) for s in SPLITS), ratios=tuple(ratios))


def batch_iter(split, batch_size, rng):
    """Shuffled, dataset-homogeneous batches; each dataset ends with its short remainder batch."""
    by_dataset = OrderedDict()
    for item in split:
        window = item[0] if isinstance(item, tuple) else item
        by_dataset.setdefault(window.dataset_id, []).append(item)
    batches = []
    for dataset_id in sorted(by_dataset):
        items = by_dataset[dataset_id]
        order = rng.fork(dataset_id).permutation(len(items))
        for start in range(0, len(items), batch_size):
            batches.append([items[int(i)] for i in order[start:start + batch_size]])
    for i in rng.fork('order').permutation(len(batches)):
        yield batches[int(i)]


def select_subjects(recordings, n_subjects, rng):
    """Recordings of n randomly chosen (dataset, subject) pairs."""
    keys = sorted({(r.dataset_id, r.subject_id) for r in recordings})
    if not 1 <= n_subjects <= len(keys):
        raise RangeError('cannot select {} of {} subjects'.format(n_subjects, len(keys)))
    chosen = {keys[int(i)] for i in rng.choice(len(keys), n_subjects, replace=False)}
    return [r for r in recordings if (r.dataset_id, r.subject_id) in chosen]


def hours_of(windows):
    return float(sum(w.n_samples / w.sample_rate_hz for w in windows) / 3600.0)


# ----------------------------------------------------------
#  Dataset directories
# ----------------------------------------------------------

MANIFEST_NAME = 'manifest.ini'


def write_dataset(out_dir, recordings, tracks, manifest):
    """Write every recording with its tracks plus a manifest; `manifest` holds extra header values."""
    os.makedirs(out_dir, exist_ok=True)
    parser = ini_parser()
    parser['manifest'] = OrderedDict((k, str(v)) for k, v in manifest.items())
    parser['recordings'] = OrderedDict()
    for recording in recordings:
        stem = recording_stem(recording)
        crc = write_recording(os.path.join(out_dir, stem), recording, tracks.get(recording.recording_id))
        parser['recordings'][stem] = str(crc)
    with open(os.path.join(out_dir, MANIFEST_NAME), 'w', encoding='utf-8') as f:
        parser.write(f)
    return os.path.join(out_dir, MANIFEST_NAME)


def read_dataset(directory):
    """Return (manifest dict, recordings, {recording_id: tracks}) from a dataset directory."""
    path = os.path.join(directory, MANIFEST_NAME)
    if not os.path.isfile(path):
        raise MissingFileError('dataset manifest {} does not exist'.format(path))
    parser = ini_parser()
    parser.read(path, encoding='utf-8')
    if not parser.has_section('recordings'):
        raise FormatError('{}: no [recordings] section'.format(path))
    recordings, tracks = [], {}
    for stem in parser['recordings']:
        recording, recording_tracks = read_recording(os.path.join(directory, stem))
        recordings.append(recording)
        tracks[recording.recording_id] = recording_tracks
    manifest = dict(parser['manifest']) if parser.has_section('manifest') else {}
    return manifest, recordings, tracks
