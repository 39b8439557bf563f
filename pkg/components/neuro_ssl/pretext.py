"""The three pretext transforms, their implicit labels and the combined pre-training loss."""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np

from . import autodiff as ad
from .core import BANDS, ShapeError, floor_fraction
from .dsp import fft_real, ifft_real, rfft_frequencies

logger = logging.getLogger(__name__)

TASKS = ('band', 'phase', 'amplitude')
NUM_CLASSES = {'band': len(BANDS), 'phase': 8, 'amplitude': 16}
PHASE_SHIFTS = np.arange(NUM_CLASSES['phase']) * np.pi / 8


@dataclass(frozen=True)
class ScaleGrid:
    factors: Tuple[float, ...] = tuple(np.linspace(-2.0, 2.0, NUM_CLASSES['amplitude']))

    def __len__(self):
        return len(self.factors)

    def __getitem__(self, index):
        return self.factors[index]


SCALE_GRID = ScaleGrid()


@dataclass(frozen=True)
class PretextSample:
    transformed: object
    task: str
    label_index: int
    meta: Dict[str, object] = field(default_factory=dict)
    sensor_subset: Tuple[int, ...] = ()


def select_sensor_subset(rng, n_sensors, rho):
    """max(1, floor(rho * S)) distinct sensors, uniformly without replacement, sorted."""
    count = min(n_sensors, floor_fraction(rho, n_sensors))
    return tuple(sorted(int(i) for i in rng.choice(n_sensors, count, replace=False)))


def apply_band_stop(window, band):
    """Zero the FFT bins of every sensor that fall in the band, then return to the time domain."""
    n = window.n_samples
    spectrum = fft_real(window.data)
    mask = band.contains(rfft_frequencies(n, window.sample_rate_hz))
    spectrum[..., mask] = 0
    return window.with_data(ifft_real(spectrum, n))


def phase_rotate(rows, phi):
    """Rotate positive-frequency bins by exp(-i*phi); DC and Nyquist bins stay put."""
    n = rows.shape[-1]
    spectrum = fft_real(rows)
    last = spectrum.shape[-1] if n % 2 else spectrum.shape[-1] - 1
    spectrum[..., 1:last] *= np.exp(-1j * phi)
    return ifft_real(spectrum, n)


def apply_phase_shift(window, phi, subset):
    data = np.array(window.data, copy=True)
    subset = list(subset)
    if subset and phi != 0:
        data[subset] = phase_rotate(window.data[subset], phi)
    return window.with_data(data)


def apply_amplitude_scale(window, factor_index, subset):
    data = np.array(window.data, copy=True)
    subset = list(subset)
    data[subset] = data[subset] * SCALE_GRID[factor_index]
    return window.with_data(data)


def sample_pretext_window(rng, window, rho_phase, rho_amplitude):
    band_index = int(rng.fork('band').integers(NUM_CLASSES['band']))
    band = BANDS[band_index]
    phase_rng = rng.fork('phase')
    phase_index = int(phase_rng.integers(NUM_CLASSES['phase']))
    phase_subset = select_sensor_subset(phase_rng, window.n_sensors, rho_phase)
    amplitude_rng = rng.fork('amplitude')
    amplitude_index = int(amplitude_rng.integers(NUM_CLASSES['amplitude']))
    amplitude_subset = select_sensor_subset(amplitude_rng, window.n_sensors, rho_amplitude)

    phi = float(PHASE_SHIFTS[phase_index])
    return {
        'band': PretextSample(apply_band_stop(window, band), 'band', band_index, {'band': band}),
        'phase': PretextSample(apply_phase_shift(window, phi, phase_subset), 'phase', phase_index,
                               {'phi': phi}, phase_subset),
        'amplitude': PretextSample(apply_amplitude_scale(window, amplitude_index, amplitude_subset), 'amplitude',
                                   amplitude_index, {'factor': SCALE_GRID[amplitude_index]}, amplitude_subset),
    }


def sample_pretext_batch(rng, batch, cfg):
    """One sample per task for every window; each window draws from its own pre-forked stream."""
    samples = {task: [] for task in TASKS}
    for i, window in enumerate(batch):
        drawn = sample_pretext_window(rng.fork('window-{}'.format(i)), window, cfg.rho_phase, cfg.rho_amplitude)
        for task in TASKS:
            samples[task].append(drawn[task])
    return samples


def stack_samples(samples: List[PretextSample], dtype=np.float64):
    data = np.stack([s.transformed.data for s in samples]).astype(dtype, copy=False)
    labels = np.array([s.label_index for s in samples], dtype=np.int64)
    return data, labels


def ssl_loss(predictions, labels, weights):
    """w1*L_band + w2*L_phase + w3*L_amplitude with batch-mean cross-entropy components.

    Every component is evaluated, even with a zero weight, so it can be logged.
    Returns the total loss tensor and a dict of float components.
    """
    total = None
    components = {}
    for task, weight in zip(TASKS, weights):
        logits = predictions[task]
        if logits.shape[-1] != NUM_CLASSES[task]:
            raise ShapeError('{} logits need {} classes, got shape {}'.format(
                task, NUM_CLASSES[task], logits.shape))
        loss = ad.cross_entropy(logits, labels[task])
        components[task] = float(loss.values)
        term = loss * float(weight)
        total = term if total is None else total + term
    components['ssl'] = float(total.values)
    return total, components


def pretext_accuracy(predictions, labels):
    return {task: float(np.mean(np.argmax(predictions[task].values, axis=-1) == labels[task])) for task in TASKS}
