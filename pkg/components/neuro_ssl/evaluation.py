"""Balanced accuracy and the one-sample one-sided t-test against chance."""
import csv
import io
import logging
import math
from dataclasses import dataclass

import numpy as np

from .core import DegenerateError, EmptyError, IndexOutOfRangeError, RangeError

logger = logging.getLogger(__name__)

CF_TOLERANCE = 1e-12
CF_MAX_ITERATIONS = 10000
_TINY = 1e-300


@dataclass(frozen=True)
class ConfusionCounts:
    true_positives: np.ndarray
    false_negatives: np.ndarray

    @classmethod
    def from_predictions(cls, predictions, labels, n_classes):
        predictions = np.asarray(predictions, dtype=np.int64).reshape(-1)
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        if predictions.shape != labels.shape:
            raise RangeError('{} predictions for {} labels'.format(predictions.size, labels.size))
        if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
            raise IndexOutOfRangeError('labels must lie in [0, {})'.format(n_classes))
        correct = predictions == labels
        tp = np.bincount(labels[correct], minlength=n_classes)
        fn = np.bincount(labels[~correct], minlength=n_classes)
        return cls(tp, fn)

    @property
    def support(self):
        return self.true_positives + self.false_negatives

    @property
    def total(self):
        return int(self.support.sum())

    def recalls(self):
        present = self.support > 0
        return self.true_positives[present] / self.support[present]


def balanced_accuracy(predictions, labels, n_classes):
    """Mean per-class recall over the classes present in labels."""
    counts = ConfusionCounts.from_predictions(predictions, labels, n_classes)
    if counts.total == 0:
        raise EmptyError('balanced accuracy of an empty sample')
    return float(np.mean(counts.recalls()))


# ----------------------------------------------------------
#  Student t upper tail
# ----------------------------------------------------------

def _beta_continued_fraction(a, b, x):
    """Modified Lentz evaluation of the incomplete beta continued fraction."""
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > _TINY else _TINY)
    h = d
    for m in range(1, CF_MAX_ITERATIONS + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > _TINY else _TINY)
        c = 1.0 + aa / c
        c = c if abs(c) > _TINY else _TINY
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > _TINY else _TINY)
        c = 1.0 + aa / c
        c = c if abs(c) > _TINY else _TINY
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < CF_TOLERANCE:
            return h
    raise DegenerateError('incomplete beta did not converge for a={}, b={}, x={}'.format(a, b, x))


def regularized_incomplete_beta(a, b, x):
    if not 0.0 <= x <= 1.0:
        raise RangeError('incomplete beta needs 0 <= x <= 1, got {}'.format(x))
    if x == 0.0 or x == 1.0:
        return x
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _beta_continued_fraction(a, b, x) / a
    return 1.0 - math.exp(log_front) * _beta_continued_fraction(b, a, 1.0 - x) / b


def student_t_sf(t, df):
    """P(T > t) for Student t with df degrees of freedom."""
    if df < 1:
        raise RangeError('degrees of freedom must be positive, got {}'.format(df))
    if math.isinf(t):
        return 0.0 if t > 0 else 1.0
    tail = 0.5 * regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t * t))
    return tail if t >= 0 else 1.0 - tail


def student_t_sf_df2(t):
    return 0.5 * (1.0 - t / math.sqrt(2.0 + t * t))


@dataclass(frozen=True)
class TTestResult:
    mean: float
    sem: float
    n: int
    t: float
    p: float
    chance: float = 0.5

    @property
    def df(self):
        return self.n - 1

    def __str__(self):
        return '{:.4f} ± {:.4f} (t={:.1f}, p={:.1e}, n={})'.format(self.mean, self.sem, self.t, self.p, self.n)


def t_test_from_summary(mean, sem, n, chance):
    if n < 2:
        raise RangeError('a t-test needs at least 2 samples, got {}'.format(n))
    if not sem > 0:
        raise DegenerateError('standard error is zero; the t statistic is undefined')
    t = (mean - chance) / sem
    p = student_t_sf_df2(t) if n - 1 == 2 else student_t_sf(t, n - 1)
    return TTestResult(float(mean), float(sem), int(n), float(t), float(p), float(chance))


def t_test_vs_chance(accuracies, chance):
    """One-sample, one-sided (upper tail) t-test of per-seed accuracies against chance."""
    values = np.asarray(accuracies, dtype=np.float64)
    if values.size < 2:
        raise RangeError('a t-test needs at least 2 samples, got {}'.format(values.size))
    sd = float(values.std(ddof=1))
    if sd == 0:
        raise DegenerateError('all {} accuracies are identical; the t statistic is undefined'.format(values.size))
    return t_test_from_summary(float(values.mean()), sd / math.sqrt(values.size), values.size, chance)


RESULTS_COLUMNS = ('label', 'mean', 'sem', 't', 'p', 'n')


def results_table_csv(rows, path=None):
    """`rows` are (label, TTestResult) pairs; returns the CSV text and writes it when path is given."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator='\n')
    writer.writerow(RESULTS_COLUMNS)
    for label, result in rows:
        writer.writerow([label, repr(result.mean), repr(result.sem), repr(result.t), repr(result.p), result.n])
    text = buffer.getvalue()
    if path is not None:
        with open(path, 'w', encoding='utf-8', newline='') as f:
            f.write(text)
    return text
