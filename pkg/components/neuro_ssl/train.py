"""Pre-training, fine-tuning and evaluation loops with per-epoch run records."""
import csv
import dataclasses
import io
import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np

from . import autodiff as ad
from .core import (LeakageError, NonFiniteLossError, RangeError, Rng, ShapeError, TrainConfig, UnknownDatasetError,
                   dump_settings)
from .data import SPLITS, batch_iter, hours_of, plan_splits
from .evaluation import balanced_accuracy
from .model import RawClassifier, standardize_array
from .pretext import NUM_CLASSES, TASKS, pretext_accuracy, sample_pretext_batch, ssl_loss, stack_samples

logger = logging.getLogger(__name__)

RUN_COLUMNS = ('epoch', 'loss_band', 'loss_phase', 'loss_amplitude', 'loss_ssl', 'loss_supervised', 'loss_total',
               'val_acc_band', 'val_acc_phase', 'val_acc_amplitude', 'val_metric', 'test_metric')
ZERO_SHOT_COLUMNS = ('group', 'n_windows', 'n_subjects', 'balanced_accuracy')


@dataclass
class RunRecord:
    kind: str
    seed: int
    config: str = ''
    task: str = ''
    mode: str = ''
    label: str = ''
    pretrain_hours: float = 0.0
    columns: tuple = RUN_COLUMNS
    rows: List[Dict[str, object]] = field(default_factory=list)
    wall_clock_s: float = 0.0
    extras: Dict[str, object] = field(default_factory=dict)

    def add_row(self, **values):
        unknown = set(values) - set(self.columns)
        if unknown:
            raise RangeError('unknown run record columns {}'.format(sorted(unknown)))
        self.rows.append(values)

    @property
    def best_epoch(self):
        """Index of the first epoch with the highest validation metric."""
        scored = [(row.get('val_metric'), i) for i, row in enumerate(self.rows) if row.get('val_metric') is not None]
        if not scored:
            return None
        best = max(value for value, _ in scored)
        return next(i for value, i in scored if value == best)

    @property
    def test_metric(self):
        best = self.best_epoch
        return None if best is None else self.rows[best].get('test_metric')

    def to_csv(self):
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator='\n')
        writer.writerow(self.columns)
        for row in self.rows:
            writer.writerow([_format_cell(row.get(column)) for column in self.columns])
        return buffer.getvalue()

    def summary_text(self):
        lines = ['kind: {}'.format(self.kind), 'seed: {}'.format(self.seed)]
        for name in ('task', 'mode', 'label'):
            if getattr(self, name):
                lines.append('{}: {}'.format(name, getattr(self, name)))
        lines.append('pretrain_hours: {!r}'.format(self.pretrain_hours))
        lines.append('best_epoch: {}'.format(self.best_epoch))
        lines.append('test_metric: {}'.format(_format_cell(self.test_metric)))
        for key in sorted(self.extras):
            lines.append('{}: {}'.format(key, _format_cell(self.extras[key])))
        return '\n'.join(lines) + '\n'

    def write(self, directory, name):
        csv_path = '{}/{}.csv'.format(directory, name)
        with open(csv_path, 'w', encoding='utf-8', newline='') as f:
            f.write(self.to_csv())
        with open('{}/{}.summary.txt'.format(directory, name), 'w', encoding='utf-8') as f:
            f.write(self.summary_text())
        with open('{}/{}.config.ini'.format(directory, name), 'w', encoding='utf-8') as f:
            f.write(self.config)
        # wall-clock time only goes to the log, the files stay byte-identical across reruns
        logger.info('{} run for seed {} took {:.1f} s, written to {}'.format(
            self.kind, self.seed, self.wall_clock_s, csv_path))
        return csv_path


def _format_cell(value):
    if value is None:
        return ''
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


# ----------------------------------------------------------
#  Helpers
# ----------------------------------------------------------

def _windows_of(items):
    return [item[0] if isinstance(item, tuple) else item for item in items]


def _subjects_of(items):
    return [w.subject_id for w in _windows_of(items)]


def _stack_windows(items, dtype):
    return standardize_array(np.stack([w.data for w in _windows_of(items)])).astype(dtype, copy=False)


def _stack_labels(items):
    return np.stack([np.asarray(label, dtype=np.int64) for _, label in items])


def _check_finite(loss, epoch, batch):
    if not np.all(np.isfinite(loss.values)):
        raise NonFiniteLossError('non-finite loss {} at epoch {} batch {}'.format(float(loss.values), epoch, batch))


def _require_registered(model, items):
    for dataset_id in sorted({w.dataset_id for w in _windows_of(items)}):
        if dataset_id not in model.encoder.projections:
            raise UnknownDatasetError('dataset {} is not registered with the model'.format(dataset_id))


def tau_for(model, window_samples):
    return window_samples // model.cfg.total_downsampling


def _task_logits(model, x, items, task):
    h = model.forward_backbone(x, _windows_of(items)[0].dataset_id, _subjects_of(items))
    return model.forward_task(h, task)


def _predict(forward, items, batch_size, rng):
    """Predicted and true labels over items, batched by dataset without tape."""
    predicted, truth = [], []
    with ad.no_grad():
        for batch in batch_iter(items, batch_size, rng):
            logits = forward(batch)
            predicted.append(np.argmax(logits.values, axis=-1).reshape(-1))
            truth.append(_stack_labels(batch).reshape(-1))
    if not predicted:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.concatenate(predicted), np.concatenate(truth)


def _metric(forward, items, batch_size, rng):
    if not items:
        return None
    predicted, truth = _predict(forward, items, batch_size, rng)
    return balanced_accuracy(predicted, truth, 2)


# ----------------------------------------------------------
#  Pre-training
# ----------------------------------------------------------

def pretext_forward(model, samples, dtype):
    """Forward each task's transformed windows; returns (logits per task, labels per task)."""
    predictions, labels = {}, {}
    for task in TASKS:
        data, task_labels = stack_samples(samples[task], dtype)
        windows = [s.transformed for s in samples[task]]
        h = model.forward_backbone(data, windows[0].dataset_id, [w.subject_id for w in windows])
        predictions[task] = model.forward_pretext(h)[task]
        labels[task] = task_labels
    return predictions, labels


def _standardised_windows(batch):
    data = standardize_array(np.stack([w.data for w in batch]))
    return [w.with_data(data[i], standardised=True) for i, w in enumerate(batch)]


def pretext_accuracies(model, windows, cfg, rng):
    """Mean pretext accuracy per task over windows with fixed transforms drawn from rng."""
    if not windows:
        return None
    correct = {task: [] for task in TASKS}
    with ad.no_grad():
        for i, batch in enumerate(batch_iter(windows, cfg.batch_size, rng.fork('batches'))):
            samples = sample_pretext_batch(rng.fork('batch-{}'.format(i)), _standardised_windows(batch), cfg)
            predictions, labels = pretext_forward(model, samples, cfg.dtype)
            for task, accuracy in pretext_accuracy(predictions, labels).items():
                correct[task].extend([accuracy] * len(batch))
    return {task: float(np.mean(values)) for task, values in correct.items()}


def pretrain(model, windows, cfg: TrainConfig, rng=None, labelled=None, labelled_task='speech', epochs=None):
    """Self-supervised pre-training on unlabelled windows; returns a RunRecord.

    With semi_supervised_weight > 0 and labelled (Window, label) pairs, the
    labelled task's cross-entropy is added to the pretext loss each batch.
    """
    if not model.encoder.projections:
        raise UnknownDatasetError('pre-training needs at least one registered dataset')
    _require_registered(model, windows)
    rng = rng or Rng(cfg.seed).fork('pretrain')
    epochs = epochs or cfg.pretrain_epochs
    plan = plan_splits(windows, cfg.split_ratios, cfg.seed)
    train_windows, val_windows, test_windows = (plan.take(windows, s) for s in SPLITS)

    semi = cfg.semi_supervised_weight > 0 and bool(labelled)
    if semi:
        _require_registered(model, labelled)
        tau = tau_for(model, _windows_of(labelled)[0].n_samples)
        if labelled_task not in model.heads:
            model.attach_head(labelled_task, tau, rng.fork('semi-head'))
        labelled_train = plan_splits(labelled, cfg.split_ratios, cfg.seed).take(labelled, 'train')

    model.trained_subjects = model.trained_subjects | set(_subjects_of(train_windows))
    if semi:
        model.trained_subjects = model.trained_subjects | set(_subjects_of(labelled_train))
    model.unfreeze()
    optimiser = ad.AdamW(model.named_parameters(), cfg.lr, weight_decay=cfg.weight_decay)
    record = RunRecord('pretrain', cfg.seed, config=dump_settings(model.cfg, cfg),
                       label='w={}'.format(','.join(repr(float(w)) for w in cfg.loss_weights)),
                       pretrain_hours=hours_of(train_windows))
    if semi:
        record.task = labelled_task
    started = time.monotonic()
    logger.info('pre-training on {} windows ({:.3f} h) for {} epochs'.format(
        len(train_windows), record.pretrain_hours, epochs))

    for epoch in range(epochs):
        epoch_rng = rng.fork('epoch-{}'.format(epoch))
        totals = {key: [] for key in TASKS + ('ssl', 'supervised', 'total')}
        labelled_batches = iter(())
        if semi:
            labelled_batches = batch_iter(labelled_train, cfg.batch_size, epoch_rng.fork('semi'))
        for b, batch in enumerate(batch_iter(train_windows, cfg.batch_size, epoch_rng.fork('batches'))):
            samples = sample_pretext_batch(epoch_rng.fork('batch-{}'.format(b)), _standardised_windows(batch), cfg)
            predictions, labels = pretext_forward(model, samples, cfg.dtype)
            loss, components = ssl_loss(predictions, labels, cfg.loss_weights)
            supervised = None
            if semi:
                labelled_batch = next(labelled_batches, None)
                if labelled_batch is None:
                    labelled_batches = batch_iter(labelled_train, cfg.batch_size,
                                                  epoch_rng.fork('semi-{}'.format(b)))
                    labelled_batch = next(labelled_batches, None)
                if labelled_batch is not None:
                    logits = _task_logits(model, _stack_windows(labelled_batch, cfg.dtype), labelled_batch,
                                          labelled_task)
                    supervised = ad.cross_entropy(logits, _stack_labels(labelled_batch))
                    loss = loss + supervised * float(cfg.semi_supervised_weight)
            _check_finite(loss, epoch, b)
            optimiser.zero_grad()
            loss.backward()
            optimiser.step()
            for task in TASKS + ('ssl',):
                totals[task].append(components[task])
            totals['supervised'].append(float(supervised.values) if supervised is not None else 0.0)
            totals['total'].append(float(loss.values))

        val = pretext_accuracies(model, val_windows, cfg, rng.fork('val'))
        test = pretext_accuracies(model, test_windows, cfg, rng.fork('test'))
        row = {
            'epoch': epoch,
            'loss_band': float(np.mean(totals['band'])),
            'loss_phase': float(np.mean(totals['phase'])),
            'loss_amplitude': float(np.mean(totals['amplitude'])),
            'loss_ssl': float(np.mean(totals['ssl'])),
            'loss_supervised': float(np.mean(totals['supervised'])) if semi else None,
            'loss_total': float(np.mean(totals['total'])),
            'val_metric': float(np.mean(list(val.values()))) if val else None,
            'test_metric': float(np.mean(list(test.values()))) if test else None,
        }
        if val:
            row.update({'val_acc_{}'.format(task): val[task] for task in TASKS})
        record.add_row(**row)
        logger.info('epoch {}: ssl {:.4f} (band {:.4f}, phase {:.4f}, amplitude {:.4f}) val {}'.format(
            epoch, row['loss_ssl'], row['loss_band'], row['loss_phase'], row['loss_amplitude'],
            _format_cell(row['val_metric'])))
    record.wall_clock_s = time.monotonic() - started
    return record


# ----------------------------------------------------------
#  Fine-tuning
# ----------------------------------------------------------

def _fit_classifier(record, forward, named_parameters, labelled, cfg, epochs, rng):
    """Train `forward` on the train split; keeps val/test balanced accuracy per epoch.

    The trainable parameters of the first best-validation epoch are restored at
    the end, so the model left behind is the one the reported test metric scored.
    """
    plan = plan_splits(labelled, cfg.split_ratios, cfg.seed)
    train_items, val_items, test_items = (plan.take(labelled, s) for s in SPLITS)
    if not train_items:
        raise RangeError('no labelled windows in the train split')
    named_parameters = list(named_parameters)
    optimiser = ad.AdamW(named_parameters, cfg.lr, weight_decay=cfg.weight_decay)
    best_val, best_values = None, None
    for epoch in range(epochs):
        epoch_rng = rng.fork('epoch-{}'.format(epoch))
        losses = []
        for b, batch in enumerate(batch_iter(train_items, cfg.batch_size, epoch_rng.fork('batches'))):
            loss = ad.cross_entropy(forward(batch), _stack_labels(batch))
            _check_finite(loss, epoch, b)
            optimiser.zero_grad()
            loss.backward()
            optimiser.step()
            losses.append(float(loss.values))
        val = _metric(forward, val_items, cfg.batch_size, rng.fork('val'))
        test = _metric(forward, test_items, cfg.batch_size, rng.fork('test'))
        record.add_row(epoch=epoch, loss_supervised=float(np.mean(losses)), loss_total=float(np.mean(losses)),
                       val_metric=val, test_metric=test)
        logger.info('epoch {}: loss {:.4f} val {} test {}'.format(
            epoch, float(np.mean(losses)), _format_cell(val), _format_cell(test)))
        if val is not None and (best_val is None or val > best_val):
            best_val = val
            best_values = {name: np.array(p.values, copy=True) for name, p in named_parameters if not p.frozen}
    if best_values is not None:
        logger.info('restoring parameters of epoch {}'.format(record.best_epoch))
        for name, p in named_parameters:
            if name in best_values:
                p.values = best_values[name]
    return record


def finetune(model, labelled, cfg: TrainConfig, task, mode='shallow', rng=None, epochs=None, label=''):
    """Fit a fresh downstream head on (Window, label) pairs; shallow keeps the backbone frozen."""
    if task not in ('speech', 'voicing'):
        raise RangeError('unknown downstream task {}'.format(task))
    if not labelled:
        raise RangeError('fine-tuning needs labelled windows')
    rng = rng or Rng(cfg.seed).fork('finetune')
    epochs = epochs or cfg.finetune_epochs
    windows = _windows_of(labelled)
    for dataset_id in sorted({w.dataset_id for w in windows}):
        if dataset_id not in model.encoder.projections:
            model.register_dataset(dataset_id, next(w.n_sensors for w in windows if w.dataset_id == dataset_id))
    tau = tau_for(model, windows[0].n_samples)
    if task == 'speech' and np.asarray(labelled[0][1]).shape != (tau,):
        raise ShapeError('speech labels must have {} entries, got {}'.format(tau, np.asarray(labelled[0][1]).shape))
    model.attach_head(task, tau, rng.fork('head'))
    model.set_finetune_mode(mode)

    record = RunRecord('finetune', cfg.seed, config=dump_settings(model.cfg, cfg), task=task, mode=mode,
                       label=label)
    record.extras['backbone_hash_before'] = model.backbone_hash()
    started = time.monotonic()
    logger.info('{} fine-tuning for {} on {} windows, {} epochs'.format(mode, task, len(labelled), epochs))

    def forward(batch):
        return _task_logits(model, _stack_windows(batch, cfg.dtype), batch, task)

    train_items = plan_splits(labelled, cfg.split_ratios, cfg.seed).take(labelled, 'train')
    model.trained_subjects = model.trained_subjects | set(_subjects_of(train_items))
    _fit_classifier(record, forward, model.named_parameters(), labelled, cfg, epochs, rng)
    record.extras['backbone_hash_after'] = model.backbone_hash()
    record.wall_clock_s = time.monotonic() - started
    return record


def train_supervised_baseline(labelled, cfg: TrainConfig, task, kind, tau, rng=None, epochs=None, hidden=512):
    """Linear or MLP classifier on standardised raw windows, with the fine-tuning protocol."""
    rng = rng or Rng(cfg.seed).fork('baseline')
    epochs = epochs or cfg.finetune_epochs
    first = _windows_of(labelled)[0]
    classifier = RawClassifier(rng.fork('classifier'), kind, task, first.n_sensors, first.n_samples, tau,
                               hidden=hidden, dtype=cfg.dtype)
    record = RunRecord('supervised', cfg.seed, config=dump_settings(cfg), task=task, mode='supervised-' + kind,
                       label='supervised-' + kind)
    started = time.monotonic()

    def forward(batch):
        return classifier(_stack_windows(batch, cfg.dtype))

    _fit_classifier(record, forward, classifier.named_parameters(), labelled, cfg, epochs, rng)
    record.wall_clock_s = time.monotonic() - started
    return record


# ----------------------------------------------------------
#  Zero-shot subjects
# ----------------------------------------------------------

def check_leakage(training_items, heldout_subjects, model=None):
    heldout = set(heldout_subjects)
    leaked = sorted(heldout & set(_subjects_of(training_items)))
    if model is not None:
        known = set(model.trained_subjects)
        if model.subjects is not None:
            known |= set(model.subjects.subject_ids)
        leaked = sorted(set(leaked) | (heldout & known))
    if leaked:
        raise LeakageError('held-out subjects {} appear in training data'.format(', '.join(leaked)))


def evaluate_zero_shot(model, labelled, heldout_subjects, task, cfg, training_items=(), rng=None):
    """Balanced accuracy of the attached head on seen and held-out subjects, reported separately.

    Held-out subjects must not occur in the training items nor own a learned
    embedding; they are conditioned on fresh random embeddings.
    """
    check_leakage(training_items, heldout_subjects, model)
    rng = rng or Rng(cfg.seed).fork('zero-shot')
    heldout = set(heldout_subjects)
    groups = {
        'seen': [item for item in labelled if item[0].subject_id not in heldout],
        'unseen': [item for item in labelled if item[0].subject_id in heldout],
    }
    record = RunRecord('zero-shot', cfg.seed, config=dump_settings(model.cfg, cfg), task=task,
                       columns=ZERO_SHOT_COLUMNS, label='zero-shot')

    def forward(batch):
        return _task_logits(model, _stack_windows(batch, cfg.dtype), batch, task)

    for group in ('seen', 'unseen'):
        items = groups[group]
        accuracy = _metric(forward, items, cfg.batch_size, rng.fork(group))
        record.add_row(group=group, n_windows=len(items), n_subjects=len(set(_subjects_of(items))),
                       balanced_accuracy=accuracy)
        logger.info('{} subjects: balanced accuracy {}'.format(group, _format_cell(accuracy)))
    return record


# ----------------------------------------------------------
#  Sweeps
# ----------------------------------------------------------

RHO_SWEEP = (0.1, 0.2, 0.3, 0.4, 0.5)


def rho_sweep_configs(cfg: TrainConfig, task, rhos=RHO_SWEEP):
    """One config per rho for the phase or amplitude task, pre-training that task alone."""
    if task not in ('phase', 'amplitude'):
        raise RangeError('rho applies to the phase and amplitude tasks, not {}'.format(task))
    weights = (0.0, 1.0, 0.0) if task == 'phase' else (0.0, 0.0, 1.0)
    return [dataclasses.replace(cfg, loss_weights=weights, **{'rho_' + task: float(rho)}) for rho in rhos]


def chance_level(task):
    return 1.0 / NUM_CLASSES[task] if task in NUM_CLASSES else 0.5
