#!/usr/bin/env python3
"""Command line for synthetic data, preprocessing, pre-training, fine-tuning, evaluation and reports.

Exit codes: 0 ok, 2 configuration, 3 compatibility, 4 numeric failure.
"""
import argparse
import csv
import dataclasses
import glob
import logging
import math
import os
import sys
from collections import OrderedDict

import numpy as np

if __package__ in (None, ''):
    sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..', '..')))

from components.neuro_ssl import __version__
from components.neuro_ssl import data as dataio
from components.neuro_ssl.core import (MissingFileError, NeuroSslError, PreprocessConfig, Rng, ShapeError, SpecError,
                                       load_settings, settings_hash, validate_config, window_samples_for)
from components.neuro_ssl.dsp import preprocess
from components.neuro_ssl.evaluation import results_table_csv, t_test_vs_chance
from components.neuro_ssl.model import CortexModel, load_model, save_model
from components.neuro_ssl.train import (RHO_SWEEP, chance_level, check_leakage, evaluate_zero_shot, finetune,
                                        pretext_accuracies, pretrain, rho_sweep_configs, train_supervised_baseline)

logger = logging.getLogger(__name__)

DEFAULT_SEEDS = (0, 1, 2)
MANIFEST_NAME = 'manifest.ini'
REPORT_COLUMNS = ('task', 'mode', 'label', 'pretrain_hours', 'seed', 'test_metric')
SUMMARY_KEYS = ('kind', 'seed', 'pretrain_hours', 'test_metric')


def configure_logging(verbose=False):
    root = logging.getLogger()
    root.setLevel(logging.DEBUG)
    handler = logging.StreamHandler()
    handler.setLevel(logging.DEBUG if verbose else logging.INFO)
    handler.setFormatter(logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s'))
    root.handlers = [handler]


# ----------------------------------------------------------
#  Shared helpers
# ----------------------------------------------------------

def _write_ini(path, sections):
    parser = dataio.ini_parser()
    for name, values in sections.items():
        parser[name] = OrderedDict((str(k), str(v)) for k, v in values.items())
    with open(path, 'w', encoding='utf-8') as f:
        parser.write(f)
    return path


def _read_ini(path):
    if not os.path.isfile(path):
        raise MissingFileError('{} does not exist'.format(path))
    parser = dataio.ini_parser()
    parser.read(path, encoding='utf-8')
    return parser


def _load_recordings(directories):
    recordings, tracks = [], {}
    for directory in directories:
        _, dir_recordings, dir_tracks = dataio.read_dataset(directory)
        recordings.extend(dir_recordings)
        tracks.update(dir_tracks)
    if not recordings:
        raise MissingFileError('no recordings found in {}'.format(', '.join(directories)))
    return recordings, tracks


def _sensor_counts(model_cfg, recordings):
    counts = dict(model_cfg.dataset_sensor_counts)
    for recording in recordings:
        expected = counts.setdefault(recording.dataset_id, recording.n_sensors)
        if expected != recording.n_sensors:
            raise ShapeError('dataset {} is configured with {} sensors, {} has {}'.format(
                recording.dataset_id, expected, recording.recording_id, recording.n_sensors))
    return counts


def _checked(model_cfg, train_cfg, recordings):
    rates = {r.sample_rate_hz for r in recordings}
    if len(rates) != 1:
        raise ShapeError('recordings mix sample rates {}'.format(sorted(rates)))
    window_samples = window_samples_for(train_cfg.window_s, rates.pop())
    model_cfg = dataclasses.replace(model_cfg, dataset_sensor_counts=_sensor_counts(model_cfg, recordings))
    return validate_config(model_cfg, train_cfg, window_samples)


def _windows(recordings, window_s):
    windows = []
    for recording in recordings:
        windows.extend(dataio.make_windows(recording, window_s))
    return windows


def _seed_dir(out_dir, seed):
    path = os.path.join(out_dir, 'seed-{}'.format(seed))
    os.makedirs(path, exist_ok=True)
    return path


def _checkpoint_for(checkpoint_dir, seed):
    manifest = _read_ini(os.path.join(checkpoint_dir, MANIFEST_NAME))
    key = 'seed-{}'.format(seed)
    if not manifest.has_option('checkpoints', key):
        raise MissingFileError('{} lists no checkpoint for {}'.format(os.path.join(checkpoint_dir, MANIFEST_NAME), key))
    path = os.path.join(checkpoint_dir, manifest.get('checkpoints', key))
    if not os.path.isfile(path):
        raise MissingFileError('checkpoint {} does not exist'.format(path))
    hours = manifest.getfloat('pretrain_hours', key, fallback=0.0)
    return path, hours


def _summarise(records, chance, label, out_dir):
    """Mean ± sem and t-test over per-seed test metrics, written as summary.csv."""
    metrics = [r.test_metric for r in records if r.test_metric is not None]
    logger.info('{}: test metrics {}'.format(label, ', '.join('{:.4f}'.format(m) for m in metrics)))
    if len(metrics) < 2:
        logger.warning('{} seed(s) with a test metric, no t-test'.format(len(metrics)))
        return None
    try:
        result = t_test_vs_chance(metrics, chance)
    except NeuroSslError as e:
        logger.warning('{}: {}'.format(label, e))
        return None
    results_table_csv([(label, result)], os.path.join(out_dir, 'summary.csv'))
    logger.info('{}: {}'.format(label, result))
    return result


# ----------------------------------------------------------
#  Commands
# ----------------------------------------------------------

def cmd_synth(args):
    spec = dataio.load_synth_spec(args.spec)
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed).validate()
    dataset = dataio.generate_synthetic(spec)
    manifest = OrderedDict([('version', __version__), ('config_hash', settings_hash(spec)), ('seed', spec.seed),
                            ('dataset_id', spec.dataset_id), ('n_subjects', spec.n_subjects)])
    path = dataio.write_dataset(args.out, dataset.recordings, dataset.tracks, manifest)
    logger.info('wrote {} recordings, manifest {}'.format(len(dataset.recordings), path))
    return 0


def cmd_preprocess(args):
    settings = load_settings(args.config)[2] if args.config else PreprocessConfig()
    manifest, recordings, tracks = dataio.read_dataset(args.data)
    os.makedirs(args.out, exist_ok=True)
    processed, processed_tracks = [], {}
    for recording in recordings:
        cleaned, report = preprocess(recording, settings)
        factor = int(round(recording.sample_rate_hz / cleaned.sample_rate_hz))
        processed.append(cleaned)
        processed_tracks[cleaned.recording_id] = {
            kind: dataio.rescale_track(track, factor) for kind, track in tracks.get(recording.recording_id, {}).items()}
        qc_path = os.path.join(args.out, dataio.recording_stem(cleaned) + '.qc.txt')
        with open(qc_path, 'w', encoding='utf-8') as f:
            f.write(report.to_text())
    manifest = OrderedDict(manifest)
    manifest.update([('version', __version__), ('preprocess_hash', settings_hash(settings))])
    dataio.write_dataset(args.out, processed, processed_tracks, manifest)
    logger.info('preprocessed {} recordings into {}'.format(len(processed), args.out))
    return 0


def cmd_pretrain(args):
    model_cfg, train_cfg, _ = load_settings(args.config)
    recordings, tracks = _load_recordings(args.data)
    os.makedirs(args.out, exist_ok=True)
    if args.rho_sweep:
        selected = [r for r in recordings if r.subject_id not in set(args.heldout or ())]
        return _rho_sweep(args, model_cfg, train_cfg, selected)
    checkpoints, hours = OrderedDict(), OrderedDict()
    for seed in args.seeds:
        cfg = dataclasses.replace(train_cfg, seed=seed)
        rng = Rng(seed)
        selected = [r for r in recordings if r.subject_id not in set(args.heldout or ())]
        if args.n_subjects:
            selected = dataio.select_subjects(selected, args.n_subjects, rng.fork('subjects'))
        checked = _checked(model_cfg, cfg, selected)
        windows = _windows(selected, cfg.window_s)
        labelled = None
        if args.semi_supervised:
            labelled = dataio.labelled_windows(selected, tracks, args.semi_supervised, cfg.window_s, checked.tau)
        model = CortexModel(checked.model, rng.fork('model'), subject_ids=sorted({r.subject_id for r in selected}),
                            dtype=cfg.dtype)
        record = pretrain(model, windows, cfg, rng.fork('pretrain'), labelled=labelled,
                          labelled_task=args.semi_supervised or 'speech')
        name = 'ckpt-{}.bin'.format(settings_hash(checked.model, cfg, seed=seed)[:16])
        save_model(os.path.join(args.out, name), model)
        record.write(_seed_dir(args.out, seed), 'pretrain')
        checkpoints['seed-{}'.format(seed)] = name
        hours['seed-{}'.format(seed)] = repr(record.pretrain_hours)
    _write_ini(os.path.join(args.out, MANIFEST_NAME), OrderedDict([
        ('manifest', OrderedDict([('version', __version__), ('config_hash', settings_hash(model_cfg, train_cfg))])),
        ('checkpoints', checkpoints),
        ('pretrain_hours', hours),
    ]))
    return 0


def _rho_sweep(args, model_cfg, train_cfg, recordings):
    """Pre-train the phase or amplitude task alone for each rho; t-test its test-split accuracy per rho."""
    task = args.rho_sweep
    accuracies, runs = OrderedDict(), []
    for seed in args.seeds:
        base = dataclasses.replace(train_cfg, seed=seed)
        checked = _checked(model_cfg, base, recordings)
        windows = _windows(recordings, base.window_s)
        test_windows = dataio.plan_splits(windows, base.split_ratios, base.seed).take(windows, 'test')
        for cfg in rho_sweep_configs(base, task, rhos=args.rhos or RHO_SWEEP):
            rho = getattr(cfg, 'rho_' + task)
            rng = Rng(seed).fork('rho-{!r}'.format(rho))
            model = CortexModel(checked.model, rng.fork('model'),
                                subject_ids=sorted({r.subject_id for r in recordings}), dtype=cfg.dtype)
            record = pretrain(model, windows, cfg, rng.fork('pretrain'))
            record.label = 'rho_{}={!r}'.format(task, rho)
            scores = pretext_accuracies(model, test_windows, cfg, Rng(seed).fork('rho-test'))
            accuracy = scores[task] if scores else None
            record.extras['test_accuracy_' + task] = accuracy
            record.write(_seed_dir(args.out, seed), 'rho-{}-{!r}'.format(task, rho))
            runs.append((rho, seed, accuracy))
            if accuracy is not None:
                accuracies.setdefault(rho, []).append(accuracy)

    with open(os.path.join(args.out, 'rho-sweep-{}-runs.csv'.format(task)), 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(('rho', 'seed', 'test_accuracy'))
        for rho, seed, accuracy in runs:
            writer.writerow([repr(rho), seed, '' if accuracy is None else repr(accuracy)])
    rows = []
    for rho, values in accuracies.items():
        label = 'rho_{}={!r}'.format(task, rho)
        try:
            rows.append((label, t_test_vs_chance(values, chance_level(task))))
        except NeuroSslError as e:
            logger.warning('{}: {}'.format(label, e))
    results_table_csv(rows, os.path.join(args.out, 'rho-sweep-{}.csv'.format(task)))
    logger.info('rho sweep for {} over {} run(s) written to {}'.format(task, len(runs), args.out))
    return 0


def _model_for(args, checked, cfg, recordings, seed):
    """Pre-trained model for this seed, or a randomly initialised one with --no-pretrain."""
    if args.no_pretrain:
        model = CortexModel(checked.model, Rng(seed).fork('model'),
                            subject_ids=sorted({r.subject_id for r in recordings}), dtype=cfg.dtype)
        return model, 0.0
    if not args.checkpoints:
        raise MissingFileError('--checkpoints is required unless --no-pretrain is given')
    path, hours = _checkpoint_for(args.checkpoints, seed)
    return load_model(path, Rng(seed).fork('model')), hours


def cmd_finetune(args):
    model_cfg, train_cfg, _ = load_settings(args.config)
    recordings, tracks = _load_recordings(args.data)
    os.makedirs(args.out, exist_ok=True)
    records = []
    label = args.mode if not args.no_pretrain else 'random-backbone-{}'.format(args.mode)
    for seed in args.seeds:
        cfg = dataclasses.replace(train_cfg, seed=seed)
        checked = _checked(model_cfg, cfg, recordings)
        labelled = dataio.labelled_windows(recordings, tracks, args.task, cfg.window_s, checked.tau)
        if args.mode.startswith('supervised-'):
            record = train_supervised_baseline(labelled, cfg, args.task, args.mode.split('-', 1)[1], checked.tau,
                                               rng=Rng(seed).fork('baseline'), hidden=checked.model.head_hidden)
        else:
            model, hours = _model_for(args, checked, cfg, recordings, seed)
            record = finetune(model, labelled, cfg, args.task, args.mode, rng=Rng(seed).fork('finetune'), label=label)
            record.pretrain_hours = hours
        record.label = label
        record.write(_seed_dir(args.out, seed), 'finetune-{}'.format(args.task))
        records.append(record)
    _summarise(records, 0.5, '{}/{}'.format(args.task, label), args.out)
    return 0


def cmd_evaluate(args):
    model_cfg, train_cfg, _ = load_settings(args.config)
    recordings, tracks = _load_recordings(args.data)
    os.makedirs(args.out, exist_ok=True)
    for seed in args.seeds:
        cfg = dataclasses.replace(train_cfg, seed=seed)
        checked = _checked(model_cfg, cfg, recordings)
        if args.zero_shot:
            heldout = set(args.heldout or ())
            if not heldout:
                raise SpecError('--zero-shot needs --heldout subject ids')
            train_recordings = [r for r in recordings if r.subject_id not in heldout]
            eval_recordings = [r for r in recordings if r.subject_id in heldout]
            model, _ = _model_for(args, checked, cfg, train_recordings, seed)
            check_leakage((), heldout, model)
            labelled = dataio.labelled_windows(train_recordings, tracks, args.task, cfg.window_s, checked.tau)
            plan = dataio.plan_splits(labelled, cfg.split_ratios, cfg.seed)
            finetune(model, labelled, cfg, args.task, args.mode, rng=Rng(seed).fork('finetune'))
            unseen = dataio.labelled_windows(eval_recordings, tracks, args.task, cfg.window_s, checked.tau)
            record = evaluate_zero_shot(model, plan.take(labelled, 'test') + unseen, heldout, args.task, cfg,
                                        training_items=plan.take(labelled, 'train'), rng=Rng(seed).fork('zero-shot'))
            record.write(_seed_dir(args.out, seed), 'zero-shot-{}'.format(args.task))
        else:
            model, _ = _model_for(args, checked, cfg, recordings, seed)
            accuracies = pretext_accuracies(model, _windows(recordings, cfg.window_s), cfg, Rng(seed).fork('evaluate'))
            with open(os.path.join(_seed_dir(args.out, seed), 'pretext.csv'), 'w', encoding='utf-8') as f:
                f.write('task,accuracy\n')
                for task, accuracy in accuracies.items():
                    f.write('{},{!r}\n'.format(task, accuracy))
    return 0


def _read_summary(path):
    values = {}
    with open(path, 'r', encoding='utf-8') as f:
        for line in f:
            if ':' in line:
                key, value = line.split(':', 1)
                values[key.strip()] = value.strip()
    missing = [key for key in SUMMARY_KEYS if key not in values]
    if missing:
        raise SpecError('{}: summary lacks {}'.format(path, ', '.join(missing)))
    return values


def cmd_report(args):
    """Tidy per-seed rows plus mean ± sem per (task, mode, label, pretrain_hours)."""
    paths = []
    for run_dir in args.runs:
        paths.extend(sorted(glob.glob(os.path.join(run_dir, '**', '*.summary.txt'), recursive=True)))
    if not paths:
        raise SpecError('no run summaries under {}'.format(', '.join(args.runs)))
    rows = []
    for path in paths:
        values = _read_summary(path)
        if values['kind'] == 'zero-shot' or not values['test_metric']:
            continue
        try:
            rows.append(OrderedDict([
                ('task', values.get('task', '') or 'pretext'),
                ('mode', values.get('mode', '') or values['kind']),
                ('label', values.get('label', '')),
                ('pretrain_hours', float(values['pretrain_hours'])),
                ('seed', int(values['seed'])),
                ('test_metric', float(values['test_metric'])),
            ]))
        except ValueError as e:
            raise SpecError('{}: {}'.format(path, e))
    if not rows:
        raise SpecError('no run summaries with a test metric under {}'.format(', '.join(args.runs)))
    rows.sort(key=lambda r: (r['task'], r['mode'], r['label'], r['pretrain_hours'], r['seed']))
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, 'runs.csv'), 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(REPORT_COLUMNS)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row.values()])

    groups = OrderedDict()
    for row in rows:
        groups.setdefault((row['task'], row['mode'], row['label'], row['pretrain_hours']), []).append(
            row['test_metric'])
    with open(os.path.join(args.out, 'series.csv'), 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(('task', 'mode', 'label', 'pretrain_hours', 'n', 'mean', 'sem'))
        for (task, mode, label, hours), metrics in groups.items():
            sem = float(np.std(metrics, ddof=1) / math.sqrt(len(metrics))) if len(metrics) > 1 else 0.0
            writer.writerow([task, mode, label, repr(hours), len(metrics), repr(float(np.mean(metrics))), repr(sem)])
    logger.info('report of {} runs in {} groups written to {}'.format(len(rows), len(groups), args.out))
    return 0


# ----------------------------------------------------------
#  Argument parsing
# ----------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(description='Self-supervised pretext training for multi-sensor recordings')
    parser.add_argument('--verbose', help='log debug messages', action='store_true')
    commands = parser.add_subparsers(dest='command')
    commands.required = True

    synth = commands.add_parser('synth', help='generate a synthetic dataset from a spec file')
    synth.add_argument('--spec', required=True, help='synthetic dataset spec (settings file)')
    synth.add_argument('--out', required=True, help='output dataset directory')
    synth.add_argument('--seed', type=int, help='override the spec seed')
    synth.set_defaults(handler=cmd_synth)

    prep = commands.add_parser('preprocess', help='filter, decimate and repair bad channels of a dataset')
    prep.add_argument('--data', required=True, help='input dataset directory')
    prep.add_argument('--out', required=True, help='output dataset directory')
    prep.add_argument('--config', help='settings file with preprocessing keys')
    prep.set_defaults(handler=cmd_preprocess)

    def add_run_arguments(sub):
        sub.add_argument('--config', required=True, help='settings file')
        sub.add_argument('--data', required=True, nargs='+', help='dataset directories')
        sub.add_argument('--out', required=True, help='output directory')
        sub.add_argument('--seeds', type=int, nargs='+', default=list(DEFAULT_SEEDS), help='seeds to run')

    pre = commands.add_parser('pretrain', help='self-supervised pre-training')
    add_run_arguments(pre)
    pre.add_argument('--n-subjects', type=int, help='pre-train on a random subset of this many subjects')
    pre.add_argument('--heldout', nargs='+', help='subject ids to leave out of pre-training')
    pre.add_argument('--semi-supervised', choices=('speech', 'voicing'),
                     help='add this task\'s labels as an extra loss')
    pre.add_argument('--rho-sweep', choices=('phase', 'amplitude'),
                     help='pre-train this task alone once per rho and t-test its accuracy against chance')
    pre.add_argument('--rhos', type=float, nargs='+', help='rho values of the sweep (default 0.1 to 0.5)')
    pre.set_defaults(handler=cmd_pretrain)

    for name, handler, help_text in (('finetune', cmd_finetune, 'fit a downstream classifier'),
                                     ('evaluate', cmd_evaluate, 'pretext or zero-shot subject evaluation')):
        sub = commands.add_parser(name, help=help_text)
        add_run_arguments(sub)
        sub.add_argument('--checkpoints', help='pre-training output directory')
        sub.add_argument('--task', choices=('speech', 'voicing'), default='speech')
        sub.add_argument('--no-pretrain', action='store_true', help='random backbone control')
        modes = ('shallow', 'deep', 'supervised-linear', 'supervised-mlp') if name == 'finetune' \
            else ('shallow', 'deep')
        sub.add_argument('--mode', choices=modes, default='shallow')
        if name == 'evaluate':
            sub.add_argument('--zero-shot', action='store_true', help='evaluate on held-out subjects')
            sub.add_argument('--heldout', nargs='+', help='held-out subject ids')
        sub.set_defaults(handler=handler)

    report = commands.add_parser('report', help='merge run summaries into tidy CSV series')
    report.add_argument('--runs', required=True, nargs='+', help='run output directories')
    report.add_argument('--out', required=True, help='report directory')
    report.set_defaults(handler=cmd_report)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    try:
        return args.handler(args)
    except NeuroSslError as e:
        logger.error('{}: {}'.format(type(e).__name__, e))
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
