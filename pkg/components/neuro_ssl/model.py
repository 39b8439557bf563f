"""Batch standardisation, the cortex encoder and its heads.

Parameter names are rooted at `encoder.`, `subjects.` and `film.` for the
backbone, `projector.` and `pretext.` for pre-training, and `heads.` for the
downstream classifiers.
"""
import dataclasses
import hashlib
import logging
import math

import numpy as np

from . import autodiff as ad
from .core import DuplicateError, ModelConfig, ShapeError, UnknownDatasetError
from .pretext import NUM_CLASSES, TASKS

logger = logging.getLogger(__name__)

BACKBONE_PREFIXES = ('encoder.', 'subjects.', 'film.')
DOWNSTREAM_TASKS = ('speech', 'voicing')
STANDARDISE_EPS = 1e-8


# ----------------------------------------------------------
#  Normalisation
# ----------------------------------------------------------

def standardize_array(data):
    """Per-sensor z-scoring of a (B x S x t) array with statistics over batch and time."""
    data = np.asarray(data)
    mu = data.mean(axis=(0, 2), keepdims=True)
    sigma = data.std(axis=(0, 2), keepdims=True)
    return (data - mu) / (sigma + STANDARDISE_EPS)


def standardize_batch(batch):
    if not batch:
        return []
    first = batch[0]
    for window in batch:
        if window.data.shape != first.data.shape or window.dataset_id != first.dataset_id:
            raise ShapeError('windows in a batch must share shape and dataset, got {} ({}) and {} ({})'.format(
                first.data.shape, first.dataset_id, window.data.shape, window.dataset_id))
    standardised = standardize_array(np.stack([w.data for w in batch]))
    return [w.with_data(standardised[i], standardised=True) for i, w in enumerate(batch)]


# ----------------------------------------------------------
#  Backbone
# ----------------------------------------------------------

class ResidualUnit(ad.Module):
    def __init__(self, rng, channels, dtype):
        self.first = ad.Conv1d(rng.fork('first'), channels, channels, 3, padding=1, dtype=dtype)
        self.second = ad.Conv1d(rng.fork('second'), channels, channels, 3, padding=1, dtype=dtype)

    def __call__(self, x):
        return x + self.second(ad.elu(self.first(ad.elu(x))))


class DownsamplingStage(ad.Module):
    """Residual unit then a strided conv with kernel 2*ratio; ratio 1 uses a 1-tap conv."""

    def __init__(self, rng, c_in, c_out, ratio, dtype):
        self.residual = ResidualUnit(rng.fork('residual'), c_in, dtype)
        if ratio == 1:
            self.downsample = ad.Conv1d(rng.fork('downsample'), c_in, c_out, 1, dtype=dtype)
        else:
            self.downsample = ad.Conv1d(rng.fork('downsample'), c_in, c_out, 2 * ratio, stride=ratio,
                                        padding=int(math.ceil(ratio / 2.0)), dtype=dtype)

    def __call__(self, x):
        return self.downsample(ad.elu(self.residual(x)))


class CortexEncoder(ad.Module):
    def __init__(self, cfg, rng, dtype=np.float32):
        self._rng = rng
        self._dtype = dtype
        self._d_shared = cfg.d_shared
        self.projections = {}
        self.new_datasets = set()
        for dataset_id, n_sensors in sorted(cfg.dataset_sensor_counts.items()):
            self.projections[dataset_id] = self._make_projection(dataset_id, n_sensors)
        channels = tuple(cfg.conv_channels)
        self.input_conv = ad.Conv1d(rng.fork('input'), cfg.d_shared, channels[0], cfg.input_kernel,
                                    padding=cfg.input_kernel // 2, dtype=dtype)
        self.stages = {}
        for i, ratio in enumerate(cfg.downsampling_ratios):
            self.stages['{:02d}'.format(i)] = DownsamplingStage(rng.fork('stage-{}'.format(i)), channels[i],
                                                                channels[i + 1], ratio, dtype)
        self.bottleneck_channels = channels[-1]
        extra = cfg.conditioning_dim if cfg.conditioning_mode == 'embedding' else 0
        self.output_conv = ad.Conv1d(rng.fork('output'), channels[-1] + extra, cfg.d_backbone, cfg.output_kernel,
                                     padding=cfg.output_kernel // 2, dtype=dtype)

    def _make_projection(self, dataset_id, n_sensors):
        return ad.Linear(self._rng.fork('projection').fork(dataset_id), n_sensors, self._d_shared, self._dtype)

    def register_dataset(self, dataset_id, n_sensors):
        if dataset_id in self.projections:
            raise DuplicateError('dataset {} is already registered'.format(dataset_id))
        self.projections[dataset_id] = self._make_projection(dataset_id, n_sensors)
        self.new_datasets.add(dataset_id)
        logger.info('registered dataset {} with {} sensors'.format(dataset_id, n_sensors))
        return self.projections[dataset_id]

    def project(self, x, dataset_id):
        if dataset_id not in self.projections:
            raise UnknownDatasetError('dataset {} has no input projection; register it first'.format(dataset_id))
        projection = self.projections[dataset_id]
        if x.shape[1] != projection.d_in:
            raise ShapeError('dataset {} expects {} sensors, got {}'.format(dataset_id, projection.d_in, x.shape[1]))
        return ad.transpose(projection(ad.transpose(x, (0, 2, 1))), (0, 2, 1))

    def to_bottleneck(self, x, dataset_id):
        h = self.input_conv(self.project(x, dataset_id))
        for key in sorted(self.stages):
            h = self.stages[key](h)
        return h

    def from_bottleneck(self, h):
        return self.output_conv(ad.elu(h))


class SubjectTable(ad.Module):
    """Learned embeddings for the subjects known at construction; others get a fixed random vector."""

    def __init__(self, rng, subject_ids, dim, dtype=np.float32):
        self.subject_ids = tuple(sorted(set(subject_ids)))
        self._index = {s: i for i, s in enumerate(self.subject_ids)}
        self._unseen_rng = rng.fork('unseen')
        self._dim = dim
        self._dtype = dtype
        self.embedding = ad.Embedding(rng.fork('table'), max(1, len(self.subject_ids)), dim, dtype)

    def is_known(self, subject_id):
        return subject_id in self._index

    def unseen_vector(self, subject_id):
        return (self._unseen_rng.fork(subject_id).normal(size=self._dim) / np.sqrt(self._dim)).astype(self._dtype)

    def __call__(self, subject_ids):
        subject_ids = list(subject_ids)
        if all(self.is_known(s) for s in subject_ids):
            return self.embedding([self._index[s] for s in subject_ids])
        rows = []
        for s in subject_ids:
            if self.is_known(s):
                rows.append(self.embedding([self._index[s]]))
            else:
                logger.debug('subject {} is unseen, using a random embedding'.format(s))
                rows.append(ad.Tensor(self.unseen_vector(s)[None]))
        return ad.concatenate(rows, axis=0)


class FilmGenerator(ad.Module):
    """Maps a subject embedding to per-channel (gamma, beta); starts as the identity modulation."""

    def __init__(self, rng, dim, channels, dtype=np.float32):
        self.gamma = ad.Linear(rng.fork('gamma'), dim, channels, dtype)
        self.beta = ad.Linear(rng.fork('beta'), dim, channels, dtype)
        for layer in (self.gamma, self.beta):
            layer.weight.values = np.zeros_like(layer.weight.values)
        self.gamma.bias.values = np.ones_like(self.gamma.bias.values)

    def __call__(self, h, embedding):
        return ad.film(h, self.gamma(embedding), self.beta(embedding))


# ----------------------------------------------------------
#  Heads
# ----------------------------------------------------------

class SpeechHead(ad.Module):
    """One MLP shared by every embedding position."""

    def __init__(self, rng, d_backbone, hidden, dtype=np.float32):
        self.mlp = ad.Mlp(rng, d_backbone, hidden, 2, dtype)

    def __call__(self, h):
        return self.mlp(ad.transpose(h, (0, 2, 1)))


class VoicingHead(ad.Module):
    def __init__(self, rng, d_backbone, tau, hidden, dtype=np.float32):
        self.tau = tau
        self.mlp = ad.Mlp(rng, d_backbone * tau, hidden, 2, dtype)

    def __call__(self, h):
        if h.shape[2] != self.tau:
            raise ShapeError('voicing head was built for {} embeddings, got {}'.format(self.tau, h.shape[2]))
        return self.mlp(ad.reshape(h, (h.shape[0], h.shape[1] * h.shape[2])))


class CortexModel(ad.Module):
    """Encoder, optional subject conditioning, projector and pretext heads; downstream heads are attached."""

    def __init__(self, cfg: ModelConfig, rng, subject_ids=(), dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        self._rng = rng
        self.encoder = CortexEncoder(cfg, rng.fork('encoder'), dtype)
        self.subjects = None
        self.film = None
        if cfg.conditioning_mode != 'none':
            self.subjects = SubjectTable(rng.fork('subjects'), subject_ids, cfg.conditioning_dim, dtype)
        if cfg.conditioning_mode == 'film':
            self.film = FilmGenerator(rng.fork('film'), cfg.conditioning_dim, self.encoder.bottleneck_channels,
                                      dtype)
        self.projector = ad.Mlp(rng.fork('projector'), cfg.d_backbone, cfg.projector_hidden, cfg.d_backbone, dtype)
        self.pretext = {task: ad.Linear(rng.fork('pretext').fork(task), cfg.d_backbone, NUM_CLASSES[task], dtype)
                        for task in TASKS}
        self.heads = {}
        # every subject whose windows updated the weights, conditioned or not
        self.trained_subjects = frozenset()

    def __repr__(self):
        return '<CortexModel datasets={} conditioning={} params={}>'.format(
            sorted(self.encoder.projections), self.cfg.conditioning_mode, self.n_parameters())

    # parameters

    def backbone_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if n.startswith(BACKBONE_PREFIXES)]

    def new_projection_parameters(self):
        return [(n, p) for n, p in self.named_parameters()
                if any(n.startswith('encoder.projections.{}.'.format(d)) for d in self.encoder.new_datasets)]

    def backbone_hash(self):
        """Hash of the backbone excluding projections registered after construction."""
        frozen_names = {n for n, _ in self.new_projection_parameters()}
        digest = hashlib.sha256()
        for name, p in self.backbone_parameters():
            if name in frozen_names:
                continue
            digest.update(name.encode('utf-8'))
            digest.update(np.ascontiguousarray(p.values, dtype='<f4').tobytes())
        return digest.hexdigest()

    def set_finetune_mode(self, mode):
        """shallow: everything but the heads and new projections frozen; deep: all trainable."""
        self.unfreeze()
        if mode == 'shallow':
            for _, p in self.named_parameters():
                p.frozen = True
            for _, p in self.new_projection_parameters():
                p.frozen = False
            for head in self.heads.values():
                head.unfreeze()
        elif mode != 'deep':
            raise ValueError('unknown fine-tuning mode {}'.format(mode))

    def architecture(self):
        arch = dataclasses.asdict(self.cfg)
        arch['dataset_sensor_counts'] = {d: p.d_in for d, p in sorted(self.encoder.projections.items())}
        arch['subjects'] = list(self.subjects.subject_ids) if self.subjects else []
        arch['trained_subjects'] = sorted(self.trained_subjects)
        arch['dtype'] = np.dtype(self.dtype).name
        return arch

    # structure

    def register_dataset(self, dataset_id, n_sensors):
        self.encoder.register_dataset(dataset_id, n_sensors)
        return self

    def attach_head(self, task, tau, rng=None):
        rng = rng or self._rng.fork('heads')
        if task == 'speech':
            head = SpeechHead(rng.fork('speech'), self.cfg.d_backbone, self.cfg.head_hidden, self.dtype)
        elif task == 'voicing':
            head = VoicingHead(rng.fork('voicing'), self.cfg.d_backbone, tau, self.cfg.head_hidden, self.dtype)
        else:
            raise ValueError('unknown downstream task {}'.format(task))
        self.heads[task] = head
        return head

    # forward passes

    def forward_backbone(self, x, dataset_id, subject_ids=None):
        """(B x S x t) standardised input to (B x d_backbone x tau) embeddings."""
        x = ad.as_tensor(x, self.dtype)
        if x.ndim != 3:
            raise ShapeError('backbone input must be B x S x t, got {}'.format(x.shape))
        h = self.encoder.to_bottleneck(x, dataset_id)
        if self.subjects is not None:
            if subject_ids is None or len(subject_ids) != x.shape[0]:
                raise ShapeError('subject conditioning needs one subject id per window')
            embedding = self.subjects(subject_ids)
            if self.film is not None:
                h = self.film(h, embedding)
            else:
                expanded = ad.broadcast_to(ad.reshape(embedding, embedding.shape + (1,)),
                                           (h.shape[0], embedding.shape[1], h.shape[2]))
                h = ad.concatenate([h, expanded], axis=1)
        return self.encoder.from_bottleneck(h)

    def forward_pretext(self, backbone_out):
        pooled = ad.mean(backbone_out, axis=2)
        projected = self.projector(pooled)
        return {task: self.pretext[task](projected) for task in TASKS}

    def forward_speech(self, backbone_out):
        return self.heads['speech'](backbone_out)

    def forward_voicing(self, backbone_out):
        return self.heads['voicing'](backbone_out)

    def forward_task(self, backbone_out, task):
        if task not in self.heads:
            raise ShapeError('no {} head attached'.format(task))
        return self.heads[task](backbone_out)


def register_dataset(model, dataset_id, n_sensors):
    return model.register_dataset(dataset_id, n_sensors)


def model_config_from_architecture(arch):
    fields = {f.name for f in dataclasses.fields(ModelConfig)}
    values = {k: v for k, v in arch.items() if k in fields}
    for key in ('conv_channels', 'downsampling_ratios'):
        values[key] = tuple(values[key])
    return ModelConfig(**values)


def load_model(path, rng):
    """Rebuild a CortexModel from a checkpoint header and load its parameters."""
    arch, arrays = ad.read_checkpoint(path)
    cfg = model_config_from_architecture(arch)
    model = CortexModel(cfg, rng, subject_ids=arch.get('subjects', ()), dtype=np.dtype(arch.get('dtype', 'float32')))
    ad.load_parameters(model, arrays, prefix='', strict=True)
    model.trained_subjects = frozenset(arch.get('trained_subjects', ()))
    return model


def save_model(path, model):
    return ad.save_checkpoint(path, model, model.architecture())


# ----------------------------------------------------------
#  Supervised baselines
# ----------------------------------------------------------

class RawClassifier(ad.Module):
    """Linear or two-layer classifier on standardised raw windows, without an encoder.

    For speech the window is cut into tau blocks and each block is classified.
    """

    def __init__(self, rng, kind, task, n_sensors, window_samples, tau, hidden=512, dtype=np.float32):
        if kind not in ('linear', 'mlp'):
            raise ValueError('unknown baseline kind {}'.format(kind))
        self.kind = kind
        self.task = task
        self.tau = tau
        d_in = n_sensors * window_samples // tau if task == 'speech' else n_sensors * window_samples
        if kind == 'linear':
            self.classifier = ad.Linear(rng.fork('linear'), d_in, 2, dtype)
        else:
            self.classifier = ad.Mlp(rng.fork('mlp'), d_in, hidden, 2, dtype)
        self.dtype = dtype

    def __call__(self, x):
        x = ad.as_tensor(x, self.dtype)
        batch, sensors, samples = x.shape
        if self.task == 'speech':
            block = samples // self.tau
            blocks = ad.transpose(ad.reshape(x, (batch, sensors, self.tau, block)), (0, 2, 1, 3))
            return self.classifier(ad.reshape(blocks, (batch, self.tau, sensors * block)))
        return self.classifier(ad.reshape(x, (batch, sensors * samples)))
