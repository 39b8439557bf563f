"""Parameter files: magic, format version, JSON header, then f32 little-endian values.

The header echoes the architecture config and lists every entry as
(name, shape) in payload order.
"""
import hashlib
import json
import logging
import struct

import numpy as np

from ..core import FormatError, MissingFileError, ShapeError

logger = logging.getLogger(__name__)

MAGIC = b'NSSLCKPT'
FORMAT_VERSION = 1
_PREAMBLE = struct.Struct('<8sII')
_F32 = np.dtype('<f4')


def encode_checkpoint(named_arrays, architecture=None):
    entries = []
    chunks = []
    for name, values in named_arrays:
        values = np.asarray(values)
        entries.append({'name': name, 'shape': list(values.shape)})
        chunks.append(np.ascontiguousarray(values, dtype=_F32).tobytes())
    header = json.dumps({'version': FORMAT_VERSION, 'architecture': architecture or {}, 'entries': entries},
                        sort_keys=True).encode('utf-8')
    return _PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(header)) + header + b''.join(chunks)


def decode_checkpoint(blob):
    """Return (architecture dict, {name: float32 array}) from checkpoint bytes."""
    if len(blob) < _PREAMBLE.size:
        raise FormatError('checkpoint of {} bytes is shorter than its {}-byte preamble'.format(
            len(blob), _PREAMBLE.size))
    magic, version, header_len = _PREAMBLE.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError('not a checkpoint: bad magic at byte offset 0')
    if version != FORMAT_VERSION:
        raise FormatError('checkpoint format version {} is not supported (expected {})'.format(
            version, FORMAT_VERSION))
    offset = _PREAMBLE.size
    try:
        header = json.loads(blob[offset:offset + header_len].decode('utf-8'))
    except (UnicodeDecodeError, ValueError) as e:
        raise FormatError('unreadable checkpoint header at byte offset {}: {}'.format(offset, e))
    offset += header_len
    arrays = {}
    for entry in header['entries']:
        shape = tuple(entry['shape'])
        nbytes = int(np.prod(shape, dtype=np.int64)) * _F32.itemsize
        if offset + nbytes > len(blob):
            raise FormatError('entry {} needs {} bytes at byte offset {}, only {} remain'.format(
                entry['name'], nbytes, offset, len(blob) - offset))
        arrays[entry['name']] = np.frombuffer(blob, dtype=_F32, count=nbytes // _F32.itemsize,
                                              offset=offset).reshape(shape).astype(np.float32)
        offset += nbytes
    if offset != len(blob):
        raise FormatError('{} trailing bytes after the last entry at byte offset {}'.format(
            len(blob) - offset, offset))
    return header['architecture'], arrays


def save_checkpoint(path, module, architecture=None):
    blob = encode_checkpoint(((name, p.values) for name, p in module.named_parameters()), architecture)
    with open(path, 'wb') as f:
        f.write(blob)
    logger.info('wrote checkpoint {} ({} bytes)'.format(path, len(blob)))
    return blob


def read_checkpoint(path):
    try:
        with open(path, 'rb') as f:
            blob = f.read()
    except FileNotFoundError:
        raise MissingFileError('checkpoint {} does not exist'.format(path))
    return decode_checkpoint(blob)


def load_parameters(module, arrays, prefix='', strict=True):
    """Copy arrays into the module's parameters whose names start with prefix."""
    params = {name: p for name, p in module.named_parameters() if name.startswith(prefix)}
    if strict:
        missing = sorted(set(params) - set(arrays))
        if missing:
            raise ShapeError('checkpoint lacks parameters {}'.format(', '.join(missing)))
    loaded = 0
    for name, p in params.items():
        if name not in arrays:
            continue
        if arrays[name].shape != p.shape:
            raise ShapeError('parameter {} is {} in the checkpoint but {} in the model'.format(
                name, arrays[name].shape, p.shape))
        p.values = arrays[name].astype(p.dtype)
        loaded += 1
    logger.debug('loaded {} parameters under "{}"'.format(loaded, prefix))
    return loaded


def parameters_hash(module, prefix=''):
    """sha256 of the f32 bytes of every parameter under prefix, in name order."""
    digest = hashlib.sha256()
    for name, p in module.named_parameters():
        if name.startswith(prefix):
            digest.update(name.encode('utf-8'))
            digest.update(np.ascontiguousarray(p.values, dtype=_F32).tobytes())
    return digest.hexdigest()
