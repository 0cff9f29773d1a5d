"""
Versioned binary checkpoint container.

Layout::

    b'DCOLAB\\x00\\x00'                    magic, 8 bytes
    uint64 little-endian                  header length
    JSON header (sorted keys, UTF-8)      format version, kind, metadata,
                                          array table, payload sha256
    payload                               arrays as float64 little-endian, row-major

The writer is deterministic, so identical inputs give identical files, and
arrays round-trip bit-exactly.
"""

import hashlib
import json
import logging
import struct
from pathlib import Path
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from .exceptions import CheckpointError
from .networks import EpsModel, ModelSpec

logger = logging.getLogger(__name__)

MAGIC = b'DCOLAB\x00\x00'
FORMAT_VERSION = 1


def save_container(path, kind: str, meta: Mapping, arrays: Mapping[str, np.ndarray]) -> str:
    """Write a container and return the payload checksum."""
    table, chunks, offset = [], [], 0
    for name, array in arrays.items():
        data = np.ascontiguousarray(array, dtype='<f8')
        raw = data.tobytes()
        table.append({'name': name, 'shape': list(data.shape), 'offset': offset, 'nbytes': len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b''.join(chunks)
    checksum = hashlib.sha256(payload).hexdigest()
    header = json.dumps(
        {
            'format_version': FORMAT_VERSION,
            'kind': kind,
            'meta': dict(meta),
            'arrays': table,
            'checksum': checksum,
        },
        sort_keys=True,
    ).encode('utf-8')

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open('wb') as handle:
        handle.write(MAGIC)
        handle.write(struct.pack('<Q', len(header)))
        handle.write(header)
        handle.write(payload)
    logger.debug("wrote %s container %s (%d arrays)", kind, path, len(table))
    return checksum


def load_container(path, kind: Optional[str] = None) -> Tuple[Dict, Dict[str, np.ndarray]]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a dcolab container")
    try:
        (header_len,) = struct.unpack('<Q', blob[8:16])
        header = json.loads(blob[16:16 + header_len].decode('utf-8'))
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: unreadable header") from exc
    if header.get('format_version') != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")
    if kind is not None and header.get('kind') != kind:
        raise CheckpointError(f"{path} holds a {header.get('kind')!r}, expected {kind!r}")

    payload = blob[16 + header_len:]
    if hashlib.sha256(payload).hexdigest() != header['checksum']:
        raise CheckpointError(f"{path}: payload checksum mismatch")
    arrays = {}
    for entry in header['arrays']:
        raw = payload[entry['offset']:entry['offset'] + entry['nbytes']]
        arrays[entry['name']] = np.frombuffer(raw, dtype='<f8').reshape(entry['shape']).astype(np.float64)
    meta = dict(header['meta'])
    meta['checksum'] = header['checksum']
    return meta, arrays


def save_model(model: EpsModel, path) -> str:
    spec = model.spec
    meta = {
        'schedule': model.schedule_name,
        'data_dim': spec.data_dim,
        'hidden': list(spec.hidden),
        'architecture': spec.architecture,
        'embed_dim': spec.embed_dim,
        'layer_shapes': [list(shape) for shape in spec.layer_shapes],
        'conditions': model.condition_names,
        'frozen': model.frozen,
        'model_checksum': model.checksum(),
    }
    arrays = {name: tensor.values for name, tensor in model.parameters()}
    return save_container(path, 'model', meta, arrays)


def load_model(path) -> EpsModel:
    meta, arrays = load_container(path, kind='model')
    spec = ModelSpec(
        data_dim=meta['data_dim'],
        hidden=tuple(meta['hidden']),
        architecture=meta['architecture'],
        embed_dim=meta['embed_dim'],
    )
    n_layers = len(spec.layer_shapes)
    try:
        model = EpsModel(
            spec,
            meta['conditions'],
            [arrays[f'layers.{i}.weight'] for i in range(n_layers)],
            [arrays[f'layers.{i}.bias'] for i in range(n_layers)],
            arrays['conditions'],
            frozen=meta['frozen'],
            schedule_name=meta['schedule'],
        )
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing array {exc}") from exc
    if model.checksum() != meta['model_checksum']:
        raise CheckpointError(f"{path}: model checksum mismatch")
    return model
