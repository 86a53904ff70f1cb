# -*- coding: utf-8 -*-
""""""
"""
Binary parameter checkpoints with a YAML sidecar manifest.

Layout, all integers unsigned 32 bit little endian:

    magic 'T2VF' | version | array count
    per array: name length | utf-8 name | ndim | ndim extents | float64 LE values
    SHA-256 digest of everything above (32 bytes)

The sidecar '<checkpoint>.yml' records the model configuration, seed,
variant, member tickers, the preprocessing settings and the fitted
normalization bounds.
"""
import hashlib
import logging

import bitstring
import numpy as np
import yaml

from core.errors import CheckpointError, ConfigError
from core.model import ModelConfig, ParameterSet
from modules.setup_logger import logger


logger = logging.getLogger(__name__)

MAGIC = b'T2VF'
VERSION = 1
DIGEST_BYTES = 32

# pipeline settings a checkpoint is only valid for; inversion is chosen at predict time
PIPELINE_FIELDS = ('ma_window', 'use_adj_close', 'split', 'fit_bounds_on')


def encode_arrays(arrays: dict) -> bytes:
    """Serialize named float64 arrays, digest footer included"""
    body = bitstring.pack('bytes:4, uintle:32, uintle:32', MAGIC, VERSION, len(arrays)).tobytes()
    chunks = [body]
    for name, value in arrays.items():
        value = np.asarray(value, dtype='<f8')
        encoded = name.encode('utf-8')
        chunks.append(bitstring.pack(f'uintle:32, bytes:{len(encoded)}, uintle:32',
                                     len(encoded), encoded, value.ndim).tobytes())
        for extent in value.shape:
            chunks.append(bitstring.pack('uintle:32', extent).tobytes())
        chunks.append(value.tobytes(order='C'))
    payload = b''.join(chunks)
    return payload + hashlib.sha256(payload).digest()


def decode_arrays(data: bytes) -> dict:
    """
    Parse a checkpoint image

    :raises CheckpointError: Truncated data, digest mismatch or bad header
    """
    if len(data) < DIGEST_BYTES + 12:
        raise CheckpointError(f"Checkpoint truncated: {len(data)} bytes")
    payload, digest = data[:-DIGEST_BYTES], data[-DIGEST_BYTES:]
    if hashlib.sha256(payload).digest() != digest:
        raise CheckpointError("Checkpoint integrity check failed (truncated or modified file)")

    stream = bitstring.ConstBitStream(bytes=payload)
    try:
        magic, version, count = stream.readlist('bytes:4, uintle:32, uintle:32')
        if magic != MAGIC:
            raise CheckpointError(f"Not a checkpoint file (magic {magic!r})")
        if version != VERSION:
            raise CheckpointError(f"Unsupported checkpoint version {version}")
        arrays = {}
        for _ in range(count):
            length = stream.read('uintle:32')
            name = stream.read(f'bytes:{length}').decode('utf-8')
            ndim = stream.read('uintle:32')
            shape = tuple(stream.read('uintle:32') for _ in range(ndim))
            size = int(np.prod(shape, dtype=np.int64))
            raw = stream.read(f'bytes:{size * 8}')
            arrays[name] = np.frombuffer(raw, dtype='<f8').reshape(shape).astype(np.float64)
    except (bitstring.ReadError, UnicodeDecodeError, ValueError) as exc:
        raise CheckpointError(f"Malformed checkpoint: {exc}")
    if stream.pos != stream.len:
        raise CheckpointError("Trailing bytes after the last array")
    return arrays


def manifest_path(path: str) -> str:
    return f"{path}.yml"


def save_checkpoint(path: str, params: ParameterSet, manifest: dict) -> str:
    """
    Write parameters and the sidecar manifest

    :returns: SHA-256 hex digest of the checkpoint file
    """
    data = encode_arrays(params.numpy())
    with open(path, 'wb') as f:
        f.write(data)
    with open(manifest_path(path), 'w', encoding='utf-8') as f:
        yaml.safe_dump(manifest, f, sort_keys=False)
    logger.info("Saved %d arrays (%d parameters) to %s", len(params), params.count(), path)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path: str) -> tuple:
    """
    Read parameters and manifest

    :returns: (ParameterSet, manifest dict)
    """
    with open(path, 'rb') as f:
        arrays = decode_arrays(f.read())
    try:
        with open(manifest_path(path), 'r', encoding='utf-8') as f:
            manifest = yaml.safe_load(f)
    except FileNotFoundError:
        raise CheckpointError(f"Checkpoint manifest {manifest_path(path)} is missing")
    except yaml.YAMLError as exc:
        logger.error(exc)
        raise CheckpointError(f"Checkpoint manifest {manifest_path(path)} is not valid YAML")
    if not isinstance(manifest, dict) or 'model' not in manifest:
        raise CheckpointError(f"Checkpoint manifest {manifest_path(path)} lacks the model section")
    logger.info("Loaded %d arrays from %s", len(arrays), path)
    return ParameterSet(arrays), manifest


def pipeline_document(pipeline) -> dict:
    """Manifest form of the preprocessing settings"""
    doc = {}
    for name in PIPELINE_FIELDS:
        value = getattr(pipeline, name)
        doc[name] = [float(v) for v in value] if name == 'split' else value
    return doc


def check_compatible(manifest: dict, config: ModelConfig, params: ParameterSet, members: list,
                     pipeline=None) -> None:
    """Raise ConfigError when a checkpoint does not belong to this run configuration"""
    stored = manifest['model']
    current = config.to_dict()
    differing = sorted(k for k in set(stored) | set(current) if stored.get(k) != current.get(k))
    if differing:
        raise ConfigError(f"Checkpoint model configuration differs in {differing}")
    if list(manifest.get('tickers', [])) != list(members):
        raise ConfigError(f"Checkpoint was trained on {manifest.get('tickers')}, run configures {members}")
    if pipeline is not None:
        stored = manifest.get('preprocessing')
        if not isinstance(stored, dict):
            raise ConfigError("Checkpoint manifest does not record its preprocessing settings")
        current = pipeline_document(pipeline)
        differing = [f"{k} ({stored.get(k)!r} != {current[k]!r})" for k in PIPELINE_FIELDS
                     if stored.get(k) != current[k]]
        if differing:
            raise ConfigError(f"Checkpoint preprocessing differs in {', '.join(differing)}")
    try:
        params.check_against(config)
    except ValueError as exc:
        raise ConfigError(f"Checkpoint arrays do not fit the model: {exc}")
