"""
The FFGA checkpoint container.

Layout, all integers little-endian::

    b'FFGA' | version: u32 | header length: u32 | header: UTF-8 JSON
    array count: u32
    per array: name length: u16 | name: UTF-8 | ndim: u8 | dims: u32 * ndim | data: float32 * prod(dims)

The JSON header describes the architecture, the allocations and anything the caller attaches as metadata.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Tuple, Union

import numpy as np

from ffgaf_snn.allocation import Allocation, AllocationStrategy
from ffgaf_snn.architecture import ArchDescriptor
from ffgaf_snn.blocks import BlockKind, Network, TrainingBlock
from ffgaf_snn.exceptions import CheckpointError
from ffgaf_snn.numerics import ConvParams, NormMode, NormParams
from ffgaf_snn.spiking import QuantActParams, SpikingLayer

__all__ = ['MAGIC', 'FORMAT_VERSION', 'Checkpoint', 'dumps', 'loads', 'save_checkpoint', 'load_checkpoint',
           'atomic_write']

MAGIC = b'FFGA'
FORMAT_VERSION = 1

_CONV_ARRAYS = ('kernels', 'bias', 'channel_weight')
_NORM_ARRAYS = ('gamma', 'beta', 'running_mean', 'running_var')


@dataclass
class Checkpoint:
    network: Network
    metadata: Dict[str, Any] = field(default_factory=dict)


def atomic_write(path: Union[str, os.PathLike], data: Union[bytes, str]):
    """
    Write a file through a temporary sibling and a rename, readers never see a partial file
    """
    path = Path(path)
    if isinstance(data, str):
        data = data.encode('utf-8')
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f'.{path.name}.', suffix='.tmp')
    try:
        with os.fdopen(fd, 'wb') as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def _header(net: Network, metadata: Dict[str, Any]) -> Dict[str, Any]:
    first = net.blocks[0]
    return {
        'descriptor': net.descriptor.to_dict() if net.descriptor else None,
        'classes': net.classes,
        'horizon': net.horizon,
        'aggregation_weights': list(net.aggregation_weights),
        'spiking': {'thresh': first.spiking.thresh, 'initial_charge_frac': first.spiking.initial_charge_frac},
        'quant': {'lam': first.quant.lam, 'levels': first.quant.levels, 'shift_phi': first.quant.shift_phi},
        'blocks': [{
            'kind': block.kind.name,
            'stride': block.conv.stride,
            'padding': block.conv.padding,
            'norm': {'mode': block.norm.mode.name, 'momentum': block.norm.momentum, 'epsilon': block.norm.epsilon},
            'allocation': {'channels_per_class': list(block.allocation.channels_per_class),
                           'strategy': block.allocation.strategy.name, 'phi': block.allocation.phi},
        } for block in net.blocks],
        'metadata': metadata,
    }


def _arrays(net: Network) -> List[Tuple[str, np.ndarray]]:
    ret = []
    for i, block in enumerate(net.blocks):
        ret.extend((f'block{i}.conv.{name}', getattr(block.conv, name)) for name in _CONV_ARRAYS)
        ret.extend((f'block{i}.norm.{name}', getattr(block.norm, name)) for name in _NORM_ARRAYS)
    return ret


def dumps(checkpoint: Checkpoint) -> bytes:
    header = json.dumps(_header(checkpoint.network, checkpoint.metadata), sort_keys=True,
                        separators=(',', ':')).encode('utf-8')
    parts = [MAGIC, struct.pack('<II', FORMAT_VERSION, len(header)), header]
    arrays = _arrays(checkpoint.network)
    parts.append(struct.pack('<I', len(arrays)))
    for name, array in arrays:
        encoded = name.encode('utf-8')
        parts.append(struct.pack(f'<H{len(encoded)}sB', len(encoded), encoded, array.ndim))
        parts.append(struct.pack(f'<{array.ndim}I', *array.shape))
        parts.append(np.ascontiguousarray(array, dtype='<f4').tobytes())
    return b''.join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, size: int) -> bytes:
        if self.pos + size > len(self.buf):
            raise CheckpointError('truncated checkpoint')
        ret = self.buf[self.pos:self.pos + size]
        self.pos += size
        return ret

    def unpack(self, fmt: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(buf: bytes, dtype=np.float32) -> Checkpoint:
    """
    :param dtype: the dtype to give the loaded parameters
    :raises CheckpointError: if buf is not a well-formed checkpoint of a supported version
    """
    reader = _Reader(buf)
    if reader.take(4) != MAGIC:
        raise CheckpointError('not an FFGA checkpoint (bad magic)')
    version, header_len = reader.unpack('<II')
    if version != FORMAT_VERSION:
        raise CheckpointError(f'unsupported checkpoint version {version}')
    try:
        header = json.loads(reader.take(header_len).decode('utf-8'))
    except ValueError as e:
        raise CheckpointError(f'malformed checkpoint header: {e}') from e

    arrays = {}
    count, = reader.unpack('<I')
    for _ in range(count):
        name_len, = reader.unpack('<H')
        name = reader.take(name_len).decode('utf-8')
        ndim, = reader.unpack('<B')
        shape = reader.unpack(f'<{ndim}I')
        size = int(np.prod(shape)) * 4
        arrays[name] = np.frombuffer(reader.take(size), dtype='<f4').reshape(shape).astype(dtype)
    if reader.pos != len(buf):
        raise CheckpointError(f'{len(buf) - reader.pos} trailing bytes after the last array')

    try:
        network = _network_from(header, arrays)
    except KeyError as e:
        raise CheckpointError(f'checkpoint is missing {e}') from e
    return Checkpoint(network, header.get('metadata', {}))


def _network_from(header: Dict[str, Any], arrays: Dict[str, np.ndarray]) -> Network:
    spiking = SpikingLayer(horizon=header['horizon'], **header['spiking'])
    quant = QuantActParams(**header['quant'])
    blocks = []
    for i, entry in enumerate(header['blocks']):
        conv = ConvParams(*(arrays[f'block{i}.conv.{name}'] for name in _CONV_ARRAYS), stride=entry['stride'],
                          padding=entry['padding'])
        norm_spec = entry['norm']
        norm = NormParams(*(arrays[f'block{i}.norm.{name}'] for name in _NORM_ARRAYS),
                          mode=NormMode[norm_spec['mode']], momentum=norm_spec['momentum'],
                          epsilon=norm_spec['epsilon'])
        alloc_spec = entry['allocation']
        allocation = Allocation(tuple(alloc_spec['channels_per_class']), conv.c_out,
                                AllocationStrategy[alloc_spec['strategy']], alloc_spec['phi'])
        blocks.append(TrainingBlock(conv, norm, allocation, BlockKind[entry['kind']], spiking, quant))
    descriptor = ArchDescriptor.from_dict(header['descriptor']) if header['descriptor'] else None
    return Network(blocks, header['classes'], header['horizon'], tuple(header['aggregation_weights']), descriptor)


def save_checkpoint(path: Union[str, os.PathLike], checkpoint: Checkpoint):
    atomic_write(path, dumps(checkpoint))


def load_checkpoint(path: Union[str, os.PathLike], dtype=np.float32) -> Checkpoint:
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f'cannot read checkpoint {path}: {e}') from e
    return loads(buf, dtype)
