"""
Static parameter counting and an analytical energy model.

The encoding block sees analog pixels and pays a multiply-accumulate (MAC) per synapse. Hidden blocks see binary spikes,
so a synapse only accumulates (AC) when its input spiked. Memory traffic counts one read per operand fetch, one write
per output element and one read per parameter per inference.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from os import PathLike
from pathlib import Path
from typing import List, Sequence, Tuple, Union

from ffgaf_snn.architecture import ArchDescriptor
from ffgaf_snn.exceptions import ConfigError, DataError

__all__ = ['OpCounts', 'EnergyConstants', 'EnergyReport', 'count_params', 'count_aux_params', 'count_ops',
           'count_dense_ops', 'estimate_energy', 'format_table', 'report_csv', 'read_spike_rates',
           'write_spike_rates']

PICO = 1e-12


@dataclass(frozen=True)
class OpCounts:
    params: int = 0
    macs: int = 0
    acs: int = 0
    mem_reads: int = 0
    mem_writes: int = 0
    spike_rate_per_layer: Tuple[float, ...] = ()

    def __post_init__(self):
        if min(self.params, self.macs, self.acs, self.mem_reads, self.mem_writes) < 0:
            raise ConfigError('operation counts must not be negative')
        if any(not 0 <= r <= 1 for r in self.spike_rate_per_layer):
            raise ConfigError('spike rates must lie in [0, 1]')


@dataclass(frozen=True)
class EnergyConstants:
    """
    Per-operation energies in joules, defaults follow the common 45nm figures
    """
    e_mac: float = 4.6 * PICO
    e_ac: float = 0.9 * PICO
    e_mem_read: float = 10 * PICO
    e_mem_write: float = 10 * PICO
    label: str = '45nm'

    def __post_init__(self):
        if min(self.e_mac, self.e_ac, self.e_mem_read, self.e_mem_write) <= 0:
            raise ConfigError('energy constants must be positive')


@dataclass(frozen=True)
class EnergyReport:
    mem_mj: float
    compute_mj: float
    total_mj: float
    counts: OpCounts = field(default_factory=OpCounts)
    constants: EnergyConstants = field(default_factory=EnergyConstants)


def count_params(desc: ArchDescriptor) -> int:
    """
    :return: the number of kernel weights and biases, channel weights and normalization affines are not included
    """
    return sum(c_in * c_out * desc.kernel ** 2 + c_out for c_in, c_out in desc.channels())


def count_aux_params(desc: ArchDescriptor) -> int:
    """
    :return: the number of channel weights, normalization gammas and betas
    """
    return sum(3 * c_out for c_out in desc.arch)


def _layer_params(c_in: int, c_out: int, kernel: int) -> int:
    return c_in * c_out * kernel ** 2 + c_out


def count_ops(desc: ArchDescriptor, input_shape: Tuple[int, int, int], spike_rates: Sequence[float]) -> OpCounts:
    """
    Count the operations of one inference.
    :param input_shape: C×H×W of one image
    :param spike_rates: the spike rate of each spiking layer, layer i feeds block i + 1. Either one rate per block or
        one per hidden block.
    """
    c, h, w = input_shape
    if c != desc.c_in:
        raise ConfigError(f'input has {c} channels, the architecture expects {desc.c_in}')
    layers = desc.layers((h, w))
    hidden = len(layers) - 1
    if len(spike_rates) not in (hidden, len(layers)):
        raise ConfigError(f'expected {hidden} or {len(layers)} spike rates, got {len(spike_rates)}')
    rates = tuple(float(r) for r in spike_rates)

    macs = acs = reads = writes = 0
    for i, layer in enumerate(layers):
        outputs = layer.c_out * layer.out_hw[0] * layer.out_hw[1]
        synapses = layer.c_in * desc.kernel ** 2 * outputs
        reads += _layer_params(layer.c_in, layer.c_out, desc.kernel)
        if i == 0:
            macs += synapses
            reads += synapses
            writes += outputs
        else:
            events = round(rates[i - 1] * synapses * desc.horizon)
            acs += events
            reads += events
            writes += outputs * desc.horizon
    return OpCounts(count_params(desc), macs, acs, reads, writes, rates)


def count_dense_ops(desc: ArchDescriptor, input_shape: Tuple[int, int, int]) -> OpCounts:
    """
    Count the same architecture as a dense network evaluated once: every synapse is a MAC
    """
    c, h, w = input_shape
    if c != desc.c_in:
        raise ConfigError(f'input has {c} channels, the architecture expects {desc.c_in}')
    macs = reads = writes = 0
    for layer in desc.layers((h, w)):
        outputs = layer.c_out * layer.out_hw[0] * layer.out_hw[1]
        synapses = layer.c_in * desc.kernel ** 2 * outputs
        macs += synapses
        reads += synapses + _layer_params(layer.c_in, layer.c_out, desc.kernel)
        writes += outputs
    return OpCounts(count_params(desc), macs, 0, reads, writes)


def estimate_energy(counts: OpCounts, k: EnergyConstants = EnergyConstants()) -> EnergyReport:
    """
    :return: memory, compute and total energy in millijoules
    """
    mem = counts.mem_reads * k.e_mem_read + counts.mem_writes * k.e_mem_write
    compute = counts.macs * k.e_mac + counts.acs * k.e_ac
    return EnergyReport(mem * 1e3, compute * 1e3, (mem + compute) * 1e3, counts, k)


_REPORT_COLUMNS = ('model', 'params', 'macs', 'acs', 'mem_reads', 'mem_writes', 'mem_mJ', 'compute_mJ', 'total_mJ',
                   'e_mac', 'e_ac', 'e_mem_read', 'e_mem_write', 'constants')


def _report_row(name: str, r: EnergyReport) -> List[str]:
    c = r.counts
    k = r.constants
    return [name, str(c.params), str(c.macs), str(c.acs), str(c.mem_reads), str(c.mem_writes), f'{r.mem_mj:.6g}',
            f'{r.compute_mj:.6g}', f'{r.total_mj:.6g}', repr(k.e_mac), repr(k.e_ac), repr(k.e_mem_read),
            repr(k.e_mem_write), k.label]


def report_csv(reports: Sequence[Tuple[str, EnergyReport]]) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator='\n')
    writer.writerow(_REPORT_COLUMNS)
    for name, report in reports:
        writer.writerow(_report_row(name, report))
    return out.getvalue()


def format_table(reports: Sequence[Tuple[str, EnergyReport]]) -> str:
    """
    :return: the reports as a reStructuredText simple table
    """
    head = ('model', 'params', 'memory (mJ)', 'compute (mJ)', 'total (mJ)')
    rows = [(name, f'{r.counts.params:,}', f'{r.mem_mj:.4g}', f'{r.compute_mj:.4g}', f'{r.total_mj:.4g}')
            for name, r in reports]
    widths = [max(len(row[i]) for row in [head, *rows]) for i in range(len(head))]
    rule = ' '.join('=' * width for width in widths)
    lines = [rule, ' '.join(cell.ljust(width) for cell, width in zip(head, widths)), rule]
    lines.extend(' '.join(cell.ljust(width) for cell, width in zip(row, widths)) for row in rows)
    lines.append(rule)
    return '\n'.join(lines)


def read_spike_rates(path: Union[str, PathLike]) -> List[float]:
    """
    Read a ``layer,spike_rate`` CSV file, rows ordered by layer
    """
    try:
        with Path(path).open(newline='') as f:
            rows = list(csv.DictReader(f))
    except OSError as e:
        raise DataError(f'cannot read spike rates from {path}: {e}') from e
    try:
        rows.sort(key=lambda row: int(row['layer']))
        return [float(row['spike_rate']) for row in rows]
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f'{path} is not a layer,spike_rate CSV file') from e


def write_spike_rates(rates: Sequence[float]) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator='\n')
    writer.writerow(('layer', 'spike_rate'))
    for i, rate in enumerate(rates):
        writer.writerow((i, repr(float(rate))))
    return out.getvalue()
