from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Dict, List, Tuple

from ffgaf_snn.exceptions import ConfigError
from ffgaf_snn.numerics import output_extent

__all__ = ['ArchDescriptor', 'LayerShape']


@dataclass(frozen=True)
class LayerShape:
    c_in: int
    c_out: int
    stride: int
    in_hw: Tuple[int, int]
    out_hw: Tuple[int, int]


@dataclass(frozen=True)
class ArchDescriptor:
    """
    The static shape of a network: one convolution per block, the first block encodes images, the rest consume spikes
    """
    c_in: int
    arch: Tuple[int, ...]
    strides: Tuple[int, ...]
    kernel: int = 3
    padding: int = 1
    horizon: int = 10

    def __post_init__(self):
        if not self.arch:
            raise ConfigError('an architecture needs at least one block')
        if len(self.strides) != len(self.arch):
            raise ConfigError(f'{len(self.arch)} blocks need {len(self.arch)} strides, got {len(self.strides)}')
        if min(self.arch) < 1 or self.c_in < 1:
            raise ConfigError('channel counts must be positive')
        if min(self.strides) < 1 or self.kernel < 1 or self.horizon < 1 or self.padding < 0:
            raise ConfigError('strides, kernel and horizon must be positive, padding non-negative')

    def channels(self) -> List[Tuple[int, int]]:
        ins = (self.c_in,) + self.arch[:-1]
        return list(zip(ins, self.arch))

    def layers(self, in_hw: Tuple[int, int]) -> List[LayerShape]:
        """
        :param in_hw: the spatial extent of the input images
        :return: the shape of every block for that input
        """
        ret = []
        hw = in_hw
        for (c_in, c_out), stride in zip(self.channels(), self.strides):
            out_hw = tuple(output_extent(s, self.kernel, stride, self.padding) for s in hw)
            if min(out_hw) < 1:
                raise ConfigError(f'input of spatial size {hw} vanishes in a block with stride {stride}')
            ret.append(LayerShape(c_in, c_out, stride, hw, out_hw))
            hw = out_hw
        return ret

    def to_dict(self) -> Dict[str, Any]:
        return {'c_in': self.c_in, 'arch': list(self.arch), 'strides': list(self.strides), 'kernel': self.kernel,
                'padding': self.padding, 'horizon': self.horizon}

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> ArchDescriptor:
        return cls(c_in=d['c_in'], arch=tuple(d['arch']), strides=tuple(d['strides']), kernel=d['kernel'],
                   padding=d['padding'], horizon=d['horizon'])
