#!/usr/bin/env python3
"""
Network config files
JSON documents naming a family, depth, task and variant options, validated
into a NetworkConfig and turned into a NetworkGraph.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

from network_builder import (DEFAULT_SCHEDULE, FAMILIES, RESNET_BLOCKS, WIDTH_DIVISORS, ConfigError,
                             build_classification_net, build_pyconvresnet3d, build_pyconvsegnet,
                             build_pyconvssd)
from network_graph import NetworkGraph
from pyconv_layer import MAX_LEVELS

logger = logging.getLogger(__name__)

__all__ = ['ConfigError', 'NetworkConfig', 'load_network_config', 'parse_network_config', 'build_from_config']

TASKS = ('classification', 'segmentation', 'detection', 'video')
ALLOWED_KEYS = {'family', 'depth', 'level_schedule', 'task', 'num_classes', 'output_stride', 'input_shape', 'variant'}
VARIANT_KEYS = {'downsample', 'width_divisor'}

DEFAULT_CLASSES = {'classification': 1000, 'segmentation': 150, 'detection': 81, 'video': 400}
DEFAULT_INPUT_SHAPES = {
    'classification': (1, 3, 224, 224),
    'segmentation': (1, 3, 473, 473),
    'detection': (1, 3, 300, 300),
    'video': (1, 3, 16, 224, 224),
}


@dataclass(frozen=True)
class NetworkConfig:
    family: str
    depth: int
    task: str = 'classification'
    level_schedule: Tuple[int, ...] = DEFAULT_SCHEDULE
    num_classes: Optional[int] = None
    output_stride: Optional[int] = None
    input_shape: Optional[Tuple[int, ...]] = None
    downsample: Optional[str] = None
    width_divisor: int = 1

    @property
    def classes(self) -> int:
        return self.num_classes if self.num_classes is not None else DEFAULT_CLASSES[self.task]

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.input_shape if self.input_shape is not None else DEFAULT_INPUT_SHAPES[self.task]

    def with_toy_scale(self, width_divisor: int) -> 'NetworkConfig':
        """Same network at reduced width, for gradient checks and toy training"""
        return NetworkConfig(self.family, self.depth, self.task, self.level_schedule, self.num_classes,
                             self.output_stride, self.input_shape, self.downsample, width_divisor)


def _expect(value, kinds, key: str):
    if isinstance(value, bool) or not isinstance(value, kinds):
        raise ConfigError(f"'{key}' has the wrong type: {value!r}")
    return value


def _int_list(value, key: str) -> Tuple[int, ...]:
    _expect(value, list, key)
    return tuple(_expect(v, int, key) for v in value)


def parse_network_config(doc: Dict[str, Any]) -> NetworkConfig:
    """Validate a decoded JSON document; unknown keys and values are rejected"""
    if not isinstance(doc, dict):
        raise ConfigError("network config must be a JSON object")
    unknown = set(doc) - ALLOWED_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for key in ('family', 'depth'):
        if key not in doc:
            raise ConfigError(f"missing required key '{key}'")

    family = _expect(doc['family'], str, 'family')
    if family not in FAMILIES:
        raise ConfigError(f"unknown family '{family}', expected one of {list(FAMILIES)}")
    depth = _expect(doc['depth'], int, 'depth')
    if depth not in RESNET_BLOCKS:
        raise ConfigError(f"unsupported depth {depth}, expected one of {sorted(RESNET_BLOCKS)}")
    task = _expect(doc.get('task', 'classification'), str, 'task')
    if task not in TASKS:
        raise ConfigError(f"unknown task '{task}', expected one of {list(TASKS)}")

    schedule = DEFAULT_SCHEDULE
    if doc.get('level_schedule') is not None:
        schedule = _int_list(doc['level_schedule'], 'level_schedule')
        if len(schedule) != 4 or any(not 1 <= n <= MAX_LEVELS for n in schedule):
            raise ConfigError(f"level_schedule must be four counts in 1..{MAX_LEVELS}, got {list(schedule)}")

    num_classes = doc.get('num_classes')
    if num_classes is not None and _expect(num_classes, int, 'num_classes') < 1:
        raise ConfigError("num_classes must be positive")

    output_stride = doc.get('output_stride')
    if output_stride is not None:
        if task != 'segmentation':
            raise ConfigError("output_stride only applies to the segmentation task")
        if _expect(output_stride, int, 'output_stride') not in (8, 16):
            raise ConfigError(f"output_stride must be 8 or 16, got {output_stride}")
    elif task == 'segmentation':
        output_stride = 8

    input_shape = None
    if doc.get('input_shape') is not None:
        input_shape = _int_list(doc['input_shape'], 'input_shape')
        rank = 5 if task == 'video' else 4
        if len(input_shape) != rank or min(input_shape) < 1:
            raise ConfigError(f"input_shape for {task} must be {rank} positive extents, got {list(input_shape)}")

    variant = _expect(doc.get('variant', {}), dict, 'variant')
    unknown = set(variant) - VARIANT_KEYS
    if unknown:
        raise ConfigError(f"unknown variant keys: {sorted(unknown)}")
    downsample = variant.get('downsample')
    if downsample is not None and downsample not in ('stem', 'shortcut'):
        raise ConfigError(f"variant.downsample must be 'stem' or 'shortcut', got {downsample!r}")
    if downsample is not None and task != 'classification':
        raise ConfigError("variant.downsample only applies to classification networks")
    width_divisor = _expect(variant.get('width_divisor', 1), int, 'variant.width_divisor')
    if width_divisor not in WIDTH_DIVISORS:
        raise ConfigError(f"variant.width_divisor must be one of {list(WIDTH_DIVISORS)}, got {width_divisor}")

    return NetworkConfig(family, depth, task, schedule, num_classes, output_stride, input_shape,
                         downsample, width_divisor)


def load_network_config(path: Union[str, Path]) -> NetworkConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}")
    config = parse_network_config(doc)
    logger.debug(f"Loaded config {config}")
    return config


def build_from_config(config: NetworkConfig) -> NetworkGraph:
    if config.task == 'classification':
        net = build_classification_net(config.family, config.depth, config.level_schedule, config.classes,
                                       config.width_divisor, config.downsample)
    elif config.task == 'segmentation':
        net = build_pyconvsegnet(config.depth, config.classes, config.output_stride, config.family,
                                 config.width_divisor, config.level_schedule)
    elif config.task == 'detection':
        net = build_pyconvssd(config.depth, config.classes, config.family, config.width_divisor)
    else:
        net = build_pyconvresnet3d(config.depth, config.classes, config.family, config.width_divisor,
                                   config.level_schedule)
    return net
