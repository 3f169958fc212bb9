#!/usr/bin/env python3
"""
Static parameter and FLOP accounting over a NetworkGraph
One multiply-accumulate counts as one FLOP for conv/linear layers; batch
norm, ReLU, pooling, upsampling and residual adds count one op per output
element; concat and dropout are free.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import pandas as pd

from expected_costs import ExpectedCost
from network_graph import LayerNode, NetworkGraph
from pyconv_layer import pyconv_cost, pyconv_params
from tensor_utils import ShapeError

logger = logging.getLogger(__name__)

FLOP_CONVENTION = "mac=1;elementwise=1"
ELEMENTWISE_KINDS = ('bn', 'relu', 'maxpool', 'adaptive-avgpool', 'global-avgpool', 'bilinear-upsample', 'add')
FREE_KINDS = ('concat', 'dropout')
MODEL_KEYS = ('task', 'family', 'depth', 'level_schedule', 'downsample', 'output_stride', 'width_divisor')


def node_params(node: LayerNode) -> int:
    """Learnable scalars implied by the node spec (BN running stats excluded)"""
    if node.kind == 'conv':
        spec = node.spec
        bias = spec.out_channels if len(node.params) > 1 else 0
        return math.prod(spec.weight_shape) + bias
    if node.kind == 'pyconv':
        return pyconv_params(node.spec)
    if node.kind == 'bn':
        return 2 * node.spec
    if node.kind == 'linear':
        return node.spec.in_features * node.spec.out_features + node.spec.out_features
    return 0


def node_flops(node: LayerNode, out_shape: Sequence[int]) -> int:
    batch, out_spatial = out_shape[0], out_shape[2:]
    if node.kind == 'conv':
        return batch * math.prod(node.spec.weight_shape) * math.prod(out_spatial)
    if node.kind == 'pyconv':
        return batch * pyconv_cost(node.spec, out_spatial)[1]
    if node.kind == 'linear':
        return batch * node.spec.in_features * node.spec.out_features
    if node.kind in ELEMENTWISE_KINDS:
        return math.prod(out_shape)
    if node.kind in FREE_KINDS:
        return 0
    raise ShapeError(f"no FLOP rule for node kind '{node.kind}'")


def count_params(net: NetworkGraph) -> Tuple[Dict[str, int], int]:
    per_node = {node.id: node_params(node) for node in net.nodes}
    return per_node, sum(per_node.values())


def count_flops(net: NetworkGraph, input_shape: Sequence[int]) -> Tuple[Dict[str, int], int]:
    shapes = net.infer_shapes(input_shape)
    per_node = {node.id: node_flops(node, shapes[node.id]) for node in net.nodes}
    return per_node, sum(per_node.values())


@dataclass
class ExpectationResult:
    label: str
    metric: str
    expected: Optional[float]
    actual: Optional[float]
    delta: Optional[float]
    tolerance: Optional[float]
    status: str

    def to_dict(self) -> Dict[str, Any]:
        return dict(self.__dict__)


@dataclass
class CostReport:
    network: str
    input_shape: Tuple[int, ...]
    layers: pd.DataFrame
    model: Dict[str, Any] = field(default_factory=dict)
    convention: str = FLOP_CONVENTION
    expectations: List[ExpectationResult] = field(default_factory=list)

    @property
    def total_params(self) -> int:
        return int(self.layers['params'].sum())

    @property
    def total_flops(self) -> int:
        return int(self.layers['flops'].sum())

    @property
    def passed(self) -> bool:
        """No expectation failed; unchecked entries do not count as failures"""
        return all(e.status != 'fail' for e in self.expectations)

    def by_kind(self) -> pd.DataFrame:
        return self.layers.groupby('kind')[['params', 'flops']].sum().sort_values('flops', ascending=False)

    def to_dict(self, include_layers: bool = True) -> Dict[str, Any]:
        data = {
            'network': self.network,
            'input_shape': list(self.input_shape),
            'convention': self.convention,
            'model': {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.model.items()},
            'totals': {
                'params': self.total_params,
                'flops': self.total_flops,
                'params_m': round(self.total_params / 1e6, 2),
                'flops_g': round(self.total_flops / 1e9, 2),
            },
            'by_kind': {kind: {'params': int(row['params']), 'flops': int(row['flops'])}
                        for kind, row in self.by_kind().iterrows()},
            'expectations': [e.to_dict() for e in self.expectations],
        }
        if include_layers:
            data['layers'] = [
                {'node': r.node, 'kind': r.kind, 'params': int(r.params), 'flops': int(r.flops),
                 'output_shape': list(r.output_shape)}
                for r in self.layers.itertuples(index=False)
            ]
        return data

    def to_json(self, include_layers: bool = True) -> str:
        return json.dumps(self.to_dict(include_layers), indent=2)

    def to_text(self, max_rows: Optional[int] = None) -> str:
        table = self.layers.assign(output_shape=self.layers['output_shape'].map(
            lambda s: 'x'.join(str(v) for v in s)))
        lines = [
            f"{self.network} @ {'x'.join(str(s) for s in self.input_shape)} ({self.convention})",
            table.to_string(index=False, max_rows=max_rows),
            "",
            f"# params  {self.total_params / 1e6:.2f} x 10^6  ({self.total_params:,})",
            f"FLOPs     {self.total_flops / 1e9:.2f} x 10^9  ({self.total_flops:,})",
        ]
        for e in self.expectations:
            if e.status == 'unchecked':
                lines.append(f"[unchecked] {e.label} {e.metric}")
                continue
            bound = "rounded" if e.tolerance is None else f"+/-{e.tolerance:.1%}"
            lines.append(f"[{e.status}] {e.label} {e.metric}: expected {e.expected}, got {e.actual:.2f} "
                         f"(delta {e.delta:+.2%}, {bound})")
        return "\n".join(lines)


def model_key(net: NetworkGraph) -> Dict[str, Any]:
    return {k: net.meta[k] for k in MODEL_KEYS if k in net.meta}


def analyze(net: NetworkGraph, input_shape: Sequence[int], model: Optional[Dict[str, Any]] = None) -> CostReport:
    """Per-node params/FLOPs/output shapes for one input shape"""
    input_shape = tuple(int(s) for s in input_shape)
    shapes = net.infer_shapes(input_shape)
    params, _ = count_params(net)
    flops, _ = count_flops(net, input_shape)
    layers = pd.DataFrame({
        'node': [n.id for n in net.nodes],
        'kind': [n.kind for n in net.nodes],
        'params': [params[n.id] for n in net.nodes],
        'flops': [flops[n.id] for n in net.nodes],
        'output_shape': [shapes[n.id] for n in net.nodes],
    })
    report = CostReport(net.name, input_shape, layers, model if model is not None else model_key(net))
    logger.info(f"Analyzed {net.name}: {report.total_params / 1e6:.2f}M params, "
                f"{report.total_flops / 1e9:.2f}G FLOPs")
    return report


def relative_delta(actual: float, expected: float) -> float:
    return (actual - expected) / expected


def _check(label: str, metric: str, actual: float, expected: float, tolerance: Optional[float]) -> ExpectationResult:
    delta = relative_delta(actual, expected)
    if tolerance is None:
        ok = round(actual, 2) == round(expected, 2)
    else:
        ok = abs(delta) <= tolerance
    return ExpectationResult(label, metric, expected, actual, delta, tolerance, 'pass' if ok else 'fail')


def compare_to_expected(report: CostReport, table: Sequence[ExpectedCost]) -> List[ExpectationResult]:
    """
    Check the report against every entry matching its model key. Entries
    for another input shape, and a report no entry matches, come back as
    'unchecked'.
    """
    results = []
    matched = [e for e in table if e.matches(report.model)]
    if not matched:
        logger.warning(f"No expectation entry matches {report.network} {report.model}")
        results.append(ExpectationResult(report.network, 'all', None, None, None, None, 'unchecked'))
    for entry in matched:
        if entry.params_m is not None:
            results.append(_check(entry.label, 'params', report.total_params / 1e6, entry.params_m,
                                  entry.params_tolerance))
        if entry.flops_g is not None:
            if tuple(entry.input_shape) != tuple(report.input_shape):
                logger.warning(f"{entry.label}: FLOPs published for {list(entry.input_shape)}, "
                               f"report is for {list(report.input_shape)}")
                results.append(ExpectationResult(entry.label, 'flops', entry.flops_g, None, None,
                                                 entry.flops_tolerance, 'unchecked'))
            else:
                results.append(_check(entry.label, 'flops', report.total_flops / 1e9, entry.flops_g,
                                      entry.flops_tolerance))
    report.expectations = results
    return results
