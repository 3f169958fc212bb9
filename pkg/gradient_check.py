#!/usr/bin/env python3
"""
Finite-difference gradient checks
Central differences in float64 against the analytic backward pass, for
single ops (a loss closure) and for whole networks.
"""

import copy
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from network_graph import NetworkGraph
from pyconv_config import GRADCHECK_EPS, GRADCHECK_THRESHOLD
from tensor_utils import Tensor, philox_generator

logger = logging.getLogger(__name__)

ENTRIES_PER_TENSOR = 4
NUDGE_MARGIN = 0.1
CORRUPTION_SCALE = 0.01
# gradients below this magnitude compare on an absolute scale
GRADIENT_FLOOR = 1e-6

LossFn = Callable[[Dict[str, Tensor]], Tuple[float, Dict[str, Tensor]]]


@dataclass
class GradCheckReport:
    errors: Dict[str, float]
    epsilon: float
    threshold: float
    precision: str = 'float64'
    entries: Dict[str, int] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def worst(self) -> Optional[str]:
        if not self.errors:
            return None
        return max(self.errors, key=self.errors.get)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.threshold

    def to_dict(self) -> Dict:
        return {
            'passed': self.passed,
            'max_error': self.max_error,
            'worst': self.worst,
            'epsilon': self.epsilon,
            'threshold': self.threshold,
            'precision': self.precision,
            'errors': dict(self.errors),
            'entries': dict(self.entries),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute difference scaled by the larger of the two max magnitudes (at least GRADIENT_FLOOR)"""
    analytic, numeric = np.asarray(analytic, np.float64), np.asarray(numeric, np.float64)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), GRADIENT_FLOOR)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def nudge(x: Tensor, margin: float = NUDGE_MARGIN) -> Tensor:
    """Push entries with |x| < margin out to +/-margin so ReLU kinks stay out of reach"""
    x = np.asarray(x, dtype=np.float64)
    sign = np.where(x < 0, -1.0, 1.0)
    return np.where(np.abs(x) < margin, sign * margin, x)


def sample_entries(size: int, count: Optional[int], seed: int, stream: int) -> np.ndarray:
    """Deterministic sorted flat indices; all of them when count is None or covers the tensor"""
    if count is None or count >= size:
        return np.arange(size)
    picks = philox_generator(seed, stream).choice(size, size=count, replace=False)
    return np.sort(picks)


def gradcheck(fn: LossFn, inputs: Dict[str, Tensor], epsilon: float = GRADCHECK_EPS,
              threshold: float = GRADCHECK_THRESHOLD, entries: Optional[int] = None,
              seed: int = 0) -> GradCheckReport:
    """
    fn maps a dict of float64 tensors to (loss, grads by the same names).
    Every named tensor is perturbed in place one entry at a time.
    """
    values = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    _, analytic = fn(values)
    errors, counts = {}, {}
    for stream, (name, tensor) in enumerate(values.items()):
        flat = tensor.reshape(-1)
        picks = sample_entries(flat.size, entries, seed, stream)
        numeric = np.empty(len(picks))
        for j, i in enumerate(picks):
            original = flat[i]
            flat[i] = original + epsilon
            plus, _ = fn(values)
            flat[i] = original - epsilon
            minus, _ = fn(values)
            flat[i] = original
            numeric[j] = (plus - minus) / (2 * epsilon)
        errors[name] = relative_error(np.asarray(analytic[name]).reshape(-1)[picks], numeric)
        counts[name] = len(picks)
    report = GradCheckReport(errors, epsilon, threshold, entries=counts)
    logger.debug(f"gradcheck over {list(values)}: max error {report.max_error:.3e}")
    return report


def _pick_params(names: List[str], max_params: Optional[int]) -> List[str]:
    if max_params is None or max_params >= len(names):
        return names
    step = math.ceil(len(names) / max_params)
    return names[::step][:max_params]


def gradcheck_network(net: NetworkGraph, input_shape: Sequence[int], seed: int = 0,
                      epsilon: float = GRADCHECK_EPS, threshold: float = GRADCHECK_THRESHOLD,
                      max_params: Optional[int] = None, entries_per_param: int = ENTRIES_PER_TENSOR,
                      check_input: bool = True, corrupt: bool = False,
                      training: bool = False) -> GradCheckReport:
    """
    Check a float64 copy of net on loss = sum(R * output) over every named
    output, R drawn from Philox. ReLU masks and max-pool winners recorded on
    the first pass are reused for the perturbed passes.

    By default batch-norm layers are frozen at the batch statistics of x and
    the check runs in eval mode, where the loss is linear in every checked
    entry. training=True keeps batch statistics live; its central differences
    carry an O(epsilon^2) curvature error, so it suits small networks only.

    corrupt skews the analytic gradient of the first checked parameter, a
    negative control that must fail.
    """
    net = copy.deepcopy(net)
    if not net.params:
        net.initialize(seed, np.float64)
    net.cast(np.float64)
    x = philox_generator(seed, 1).standard_normal(tuple(input_shape))

    if not training:
        net.freeze_batch_statistics(x)
    outputs = net.forward(x, training=training, record_pattern=True)
    weights = {name: philox_generator(seed, 100 + k).standard_normal(out.shape)
               for k, (name, out) in enumerate(sorted(outputs.items()))}
    grads = net.backward(weights)
    input_grad = net.input_grad

    def loss() -> float:
        outs = net.forward(x, training=training, reuse_pattern=True)
        return float(sum(np.sum(weights[name] * out) for name, out in outs.items()))

    names = _pick_params(list(net.param_shapes), max_params)
    if corrupt and names:
        g = grads[names[0]]
        grads[names[0]] = g + CORRUPTION_SCALE * max(np.abs(g).max(), 1e-3)

    targets: List[Tuple[str, np.ndarray, np.ndarray]] = [(n, net.params[n], grads[n]) for n in names]
    if check_input:
        targets.append(('input', x, input_grad))

    errors, counts = {}, {}
    for stream, (name, tensor, analytic) in enumerate(targets):
        flat = tensor.reshape(-1)
        picks = sample_entries(flat.size, entries_per_param, seed, stream + 1000)
        numeric = np.empty(len(picks))
        for j, i in enumerate(picks):
            original = flat[i]
            flat[i] = original + epsilon
            plus = loss()
            flat[i] = original - epsilon
            minus = loss()
            flat[i] = original
            numeric[j] = (plus - minus) / (2 * epsilon)
        errors[name] = relative_error(analytic.reshape(-1)[picks], numeric)
        counts[name] = len(picks)

    report = GradCheckReport(errors, epsilon, threshold, entries=counts)
    status = "passed" if report.passed else "FAILED"
    logger.info(f"gradcheck {net.name}: {status}, max error {report.max_error:.3e} at {report.worst}")
    return report
