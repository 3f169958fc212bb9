#!/usr/bin/env python3
"""
Network graph and executor
Ordered layer nodes over a named parameter store, with shape inference,
forward execution and reverse-mode backward accumulation.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

import nn_ops
from nn_ops import ConvSpec
from pyconv_layer import PyConvSpec, pyconv_backward, pyconv_forward, validate as validate_pyconv
from tensor_utils import ShapeError, Tensor, he_normal_init, name_stream, philox_generator

logger = logging.getLogger(__name__)

INPUT_ID = 'input'

NODE_KINDS = (
    'conv', 'pyconv', 'bn', 'relu', 'maxpool', 'adaptive-avgpool', 'global-avgpool',
    'bilinear-upsample', 'linear', 'add', 'concat', 'dropout',
)


@dataclass(frozen=True)
class PoolSpec:
    window: Tuple[int, ...]
    stride: Tuple[int, ...]
    padding: Tuple[int, ...]


@dataclass(frozen=True)
class AdaptivePoolSpec:
    """Fixed output size, or the largest axis pooled to `largest` and the rest in proportion"""
    size: Optional[Tuple[int, ...]] = None
    largest: Optional[int] = None

    def resolve(self, in_spatial: Sequence[int]) -> Tuple[int, ...]:
        if self.size is not None:
            return tuple(self.size)
        biggest = max(in_spatial)
        return tuple(min(i, max(1, int(math.floor(i * self.largest / biggest + 0.5)))) for i in in_spatial)


@dataclass(frozen=True)
class UpsampleSpec:
    """Fixed output size, or the spatial size of another node (`like`)"""
    size: Optional[Tuple[int, ...]] = None
    like: Optional[str] = None


@dataclass(frozen=True)
class LinearSpec:
    in_features: int
    out_features: int


@dataclass
class LayerNode:
    id: str
    kind: str
    spec: Any = None
    inputs: List[str] = field(default_factory=list)
    params: List[str] = field(default_factory=list)


class NetworkGraph:
    """A DAG of LayerNodes executed in insertion order"""

    def __init__(self, name: str, in_channels: int = 3, spatial_dims: int = 2):
        self.name = name
        self.in_channels = in_channels
        self.spatial_dims = spatial_dims
        self.nodes: List[LayerNode] = []
        self.param_shapes: Dict[str, Tuple[int, ...]] = {}
        self.param_init: Dict[str, tuple] = {}
        self.buffer_shapes: Dict[str, Tuple[int, ...]] = {}
        self.params: Dict[str, Tensor] = {}
        self.buffers: Dict[str, np.ndarray] = {}
        self.outputs: Dict[str, str] = {}
        self.meta: Dict[str, Any] = {}
        self.max_workers = 1
        self.dropout_seed = 0
        self.input_grad: Optional[Tensor] = None
        self._ids = {INPUT_ID}
        self._acts: Dict[str, Tensor] = {}
        self._caches: Dict[str, Any] = {}
        self._pattern: Dict[str, np.ndarray] = {}

    # --- Construction ---

    def add_node(self, kind: str, node_id: str, inputs: Sequence[str], spec: Any = None) -> str:
        if kind not in NODE_KINDS:
            raise ShapeError(f"unknown node kind '{kind}'")
        if node_id in self._ids:
            raise ShapeError(f"duplicate node id '{node_id}'")
        for i in inputs:
            if i not in self._ids:
                raise ShapeError(f"node '{node_id}' reads undefined input '{i}'")
        if isinstance(spec, UpsampleSpec) and spec.like is not None and spec.like not in self._ids:
            raise ShapeError(f"node '{node_id}' sizes itself like undefined node '{spec.like}'")
        self.nodes.append(LayerNode(node_id, kind, spec, list(inputs)))
        self._ids.add(node_id)
        return node_id

    def add_param(self, node_id: str, suffix: str, shape: Sequence[int], init: tuple) -> str:
        name = f"{node_id}.{suffix}"
        if name in self.param_shapes:
            raise ShapeError(f"duplicate parameter '{name}'")
        self.param_shapes[name] = tuple(int(s) for s in shape)
        self.param_init[name] = init
        self.node(node_id).params.append(name)
        return name

    def add_buffer(self, node_id: str, suffix: str, shape: Sequence[int]) -> str:
        name = f"{node_id}.{suffix}"
        self.buffer_shapes[name] = tuple(shape)
        return name

    def node(self, node_id: str) -> LayerNode:
        for node in self.nodes:
            if node.id == node_id:
                return node
        raise KeyError(node_id)

    def count(self, kind: str) -> int:
        return sum(1 for node in self.nodes if node.kind == kind)

    def pyconv_specs(self) -> List[PyConvSpec]:
        return [node.spec for node in self.nodes if node.kind == 'pyconv']

    def validate(self) -> List[str]:
        """Embedded PyConv rule violations plus parameter/spec shape mismatches"""
        problems = []
        for node in self.nodes:
            if node.kind == 'pyconv':
                problems += [f"{node.id}: {v}" for v in validate_pyconv(node.spec)]
                expected = node.spec.weight_shapes()
            elif node.kind == 'conv':
                expected = [node.spec.weight_shape] + ([(node.spec.out_channels,)] if len(node.params) > 1 else [])
            elif node.kind == 'bn':
                expected = [(node.spec,), (node.spec,)]
            elif node.kind == 'linear':
                expected = [(node.spec.out_features, node.spec.in_features), (node.spec.out_features,)]
            else:
                expected = []
            actual = [self.param_shapes[p] for p in node.params]
            if actual != [tuple(e) for e in expected]:
                problems.append(f"{node.id}: parameter shapes {actual} do not match spec {expected}")
        return problems

    # --- Parameter store ---

    def initialize(self, seed: int, dtype=np.float32) -> 'NetworkGraph':
        """Allocate every parameter and BN buffer deterministically from seed"""
        self.params = {}
        for name, shape in self.param_shapes.items():
            init = self.param_init[name]
            if init[0] == 'he':
                value = he_normal_init(shape, init[1], seed, stream=name_stream(name), dtype=dtype)
            elif init[0] == 'normal':
                value = (philox_generator(seed, name_stream(name)).standard_normal(shape) * init[1]).astype(dtype)
            elif init[0] == 'ones':
                value = np.ones(shape, dtype=dtype)
            else:
                value = np.zeros(shape, dtype=dtype)
            self.params[name] = value
        self.buffers = {
            name: (np.ones(shape, dtype=dtype) if name.endswith('running_var') else np.zeros(shape, dtype=dtype))
            for name, shape in self.buffer_shapes.items()
        }
        logger.info(f"Initialized {self.name}: {self.census():,} parameters (seed {seed})")
        return self

    def cast(self, dtype) -> 'NetworkGraph':
        self.params = {k: v.astype(dtype) for k, v in self.params.items()}
        self.buffers = {k: v.astype(dtype) for k, v in self.buffers.items()}
        return self

    def census(self) -> int:
        """Number of learnable scalars actually allocated"""
        return int(sum(v.size for v in self.params.values()))

    def state_tensors(self) -> Dict[str, Tensor]:
        state = dict(self.params)
        state.update(self.buffers)
        return state

    def load_state(self, tensors: Dict[str, Tensor]) -> None:
        """Load parameters and BN buffers by name; every entry must be present"""
        for store, shapes in ((self.params, self.param_shapes), (self.buffers, self.buffer_shapes)):
            for name, shape in shapes.items():
                if name not in tensors:
                    raise ShapeError(f"state is missing '{name}'")
                value = np.asarray(tensors[name])
                if tuple(value.shape) != tuple(shape):
                    raise ShapeError(f"'{name}' has shape {list(value.shape)}, expected {list(shape)}")
                store[name] = value.copy()

    # --- Shape inference ---

    def infer_shapes(self, input_shape: Sequence[int]) -> Dict[str, Tuple[int, ...]]:
        input_shape = tuple(int(s) for s in input_shape)
        if len(input_shape) != self.spatial_dims + 2 or input_shape[1] != self.in_channels:
            raise ShapeError(
                f"{self.name} expects [N, {self.in_channels}, ...] with {self.spatial_dims} spatial dims, "
                f"got {list(input_shape)}")
        shapes = {INPUT_ID: input_shape}
        for node in self.nodes:
            ins = [shapes[i] for i in node.inputs]
            shapes[node.id] = self._node_shape(node, ins, shapes)
        return shapes

    def _node_shape(self, node: LayerNode, ins: List[tuple], shapes: Dict[str, tuple]) -> tuple:
        kind, spec = node.kind, node.spec
        x = ins[0] if ins else None
        if kind in ('conv', 'pyconv'):
            if x[1] != spec.in_channels:
                raise ShapeError(f"{node.id}: {x[1]} input channels, expected {spec.in_channels}")
            return (x[0], spec.out_channels) + spec.output_spatial(x[2:])
        if kind == 'bn':
            if x[1] != spec:
                raise ShapeError(f"{node.id}: {x[1]} channels, batch norm has {spec}")
            return x
        if kind in ('relu', 'dropout'):
            return x
        if kind == 'maxpool':
            return x[:2] + nn_ops.pool_output_spatial(x[2:], spec.window, spec.stride, spec.padding)
        if kind == 'adaptive-avgpool':
            return x[:2] + spec.resolve(x[2:])
        if kind == 'global-avgpool':
            return x[:2]
        if kind == 'bilinear-upsample':
            size = shapes[spec.like][2:] if spec.like is not None else tuple(spec.size)
            return x[:2] + tuple(size)
        if kind == 'linear':
            if len(x) != 2 or x[1] != spec.in_features:
                raise ShapeError(f"{node.id}: input {list(x)} does not fit {spec}")
            return (x[0], spec.out_features)
        if kind == 'add':
            if any(s != x for s in ins):
                raise ShapeError(f"{node.id}: cannot add shapes {ins}")
            return x
        if kind == 'concat':
            if any(s[:1] != x[:1] or s[2:] != x[2:] for s in ins):
                raise ShapeError(f"{node.id}: cannot concat shapes {ins}")
            return (x[0], sum(s[1] for s in ins)) + x[2:]
        raise ShapeError(f"unknown node kind '{kind}'")

    # --- Forward ---

    def forward(self, x: Tensor, training: bool = False, record_pattern: bool = False,
                reuse_pattern: bool = False) -> Dict[str, Tensor]:
        """
        Execute every node in order and return the named outputs.

        record_pattern stores ReLU masks and max-pool argmax positions;
        reuse_pattern evaluates those nonlinearities at the stored pattern.
        """
        if not self.params and self.param_shapes:
            raise RuntimeError(f"{self.name} has no parameters; call initialize() first")
        self.infer_shapes(x.shape)
        self._record, self._reuse, self._training = record_pattern, reuse_pattern, training
        if record_pattern:
            self._pattern = {}
        acts = {INPUT_ID: x}
        caches = {}
        for node in self.nodes:
            ins = [acts[i] for i in node.inputs]
            handler = getattr(self, '_fwd_' + node.kind.replace('-', '_'))
            acts[node.id], caches[node.id] = handler(node, ins, acts)
        self._acts, self._caches = acts, caches
        return {name: acts[node_id] for name, node_id in self.outputs.items()}

    def freeze_batch_statistics(self, x: Tensor) -> None:
        """
        Run a training-mode pass on x and store each batch-norm layer's batch
        mean and (biased) variance as its running statistics, so an eval-mode
        pass on x reproduces the training-mode activations.
        """
        self.forward(x, training=True)
        for node in self.nodes:
            if node.kind != 'bn':
                continue
            inp = self._acts[node.inputs[0]]
            axes = (0,) + tuple(range(2, inp.ndim))
            mean = self.buffers[f"{node.id}.running_mean"]
            var = self.buffers[f"{node.id}.running_var"]
            mean[...] = inp.mean(axis=axes, dtype=np.float64)
            var[...] = inp.var(axis=axes, dtype=np.float64)

    def _fwd_conv(self, node, ins, acts):
        bias = self.params[node.params[1]] if len(node.params) > 1 else None
        return nn_ops.conv_forward(ins[0], self.params[node.params[0]], bias, node.spec), None

    def _fwd_pyconv(self, node, ins, acts):
        weights = [self.params[p] for p in node.params]
        return pyconv_forward(ins[0], node.spec, weights, max_workers=self.max_workers), None

    def _fwd_bn(self, node, ins, acts):
        gamma, beta = (self.params[p] for p in node.params)
        return nn_ops.batchnorm_forward(
            ins[0], gamma, beta, self.buffers[f"{node.id}.running_mean"],
            self.buffers[f"{node.id}.running_var"], self._training)

    def _fwd_relu(self, node, ins, acts):
        x = ins[0]
        mask = self._pattern[node.id] if self._reuse else x > 0
        if self._record:
            self._pattern[node.id] = mask
        return np.where(mask, x, 0).astype(x.dtype), mask

    def _fwd_maxpool(self, node, ins, acts):
        x, spec = ins[0], node.spec
        if self._reuse:
            argmax = self._pattern[node.id]
            out = nn_ops.maxpool_gather(x, argmax)
        else:
            out, argmax = nn_ops.maxpool_forward(x, spec.window, spec.stride, spec.padding)
        if self._record:
            self._pattern[node.id] = argmax
        return out, argmax

    def _fwd_adaptive_avgpool(self, node, ins, acts):
        return nn_ops.adaptive_avg_pool(ins[0], node.spec.resolve(ins[0].shape[2:])), None

    def _fwd_global_avgpool(self, node, ins, acts):
        return nn_ops.global_avg_pool(ins[0]), None

    def _fwd_bilinear_upsample(self, node, ins, acts):
        spec = node.spec
        size = acts[spec.like].shape[2:] if spec.like is not None else spec.size
        return nn_ops.bilinear_upsample(ins[0], size), None

    def _fwd_linear(self, node, ins, acts):
        weight, bias = (self.params[p] for p in node.params)
        return nn_ops.linear_forward(ins[0], weight, bias), None

    def _fwd_add(self, node, ins, acts):
        out = ins[0]
        for other in ins[1:]:
            out = out + other
        return out, None

    def _fwd_concat(self, node, ins, acts):
        return np.concatenate(ins, axis=1), [t.shape[1] for t in ins]

    def _fwd_dropout(self, node, ins, acts):
        rng = philox_generator(self.dropout_seed, name_stream(node.id)) if self._training else None
        return nn_ops.dropout_forward(ins[0], node.spec, rng, self._training)

    # --- Backward ---

    def backward(self, output_grads: Dict[str, Tensor]) -> Dict[str, Tensor]:
        """
        Propagate gradients of the named outputs back through the last
        forward pass; returns gradients for every parameter and stores the
        input gradient on `input_grad`.
        """
        if not self._acts:
            raise RuntimeError("backward() called before forward()")
        grads: Dict[str, Tensor] = {}
        for name, g in output_grads.items():
            node_id = self.outputs[name]
            grads[node_id] = g if node_id not in grads else grads[node_id] + g
        param_grads: Dict[str, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(node.id, None)
            if g is None:
                continue
            handler = getattr(self, '_bwd_' + node.kind.replace('-', '_'))
            in_grads = handler(node, g, param_grads)
            for input_id, gi in zip(node.inputs, in_grads):
                if gi is not None:
                    grads[input_id] = gi if input_id not in grads else grads[input_id] + gi
        self.input_grad = grads.get(INPUT_ID)
        for name, value in self.params.items():
            if name not in param_grads:
                param_grads[name] = np.zeros_like(value)
        return param_grads

    def _input(self, node, i=0):
        return self._acts[node.inputs[i]]

    def _bwd_conv(self, node, g, param_grads):
        gx, gw, gb = nn_ops.conv_backward(self._input(node), self.params[node.params[0]], node.spec, g)
        param_grads[node.params[0]] = gw
        if len(node.params) > 1:
            param_grads[node.params[1]] = gb
        return [gx]

    def _bwd_pyconv(self, node, g, param_grads):
        weights = [self.params[p] for p in node.params]
        gx, gws = pyconv_backward(self._input(node), node.spec, weights, g)
        for name, gw in zip(node.params, gws):
            param_grads[name] = gw
        return [gx]

    def _bwd_bn(self, node, g, param_grads):
        gx, ggamma, gbeta = nn_ops.batchnorm_backward(g, self._caches[node.id])
        param_grads[node.params[0]] = ggamma
        param_grads[node.params[1]] = gbeta
        return [gx]

    def _bwd_relu(self, node, g, param_grads):
        return [np.where(self._caches[node.id], g, 0).astype(g.dtype)]

    def _bwd_maxpool(self, node, g, param_grads):
        return [nn_ops.maxpool_backward(g, self._caches[node.id], self._input(node).shape)]

    def _bwd_adaptive_avgpool(self, node, g, param_grads):
        return [nn_ops.adaptive_avg_pool_backward(g, self._input(node).shape[2:])]

    def _bwd_global_avgpool(self, node, g, param_grads):
        return [nn_ops.global_avg_pool_backward(g, self._input(node).shape)]

    def _bwd_bilinear_upsample(self, node, g, param_grads):
        return [nn_ops.bilinear_upsample_backward(g, self._input(node).shape[2:])]

    def _bwd_linear(self, node, g, param_grads):
        weight = self.params[node.params[0]]
        gx, gw, gb = nn_ops.linear_backward(self._input(node), weight, g)
        param_grads[node.params[0]] = gw
        param_grads[node.params[1]] = gb
        return [gx]

    def _bwd_add(self, node, g, param_grads):
        return [g] * len(node.inputs)

    def _bwd_concat(self, node, g, param_grads):
        bounds = np.cumsum(self._caches[node.id])[:-1]
        return np.split(g, bounds, axis=1)

    def _bwd_dropout(self, node, g, param_grads):
        return [nn_ops.dropout_backward(g, self._caches[node.id])]


# --- Small graph helpers shared by the builders ---

def conv_spec(in_channels: int, out_channels: int, kernel, stride=1, padding=None,
              dilation=1, groups: int = 1, spatial_dims: int = 2) -> ConvSpec:
    if isinstance(kernel, int):
        kernel = (kernel,) * spatial_dims
    if padding is None:
        dil = (dilation,) * spatial_dims if isinstance(dilation, int) else dilation
        padding = tuple((k - 1) // 2 * d for k, d in zip(kernel, dil))
    return ConvSpec(kernel=kernel, in_channels=in_channels, out_channels=out_channels,
                    stride=stride, padding=padding, dilation=dilation, groups=groups)
