#!/usr/bin/env python3
"""
PyConv command line
Verbs: describe, analyze, gradcheck, train-toy, infer, export-weights.
Exit codes: 0 success, 1 invalid config/shape/weight file, 2 failed expectation or check.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from cost_analyzer import analyze, compare_to_expected
from expected_costs import get_table
from gradient_check import gradcheck_network
from network_builder import ConfigError, describe_stages
from network_config import NetworkConfig, build_from_config, load_network_config
from network_graph import NetworkGraph
from pyconv_config import DEFAULT_DTYPE, DEFAULT_SEED, THREADS, TOY_WIDTH_DIVISOR, configure_logging
from ssd_detection import DefaultBoxConfig, flatten_head_outputs, generate_default_boxes, postprocess_detections
from tensor_utils import ShapeError, philox_generator
from toy_trainer import ToyTrainer, TrainConfig, make_toy_dataset, plot_history
from weight_io import WeightFileError, load_weights, save_weights

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_MISMATCH = 2

# batch of two and maps that stay above 1x1 keep batch-norm statistics non-degenerate
GRADCHECK_INPUT_SHAPES = {
    'classification': (2, 3, 64, 64),
    'segmentation': (2, 3, 64, 64),
    'detection': (2, 3, 300, 300),
    'video': (2, 3, 8, 64, 64),
}
TOY_CLASSES = 10


def parse_shape(text: str) -> tuple:
    try:
        shape = tuple(int(v) for v in text.split(','))
    except ValueError:
        raise ConfigError(f"--input-shape must be comma-separated integers, got '{text}'")
    if not shape or min(shape) < 1:
        raise ConfigError(f"--input-shape extents must be positive, got '{text}'")
    return shape


def emit(text: str, out: Optional[str] = None) -> None:
    """Print to stdout, or write to --out when given"""
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text + "\n")
        logger.info(f"Wrote {out}")
    else:
        print(text)


def _prepare(net: NetworkGraph, args, dtype=None) -> NetworkGraph:
    net.max_workers = args.threads
    net.initialize(args.seed, np.dtype(dtype or DEFAULT_DTYPE))
    return net


# --- Verbs ---

def cmd_describe(args) -> int:
    config = load_network_config(args.config)
    net = build_from_config(config)
    shape = parse_shape(args.input_shape) if args.input_shape else config.shape
    table = describe_stages(net, shape)
    report = analyze(net, shape)
    lines = [
        f"{net.name} ({config.task}) @ {'x'.join(str(s) for s in shape)}",
        table.to_string(index=False),
        "",
        f"# params  {report.total_params / 1e6:.2f} x 10^6",
        f"FLOPs     {report.total_flops / 1e9:.2f} x 10^9",
    ]
    emit("\n".join(lines), args.out)
    return EXIT_OK


def cmd_analyze(args) -> int:
    config = load_network_config(args.config)
    net = build_from_config(config)
    shape = parse_shape(args.input_shape) if args.input_shape else config.shape
    report = analyze(net, shape)
    if args.expect:
        compare_to_expected(report, get_table(args.expect))
    print(report.to_text(max_rows=args.max_rows))
    if args.out:
        emit(report.to_json(), args.out)
    if not report.passed:
        failed = [e.label for e in report.expectations if e.status == 'fail']
        logger.error(f"Expectations failed for {net.name}: {failed}")
        return EXIT_MISMATCH
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    config = load_network_config(args.config)
    if args.toy_scale:
        config = config.with_toy_scale(args.toy_scale)
    net = build_from_config(config)
    shape = parse_shape(args.input_shape) if args.input_shape else GRADCHECK_INPUT_SHAPES[config.task]
    report = gradcheck_network(net, shape, seed=args.seed, max_params=args.max_params,
                               entries_per_param=args.entries, corrupt=args.corrupt)
    emit(report.to_json(), args.out)
    return EXIT_OK if report.passed else EXIT_MISMATCH


def _toy_config(config: NetworkConfig, toy_scale: int) -> NetworkConfig:
    if config.task not in ('classification', 'segmentation'):
        raise ConfigError(f"train-toy supports classification and segmentation, not {config.task}")
    classes = config.num_classes if config.num_classes is not None else TOY_CLASSES
    return NetworkConfig(config.family, config.depth, config.task, config.level_schedule, classes,
                         config.output_stride, config.input_shape, config.downsample,
                         toy_scale or config.width_divisor)


def cmd_train_toy(args) -> int:
    config = _toy_config(load_network_config(args.config), args.toy_scale)
    cfg = TrainConfig(base_lr=args.lr, epochs=args.epochs, batch_size=args.batch_size, seed=args.seed)
    dataset = make_toy_dataset(args.seed, args.n_per_class, classes=config.classes, size=args.size)
    if config.task == 'segmentation':
        # every pixel of an image carries the image label
        labels = np.broadcast_to(dataset.labels[:, None, None], (len(dataset.labels), args.size, args.size))
        dataset = dataset._replace(labels=np.ascontiguousarray(labels))
    net = _prepare(build_from_config(config), args, np.float32)
    trainer = ToyTrainer(net, dataset, cfg)
    if args.resume:
        trainer.load_checkpoint(args.resume)
    history = trainer.fit()

    out_dir = Path(args.out or 'train_toy_out')
    out_dir.mkdir(parents=True, exist_ok=True)
    history.to_csv(out_dir / 'history.csv', index=False)
    trainer.save_checkpoint(out_dir / 'weights.pycv')
    if args.plot:
        plot_history(history, args.plot)
    print(history.to_string(index=False))
    return EXIT_OK


def _load_input(args, config: NetworkConfig) -> np.ndarray:
    if args.input:
        tensors = load_weights(args.input)
        if len(tensors) != 1:
            raise WeightFileError(f"input file must hold exactly one tensor, found {len(tensors)}", 8)
        return next(iter(tensors.values())).astype(np.dtype(DEFAULT_DTYPE))
    shape = parse_shape(args.input_shape) if args.input_shape else config.shape
    return philox_generator(args.seed, 2).standard_normal(shape).astype(np.dtype(DEFAULT_DTYPE))


def _detections(net: NetworkGraph, outputs: Dict[str, np.ndarray], x: np.ndarray) -> List[List[Dict]]:
    shapes = net.infer_shapes(x.shape)
    sides = [shapes[m][2] for m in net.meta['detection_maps']]
    defaults = generate_default_boxes(DefaultBoxConfig.from_sides(sides, net.meta['boxes_per_map'], x.shape[-1]))
    results = []
    for b in range(x.shape[0]):
        single = {name: out[b:b + 1] for name, out in outputs.items()}
        loc, conf = flatten_head_outputs(single, net.meta['num_classes'], len(sides))
        results.append(postprocess_detections(loc, conf, defaults))
    return results


def cmd_infer(args) -> int:
    config = load_network_config(args.config)
    net = _prepare(build_from_config(config), args)
    if args.weights:
        net.load_state(load_weights(args.weights))
    x = _load_input(args, config)
    outputs = net.forward(x)
    if config.task == 'detection':
        result = {'detections': _detections(net, outputs, x)}
    elif config.task == 'segmentation':
        labels = np.argmax(outputs['main'], axis=1)
        counts = np.bincount(labels.reshape(-1), minlength=config.classes)
        result = {'shape': list(labels.shape), 'class_pixels': {int(c): int(n) for c, n in enumerate(counts) if n}}
    else:
        logits = outputs['main']
        result = {'class_ids': np.argmax(logits, axis=1).tolist(), 'max_logits': logits.max(axis=1).tolist()}
    emit(json.dumps(result, indent=2), args.out)
    return EXIT_OK


def cmd_export_weights(args) -> int:
    config = load_network_config(args.config)
    net = _prepare(build_from_config(config), args)
    if not args.out:
        raise ConfigError("export-weights needs --out PATH")
    save_weights(args.out, net.state_tensors())
    print(f"✅ Exported {len(net.params)} parameter tensors ({net.census():,} scalars) to {args.out}")
    return EXIT_OK


COMMANDS = {
    'describe': cmd_describe,
    'analyze': cmd_analyze,
    'gradcheck': cmd_gradcheck,
    'train-toy': cmd_train_toy,
    'infer': cmd_infer,
    'export-weights': cmd_export_weights,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', required=True, help='network config JSON')
    common.add_argument('--input-shape', help='N,C,H,W (or N,C,T,H,W for video)')
    common.add_argument('--seed', type=int, default=DEFAULT_SEED)
    common.add_argument('--threads', type=int, default=THREADS, help='parallel PyConv levels')
    common.add_argument('--out', help='output path')
    common.add_argument('--log-level', help='overrides PYCONV_LOG_LEVEL')

    parser = argparse.ArgumentParser(prog='pyconv', description='Pyramidal convolution networks toolkit')
    sub = parser.add_subparsers(dest='command', required=True)
    sub.add_parser('describe', parents=[common], help='print the stage table')

    p = sub.add_parser('analyze', parents=[common], help='parameter and FLOP report')
    p.add_argument('--expect', help='golden table id, e.g. table1')
    p.add_argument('--max-rows', type=int, default=60)

    p = sub.add_parser('gradcheck', parents=[common], help='finite-difference check of a toy-scale network')
    p.add_argument('--toy-scale', type=int, default=TOY_WIDTH_DIVISOR, help='width divisor (0 keeps the config)')
    p.add_argument('--max-params', type=int, default=16)
    p.add_argument('--entries', type=int, default=4, help='entries checked per tensor')
    p.add_argument('--corrupt', action='store_true', help='skew one analytic gradient (must fail)')

    p = sub.add_parser('train-toy', parents=[common], help='train on the synthetic grating set')
    p.add_argument('--toy-scale', type=int, default=TOY_WIDTH_DIVISOR)
    p.add_argument('--epochs', type=int, default=30)
    p.add_argument('--batch-size', type=int, default=32)
    p.add_argument('--lr', type=float, default=0.1)
    p.add_argument('--n-per-class', type=int, default=32)
    p.add_argument('--size', type=int, default=32)
    p.add_argument('--resume', help='checkpoint written by a previous run')
    p.add_argument('--plot', help='write loss/accuracy curves to this image')

    p = sub.add_parser('infer', parents=[common], help='run a network on one input tensor')
    p.add_argument('--weights', help='PYCV weight file')
    p.add_argument('--input', help='PYCV file holding a single input tensor')

    sub.add_parser('export-weights', parents=[common], help='write initialized weights')
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ShapeError, WeightFileError) as e:
        logger.error(f"{args.command} failed: {e}")
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
