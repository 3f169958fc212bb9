#!/usr/bin/env python3
"""
Desk-scale training
SGD with momentum and coupled weight decay, milestone learning-rate decay,
auxiliary-loss combination and a synthetic grating dataset.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Tuple, Union

import numpy as np
import pandas as pd

from network_builder import ConfigError
from network_graph import NetworkGraph
from nn_ops import softmax_cross_entropy
from tensor_utils import ShapeError, Tensor, philox_generator
from weight_io import load_weights, save_weights

logger = logging.getLogger(__name__)

# --- Configuration ---
NOISE_STD = 0.3
DATASET_STREAM = 7
SHUFFLE_STREAM = 1000
HISTORY_COLUMNS = ['epoch', 'lr', 'loss', 'accuracy']
VELOCITY_PREFIX = 'velocity/'
EPOCH_KEY = 'meta/epoch'


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    milestones: Tuple[int, ...] = (30, 60, 80)
    decay: float = 0.1
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    aux_weight: float = 0.4

    def __post_init__(self):
        object.__setattr__(self, 'milestones', tuple(int(m) for m in self.milestones))
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ConfigError(f"milestones must be strictly increasing, got {list(self.milestones)}")
        if self.base_lr <= 0 or self.decay <= 0:
            raise ConfigError("base_lr and decay must be positive")
        if self.weight_decay < 0 or self.aux_weight < 0 or not 0 <= self.momentum < 1:
            raise ConfigError("weight_decay and aux_weight must be >= 0 and momentum in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Decay applies from each milestone epoch onward"""
    passed = sum(1 for m in cfg.milestones if epoch >= m)
    return cfg.base_lr * cfg.decay ** passed


def sgd_step(params: Dict[str, Tensor], grads: Dict[str, Tensor], velocity: Dict[str, Tensor],
             lr: float, cfg: TrainConfig) -> Tuple[Dict[str, Tensor], Dict[str, Tensor]]:
    """
    In-place momentum SGD with L2 decay folded into the gradient:
    g' = g + wd*p ; v = m*v + g' ; p = p - lr*v
    """
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape or velocity[name].shape != p.shape:
            raise ShapeError(f"'{name}': gradient {list(g.shape)} / velocity {list(velocity[name].shape)} "
                             f"do not match parameter {list(p.shape)}")
        step = g + cfg.weight_decay * p if cfg.weight_decay else g
        v = cfg.momentum * velocity[name] + step if cfg.momentum else step
        velocity[name] = np.asarray(v, dtype=p.dtype)
        p -= (lr * velocity[name]).astype(p.dtype)
    return params, velocity


def combined_loss(main_logits: Tensor, aux_logits: Optional[Tensor], labels: np.ndarray,
                  aux_weight: float) -> Tuple[float, Tensor, Optional[Tensor]]:
    """L = L_main + aux_weight * L_aux; returns (loss, main grad, aux grad)"""
    loss, main_grad = softmax_cross_entropy(main_logits, labels)
    if aux_logits is None:
        return loss, main_grad, None
    aux_loss, aux_grad = softmax_cross_entropy(aux_logits, labels)
    return loss + aux_weight * aux_loss, main_grad, (aux_grad * aux_weight).astype(aux_grad.dtype)


class ToyDataset(NamedTuple):
    images: np.ndarray
    labels: np.ndarray


def grating_params(label: int, classes: int) -> Tuple[float, float]:
    """(angle, cycles per image) of class label"""
    return math.pi * label / classes, 2.0 + label % 4


def make_toy_dataset(seed: int, n_per_class: int, classes: int = 10, size: int = 32,
                     channels: int = 3) -> ToyDataset:
    """
    Oriented sinusoidal gratings, one orientation/frequency pair per class,
    with a small phase jitter and Gaussian noise; labels cycle through the classes.
    """
    rng = philox_generator(seed, DATASET_STREAM)
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing='ij')
    labels = np.tile(np.arange(classes), n_per_class).astype(np.int64)
    images = np.empty((len(labels), channels, size, size), dtype=np.float32)
    for i, label in enumerate(labels):
        angle, cycles = grating_params(int(label), classes)
        phase = rng.uniform(-math.pi / 4, math.pi / 4)
        wave = np.cos(2 * math.pi * cycles * (xx * math.cos(angle) + yy * math.sin(angle)) / size + phase)
        noise = rng.normal(0.0, NOISE_STD, size=(channels, size, size))
        images[i] = (wave[None] + noise).astype(np.float32)
    return ToyDataset(images, labels)


def accuracy(logits: Tensor, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == labels))


class ToyTrainer:
    """Mini-batch SGD over a NetworkGraph with checkpointable state"""

    def __init__(self, net: NetworkGraph, dataset: ToyDataset, cfg: TrainConfig):
        if not net.params:
            net.initialize(cfg.seed)
        self.net = net
        self.dataset = dataset
        self.cfg = cfg
        self.velocity = {name: np.zeros_like(p) for name, p in net.params.items()}
        self.epoch = 0

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.dataset.labels) / self.cfg.batch_size)

    def train_epoch(self) -> Dict[str, float]:
        cfg, net = self.cfg, self.net
        lr = lr_at(self.epoch, cfg)
        n = len(self.dataset.labels)
        order = philox_generator(cfg.seed, SHUFFLE_STREAM + self.epoch).permutation(n)
        total_loss, correct = 0.0, 0.0
        for step in range(self.steps_per_epoch):
            idx = order[step * cfg.batch_size:(step + 1) * cfg.batch_size]
            x, labels = self.dataset.images[idx], self.dataset.labels[idx]
            net.dropout_seed = self.epoch * self.steps_per_epoch + step
            outputs = net.forward(x, training=True)
            loss, main_grad, aux_grad = combined_loss(outputs['main'], outputs.get('aux'), labels, cfg.aux_weight)
            output_grads = {'main': main_grad}
            if aux_grad is not None:
                output_grads['aux'] = aux_grad
            grads = net.backward(output_grads)
            sgd_step(net.params, grads, self.velocity, lr, cfg)
            total_loss += loss * len(idx)
            correct += accuracy(outputs['main'], labels) * len(idx)
        record = {'epoch': self.epoch, 'lr': lr, 'loss': total_loss / n, 'accuracy': correct / n}
        logger.info(f"epoch {self.epoch}: lr {lr:g} loss {record['loss']:.4f} accuracy {record['accuracy']:.3f}")
        self.epoch += 1
        return record

    def fit(self, epochs: Optional[int] = None) -> pd.DataFrame:
        """Train until `epochs` (default cfg.epochs) have been completed in total"""
        target = self.cfg.epochs if epochs is None else epochs
        rows: List[Dict[str, float]] = []
        while self.epoch < target:
            rows.append(self.train_epoch())
        return pd.DataFrame(rows, columns=HISTORY_COLUMNS)

    def state_tensors(self) -> Dict[str, np.ndarray]:
        state = self.net.state_tensors()
        state.update({VELOCITY_PREFIX + name: v for name, v in self.velocity.items()})
        state[EPOCH_KEY] = np.array([self.epoch], dtype=np.float64)
        return state

    def load_state(self, tensors: Dict[str, np.ndarray]) -> None:
        self.net.load_state(tensors)
        for name, p in self.net.params.items():
            key = VELOCITY_PREFIX + name
            self.velocity[name] = tensors[key].astype(p.dtype) if key in tensors else np.zeros_like(p)
        self.epoch = int(tensors[EPOCH_KEY][0]) if EPOCH_KEY in tensors else 0

    def save_checkpoint(self, path: Union[str, Path]) -> None:
        save_weights(path, self.state_tensors())

    def load_checkpoint(self, path: Union[str, Path]) -> None:
        self.load_state(load_weights(path))
        logger.info(f"Resumed {self.net.name} at epoch {self.epoch}")


def train_toy(net: NetworkGraph, dataset: ToyDataset, cfg: TrainConfig,
              resume_from: Optional[Union[str, Path]] = None) -> pd.DataFrame:
    """Per-epoch history (epoch, lr, loss, accuracy); deterministic given seeds and cfg"""
    trainer = ToyTrainer(net, dataset, cfg)
    if resume_from is not None:
        trainer.load_checkpoint(resume_from)
    return trainer.fit()


def plot_history(history: pd.DataFrame, path: Union[str, Path]) -> None:
    """Loss and accuracy curves to an image file"""
    import matplotlib
    matplotlib.use('Agg')
    import matplotlib.pyplot as plt

    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(10, 4))
    ax_loss.plot(history['epoch'], history['loss'], marker='o')
    ax_loss.set_xlabel('epoch')
    ax_loss.set_ylabel('loss')
    ax_acc.plot(history['epoch'], history['accuracy'], marker='o', color='tab:green')
    ax_acc.set_xlabel('epoch')
    ax_acc.set_ylabel('train accuracy')
    ax_acc.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    logger.info(f"Saved training curves to {path}")
