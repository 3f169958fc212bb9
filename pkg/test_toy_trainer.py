#!/usr/bin/env python3
"""
Tests for SGD, the learning-rate schedule, the auxiliary loss and toy training
"""

import math

import numpy as np
import pandas as pd
import pytest

from network_builder import ConfigError, build_classification_net
from nn_ops import softmax_cross_entropy
from tensor_utils import ShapeError, philox_generator
from toy_trainer import (ToyTrainer, TrainConfig, accuracy, combined_loss, lr_at, make_toy_dataset, plot_history,
                         sgd_step, train_toy)


def tiny_net(width_divisor=16):
    return build_classification_net('pyconvresnet', 50, num_classes=10, width_divisor=width_divisor)


def test_lr_schedule():
    cfg = TrainConfig()
    assert lr_at(0, cfg) == 0.1
    assert lr_at(29, cfg) == 0.1
    assert lr_at(30, cfg) == pytest.approx(0.01)
    assert lr_at(85, cfg) == pytest.approx(1e-4)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(milestones=(60, 30))
    with pytest.raises(ConfigError):
        TrainConfig(base_lr=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(momentum=1.0)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)


def test_sgd_zero_gradient_without_decay_is_a_no_op():
    cfg = TrainConfig(weight_decay=0.0)
    params = {'w': np.array([1.0, -2.0])}
    velocity = {'w': np.zeros(2)}
    sgd_step(params, {'w': np.zeros(2)}, velocity, 0.1, cfg)
    assert params['w'].tolist() == [1.0, -2.0]


def test_sgd_first_step():
    cfg = TrainConfig()
    p0, g = np.array([0.5, -1.5]), np.array([0.25, 2.0])
    params, velocity = {'w': p0.copy()}, {'w': np.zeros(2)}
    sgd_step(params, {'w': g}, velocity, 0.1, cfg)
    assert np.allclose(params['w'], p0 - 0.1 * (g + 1e-4 * p0))
    assert np.allclose(velocity['w'], g + 1e-4 * p0)


def test_sgd_two_steps_on_a_quadratic():
    """f(p) = p^2 / 2 so g = p; hand-unrolled momentum recurrence"""
    cfg = TrainConfig()
    lr, m, wd = 0.1, cfg.momentum, cfg.weight_decay
    params, velocity = {'p': np.array([1.0])}, {'p': np.array([0.0])}
    p, v = 1.0, 0.0
    for _ in range(2):
        sgd_step(params, {'p': params['p'].copy()}, velocity, lr, cfg)
        v = m * v + (p + wd * p)
        p = p - lr * v
    assert params['p'][0] == pytest.approx(p, rel=1e-12)
    assert velocity['p'][0] == pytest.approx(v, rel=1e-12)


def test_sgd_shape_mismatch():
    with pytest.raises(ShapeError):
        sgd_step({'w': np.zeros(2)}, {'w': np.zeros(3)}, {'w': np.zeros(2)}, 0.1, TrainConfig())


def test_combined_loss():
    logits = philox_generator(0).standard_normal((4, 5))
    labels = np.array([0, 1, 2, 3])
    main_loss, main_grad = softmax_cross_entropy(logits, labels)

    loss, grad, aux_grad = combined_loss(logits, logits, labels, 0.0)
    assert loss == pytest.approx(main_loss)
    assert not aux_grad.any()

    loss, grad, aux_grad = combined_loss(logits, logits, labels, 0.4)
    assert loss == pytest.approx(1.4 * main_loss)
    assert np.allclose(grad, main_grad)
    assert np.allclose(aux_grad, 0.4 * main_grad)

    loss, _, aux_grad = combined_loss(logits, None, labels, 0.4)
    assert loss == pytest.approx(main_loss) and aux_grad is None


def test_toy_dataset():
    a = make_toy_dataset(seed=3, n_per_class=4)
    b = make_toy_dataset(seed=3, n_per_class=4)
    assert a.images.shape == (40, 3, 32, 32)
    assert np.array_equal(a.images, b.images)
    assert np.bincount(a.labels).tolist() == [4] * 10
    assert not np.array_equal(a.images, make_toy_dataset(seed=4, n_per_class=4).images)
    means = np.stack([a.images[a.labels == k].mean(axis=0).reshape(-1) for k in range(10)])
    gaps = np.linalg.norm(means[:, None] - means[None], axis=-1)
    assert gaps[~np.eye(10, dtype=bool)].min() > 0


def test_accuracy():
    logits = np.array([[1.0, 0.0], [0.0, 1.0], [2.0, 0.0]])
    assert accuracy(logits, np.array([0, 1, 1])) == pytest.approx(2 / 3)


def test_initial_loss_is_near_uniform():
    """Small classifier weights give logits near zero, so the loss starts at about ln 10"""
    net = tiny_net(8).initialize(0)
    data = make_toy_dataset(seed=0, n_per_class=2)
    loss, _ = softmax_cross_entropy(net.forward(data.images, training=True)['main'], data.labels)
    assert loss == pytest.approx(math.log(10), abs=0.1)


def test_resume_matches_straight_run(tmp_path):
    cfg = TrainConfig(epochs=2, batch_size=8, milestones=(1,), seed=5)
    data = make_toy_dataset(seed=1, n_per_class=2, size=16)

    straight = ToyTrainer(tiny_net(), data, cfg)
    history = straight.fit()
    assert list(history.columns) == ['epoch', 'lr', 'loss', 'accuracy']
    assert history['lr'].tolist() == [lr_at(0, cfg), lr_at(1, cfg)]

    first = ToyTrainer(tiny_net(), data, cfg)
    first.fit(1)
    checkpoint = tmp_path / 'epoch1.pycv'
    first.save_checkpoint(checkpoint)

    resumed_net = tiny_net()
    rest = train_toy(resumed_net, data, cfg, resume_from=checkpoint)
    assert rest['epoch'].tolist() == [1]
    assert rest['loss'].iloc[0] == history['loss'].iloc[1]
    for name, value in straight.net.params.items():
        assert np.array_equal(resumed_net.params[name], value), name


def test_plot_history(tmp_path):
    history = pd.DataFrame({'epoch': [0, 1], 'lr': [0.1, 0.1], 'loss': [2.3, 1.9], 'accuracy': [0.1, 0.3]})
    path = tmp_path / 'curves.png'
    plot_history(history, path)
    assert path.stat().st_size > 0


@pytest.mark.slow
def test_toy_pyconvresnet_fits_gratings():
    cfg = TrainConfig(epochs=30, batch_size=32, seed=0)
    data = make_toy_dataset(seed=0, n_per_class=32)
    history = train_toy(tiny_net(8), data, cfg)
    assert len(history) == 30
    assert history['accuracy'].iloc[-1] >= 0.9
    assert history['lr'].tolist() == [lr_at(e, cfg) for e in range(30)]
