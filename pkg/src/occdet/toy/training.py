"""SGD with a one-cycle learning-rate schedule for :class:`ToyDetector`."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import DivergedLoss
from .evaluation import Metrics, evaluate_detections


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 12
    batch_size: int = 8
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    pct_start: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4
    optimizer: str = "sgd"
    beta2: float = 0.99
    eps: float = 1e-8
    seed: int = 0


def one_cycle_lr(step: int, total: int, max_lr: float, pct_start: float = 0.3,
                 div_factor: float = 25.0, final_div_factor: float = 1e4) -> float:
    """Cosine warm-up from max_lr/div_factor to max_lr, then cosine decay to
    max_lr/(div_factor*final_div_factor)."""
    start = max_lr / div_factor
    end = start / final_div_factor
    up = max(int(pct_start * total), 1)
    if step < up:
        t = step / up
        return start + (max_lr - start) * (1 - math.cos(math.pi * t)) / 2
    t = (step - up) / max(total - up, 1)
    return end + (max_lr - end) * (1 + math.cos(math.pi * min(t, 1.0))) / 2


def epochs_to_converge(loss_curve, threshold: float):
    """First 1-based epoch from which every later loss is <= threshold.

    The final epoch alone cannot establish convergence (nothing confirms it
    stays), so a curve that only dips at its end, or a single-epoch curve,
    reports ``None``.
    """
    n = len(loss_curve)
    first = None
    for e in range(n - 1, -1, -1):
        if loss_curve[e] <= threshold:
            first = e
        else:
            break
    if first is None or first >= n - 1:
        return None
    return first + 1


def evaluate(detector, scenes) -> Metrics:
    """Per-tier AP of ``detector`` on ``scenes``."""
    if not scenes:
        raise ValueError("evaluate needs at least one scene")
    return evaluate_detections(scenes, [detector.predict(s.image) for s in scenes])


def train(detector, scenes, config: TrainConfig, eval_scenes=None, threshold: float | None = None,
          on_epoch=None) -> Metrics:
    """Train in place; returns metrics with the per-epoch mean training loss.

    ``threshold`` sets the convergence loss level (defaults to 1.10 x this
    run's best epoch loss).
    """
    rng = np.random.default_rng([config.seed, 7])
    params = detector.named_params()
    velocity = [np.zeros_like(p) for _, p, _ in params]
    second = [np.zeros_like(p) for _, p, _ in params]
    steps_per_epoch = math.ceil(len(scenes) / config.batch_size)
    total = config.epochs * steps_per_epoch
    step = 0
    curve = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(scenes))
        epoch_loss = 0.0
        for start in range(0, len(scenes), config.batch_size):
            batch = order[start:start + config.batch_size]
            acc = [np.zeros_like(p) for _, p, _ in params]
            for i in batch:
                loss, grads = detector.loss_and_grads(scenes[i], rng)
                if not math.isfinite(loss):
                    raise DivergedLoss(f"non-finite loss at epoch {epoch + 1}", seed=config.seed)
                epoch_loss += loss
                for a, g in zip(acc, grads):
                    a += g
            lr = one_cycle_lr(step, total, config.lr, config.pct_start, config.div_factor, config.final_div_factor)
            if config.optimizer == "adam":
                b1, b2 = config.momentum, config.beta2
                for (_, p, _), m, s, g in zip(params, velocity, second, acc):
                    g = g / len(batch)
                    m *= b1
                    m += (1 - b1) * g
                    s *= b2
                    s += (1 - b2) * g * g
                    m_hat = m / (1 - b1 ** (step + 1))
                    s_hat = s / (1 - b2 ** (step + 1))
                    p -= lr * (m_hat / (np.sqrt(s_hat) + config.eps) + config.weight_decay * p)
            else:
                for (_, p, _), v, g in zip(params, velocity, acc):
                    g = g / len(batch) + config.weight_decay * p
                    v *= config.momentum
                    v += g
                    p -= lr * v
            detector.params_updated()
            step += 1
        curve.append(epoch_loss / len(scenes))
        if on_epoch is not None:
            on_epoch(epoch + 1, curve[-1])
    metrics = evaluate(detector, eval_scenes if eval_scenes is not None else scenes)
    metrics.loss_curve = curve
    metrics.rng_state = rng.bit_generator.state
    if curve:
        level = threshold if threshold is not None else 1.10 * min(curve)
        metrics.epochs_to_converge = epochs_to_converge(curve, level)
    return metrics
