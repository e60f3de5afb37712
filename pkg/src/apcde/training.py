"""Mini-batch Adam on the augmented-posterior objective with a linear warmup
followed by cosine annealing."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional

import numpy as np

from .base import AugmentedBase, apcde_loss
from .core.tape import Tape, gradient_of
from .errors import ConfigurationError, DivergenceError, NumericalError

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 64
    peak_lr: float = 5e-4
    warmup_epochs: int = 10
    final_lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    mc_samples: int = 1000
    seed: int = 0
    clip_norm: Optional[float] = None
    # redraw dequantisation noise every epoch (needs a dataset with integer pixels)
    redequantize: bool = False

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("epochs must be >= 0 and batch_size >= 1")
        if not (self.peak_lr > 0 and self.final_lr > 0 and self.eps > 0):
            raise ConfigurationError("learning rates and eps must be positive")
        if self.epochs and not self.warmup_epochs < self.epochs:
            raise ConfigurationError("warmup_epochs must be smaller than epochs")
        if self.mc_samples < 1:
            raise ConfigurationError("mc_samples must be at least 1")

    def to_dict(self):
        return asdict(self)


def lr_at(step: int, total_steps: int, config: TrainConfig) -> float:
    """Learning rate for 0-based ``step``.

    Warmup spans ``warmup_epochs`` worth of steps and ends exactly at the peak;
    the cosine phase then decays towards ``final_lr``.
    """
    warm = config.warmup_epochs * (total_steps // config.epochs) if config.epochs else 0
    if step < warm:
        return config.peak_lr * (step + 1) / warm
    span = total_steps - warm
    frac = (step - warm) / span
    return config.final_lr + 0.5 * (config.peak_lr - config.final_lr) * (1.0 + math.cos(math.pi * frac))


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamState,
              lr: float, config: TrainConfig) -> Dict[str, np.ndarray]:
    """Return updated parameters; ``state`` is advanced in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name}")
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    out = dict(params)
    for name, g in grads.items():
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        out[name] = params[name] - lr * m_hat / (np.sqrt(v_hat) + config.eps)
    return out


def clip_global_norm(grads, max_norm):
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total <= max_norm or total == 0.0:
        return grads
    return {k: g * (max_norm / total) for k, g in grads.items()}


def train(model, base: AugmentedBase, dataset, config: TrainConfig, log_path=None):
    """Fit ``model`` and ``base`` in place and return a :class:`Checkpoint`.

    All randomness (epoch shuffles, MC draws) comes from one generator seeded
    with ``config.seed``; actnorm layers are initialised from the first batch
    before the first update.
    """
    from .checkpoint import Checkpoint

    y = dataset.y
    x = dataset.x
    n = y.shape[0]
    base.check_x(x)
    base.check_layout(model.layout)
    base.mc_samples = config.mc_samples
    if config.redequantize and dataset.pixels is None:
        raise ConfigurationError("redequantize needs a dataset that keeps its integer pixels")
    rng = np.random.default_rng(config.seed)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total = config.epochs * steps_per_epoch
    pinned = base.pinned()
    state = AdamState()
    losses, lines = [], []
    bad_streak = 0
    step = 0
    order = rng.permutation(n)
    if not model.initialized:
        model.initialize_actnorm(y[order[:config.batch_size]])
    sink = open(log_path, "w") if log_path else None
    try:
        for epoch in range(config.epochs):
            if epoch > 0:
                order = rng.permutation(n)
                if config.redequantize:
                    y = dataset.redequantize(rng)
            batch_losses, batch_sizes = [], []
            lr = config.peak_lr
            for s in range(steps_per_epoch):
                idx = order[s * config.batch_size:(s + 1) * config.batch_size]
                lr = lr_at(step, total, config)
                step += 1
                tape = Tape()
                try:
                    loss = apcde_loss(model, base, y[idx], [xi[idx] for xi in x], rng=rng, tape=tape)
                    grads = gradient_of(tape, loss)
                    if config.clip_norm:
                        grads = clip_global_norm(grads, config.clip_norm)
                    params = {**model.params(),
                              **{k: v for k, v in base.params().items() if k not in pinned}}
                    updated = adam_step(params, grads, state, lr, config)
                except NumericalError as exc:
                    bad_streak += 1
                    log.warning("epoch %d step %d skipped: %s", epoch, s, exc)
                    if bad_streak >= 3:
                        raise DivergenceError(
                            f"loss non-finite for 3 consecutive steps (epoch {epoch})", lines) from exc
                    continue
                bad_streak = 0
                model.set_params(updated)
                base.set_params(updated)
                batch_losses.append(float(loss.value))
                batch_sizes.append(idx.size)
            mean = float(np.average(batch_losses, weights=batch_sizes)) if batch_losses else float("nan")
            losses.append(mean)
            line = f"{epoch} {mean!r} {lr!r}"
            lines.append(line)
            log.info("epoch %d loss %.6f lr %.3g", epoch, mean, lr)
            if sink:
                sink.write(line + "\n")
                sink.flush()
    finally:
        if sink:
            sink.close()
    return Checkpoint(model, base, list(dataset.schema), config.to_dict(), losses,
                      {"steps": step, "n_train": n, "provenance": dataset.provenance})
