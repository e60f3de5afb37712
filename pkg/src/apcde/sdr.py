"""Sufficiency check for the predictive block.

Each observation is re-synthesised with its z_P held fixed and z_N redrawn;
a probe classifier that was trained on (y, x) pairs alone then labels the
synthetic responses. The agreement rate with the observed labels measures how
much of the label information z_P carries.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from .core import ops
from .core.tape import Tape, gradient_of
from .errors import ArgumentError, DegenerateDataError
from .inference import embed, generate_fixed_zp
from .training import AdamState, TrainConfig, adam_step


@dataclass
class ProbeConfig:
    kind: str = "logistic"        # or "mlp"
    hidden: int = 32
    epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-2
    holdout: float = 0.2
    seed: int = 0


@dataclass
class ProbeClassifier:
    kind: str
    n_classes: int
    params: Dict[str, np.ndarray]
    mean: np.ndarray
    std: np.ndarray
    metadata: Dict[str, object] = field(default_factory=dict)

    @property
    def input_width(self):
        return self.mean.size

    def logits(self, y, params=None):
        p = self.params if params is None else params
        h = (np.asarray(y, dtype=np.float64) - self.mean) / self.std
        if self.kind == "mlp":
            h = ops.tanh(ops.affine(h, p["W0"], p["b0"]))
            return ops.affine(h, p["W1"], p["b1"])
        return ops.affine(h, p["W0"], p["b0"])

    def predict(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        if y.shape[-1] != self.input_width:
            raise ArgumentError(f"probe expects width {self.input_width}, got {y.shape[-1]}")
        return np.argmax(self.logits(y.reshape(-1, self.input_width)), axis=1).reshape(y.shape[:-1]) + 1

    def accuracy(self, y, labels) -> float:
        return float(np.mean(self.predict(y) == np.asarray(labels)))


def _label_column(dataset, column):
    if column is None:
        cats = [i for i, s in enumerate(dataset.schema) if s.kind == "categorical"]
        if not cats:
            raise ArgumentError("dataset has no categorical covariate")
        column = cats[0]
    return dataset.x[column], dataset.schema[column].n_classes


def train_probe(dataset, config: Optional[ProbeConfig] = None, column=None) -> ProbeClassifier:
    """Softmax classifier of the label from y alone, with a held-out split."""
    config = config or ProbeConfig()
    labels, k = _label_column(dataset, column)
    if np.unique(labels).size < 2:
        raise DegenerateDataError("probe training needs at least two distinct labels")
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(dataset.n)
    n_hold = int(round(config.holdout * dataset.n))
    hold, fit = order[:n_hold], order[n_hold:]
    y = dataset.y
    mean = y[fit].mean(axis=0)
    std = y[fit].std(axis=0)
    std = np.where(std > 0, std, 1.0)
    p = y.shape[1]
    if config.kind == "mlp":
        params = {"W0": rng.normal(0, 1 / math.sqrt(p), (config.hidden, p)), "b0": np.zeros(config.hidden),
                  "W1": rng.normal(0, 1 / math.sqrt(config.hidden), (k, config.hidden)), "b1": np.zeros(k)}
    elif config.kind == "logistic":
        params = {"W0": np.zeros((k, p)), "b0": np.zeros(k)}
    else:
        raise ArgumentError(f"unknown probe kind {config.kind!r}")
    probe = ProbeClassifier(config.kind, k, params, mean, std)
    adam_cfg = TrainConfig(epochs=1, warmup_epochs=0)
    state = AdamState()
    onehot = np.eye(k)[labels - 1]
    for _ in range(config.epochs):
        perm = fit[rng.permutation(fit.size)]
        for s in range(0, perm.size, config.batch_size):
            idx = perm[s:s + config.batch_size]
            tape = Tape()
            bound = {name: tape.param(name, v) for name, v in probe.params.items()}
            lg = probe.logits(y[idx], bound)
            logp = ops.sub(lg, ops.logsumexp(lg, axis=1, keepdims=True))
            loss = ops.mul(-1.0 / idx.size, ops.sum(ops.mul(logp, onehot[idx])))
            probe.params = adam_step(probe.params, gradient_of(tape, loss), state, config.lr, adam_cfg)
    probe.metadata = {"seed": config.seed, "epochs": config.epochs,
                      "holdout_accuracy": probe.accuracy(y[hold], labels[hold]) if n_hold else None,
                      "train_accuracy": probe.accuracy(y[fit], labels[fit])}
    return probe


def regenerate(model, y, n_draws, rng) -> np.ndarray:
    """``(n, n_draws, p)`` responses sharing each row's z_P with fresh z_N."""
    zps, _ = embed(model, np.asarray(y, dtype=np.float64))
    out = np.empty((zps[0].shape[0] if zps else len(y), n_draws, model.dims))
    for i in range(out.shape[0]):
        out[i] = generate_fixed_zp(model, [zp[i] for zp in zps], n_draws, rng)
    return out


@dataclass
class SDRResult:
    observed: np.ndarray        # (n,)
    predicted: np.ndarray       # (n, J)

    @property
    def agreement_counts(self) -> np.ndarray:
        return np.sum(self.predicted == self.observed[:, None], axis=1)

    @property
    def rate(self) -> float:
        return float(self.agreement_counts.sum() / self.predicted.size)

    def to_csv(self, path):
        j = self.predicted.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", "observed"] + [f"pred{r}" for r in range(j)] + ["agreement"])
            for i, (obs, preds, cnt) in enumerate(zip(self.observed, self.predicted, self.agreement_counts)):
                w.writerow([i, int(obs), *map(int, preds), int(cnt)])


def probe_agreement(probe: ProbeClassifier, regenerated, observed) -> SDRResult:
    """Score stored synthetic responses; needs nothing from the flow."""
    return SDRResult(np.asarray(observed), probe.predict(regenerated))


def sdr_result(model, probe, dataset, n_draws=10, rng=None, column=None) -> SDRResult:
    rng = rng if rng is not None else np.random.default_rng(0)
    labels, _ = _label_column(dataset, column)
    return probe_agreement(probe, regenerate(model, dataset.y, n_draws, rng), labels)


def sdr_agreement(model, base, probe, dataset, n_draws=10, rng=None, column=None) -> float:
    """Fraction of regenerated responses the probe assigns to the observed label."""
    if n_draws < 1:
        raise ArgumentError("n_draws must be at least 1")
    if base is not None:
        base.check_layout(model.layout)
    return sdr_result(model, probe, dataset, n_draws, rng, column).rate
