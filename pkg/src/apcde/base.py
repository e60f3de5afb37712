"""Augmented-posterior base density and the training objective.

The latent splits into one predictive block per head plus the nuisance
remainder. Every block has a standard normal prior; each head adds a
generalised-linear likelihood for its covariate, optionally raised to a power
``temper``. Conditioning on x gives

    log f(z | x) = log N(z) + sum_h [ loglik_h(x_h | zP_h) - log m_h(x_h) ]

where ``m_h(x) = E_{t ~ N(0, I)} f_h(x | t)`` is the head marginal.

Categorical labels are 1-based throughout (``1..n_classes``); the last class
has its logit pinned to zero.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .core import ops
from .core.tape import Tape, Var
from .errors import ArgumentError, ConfigurationError, NumericalError

LOG_2PI = math.log(2.0 * math.pi)


def log_std_normal(z):
    """Row-wise log N(z; 0, I) over the last axis."""
    d = ops.value(z).shape[-1]
    return ops.sub(-0.5 * d * LOG_2PI, ops.mul(0.5, ops.sum(ops.mul(z, z), axis=-1)))


class CategoricalHead:
    """Multinomial-logistic likelihood of a label given its z_P block."""

    kind = "categorical"

    def __init__(self, n_classes, dim, temper=1.0, free_intercept=False,
                 weight=None, intercept=None):
        if n_classes < 2:
            raise ConfigurationError("categorical head needs at least two classes")
        if not temper > 0:
            raise ConfigurationError("tempering power must be positive")
        self.n_classes, self.dim = int(n_classes), int(dim)
        self.temper = float(temper)
        self.free_intercept = bool(free_intercept)
        self.params = {
            "weight": np.zeros((n_classes - 1, dim)) if weight is None else np.array(weight, dtype=np.float64),
            "intercept": np.zeros(n_classes - 1) if intercept is None else np.array(intercept, dtype=np.float64),
        }
        if self.params["weight"].shape != (n_classes - 1, dim):
            raise ConfigurationError(f"weight must have shape {(n_classes - 1, dim)}")

    @property
    def pinned(self):
        return () if self.free_intercept else ("intercept",)

    @property
    def closed_form(self):
        return False

    def _codes(self, labels):
        labels = np.asarray(labels)
        if labels.ndim != 1:
            raise ArgumentError("categorical covariate must be a 1-D label array")
        if not np.all(np.equal(np.mod(labels, 1), 0)):
            raise ArgumentError("class labels must be integers")
        codes = labels.astype(np.intp) - 1
        if np.any(codes < 0) or np.any(codes >= self.n_classes):
            raise ArgumentError(f"class label outside 1..{self.n_classes}")
        return codes

    def logits(self, zp, params=None):
        """(n, K) class scores; the last column is identically zero."""
        p = self.params if params is None else params
        lin = ops.affine(zp, p["weight"], p["intercept"])
        return ops.concat([lin, np.zeros((ops.value(zp).shape[0], 1))], axis=1)

    def log_probs(self, zp, params=None):
        lg = self.logits(zp, params)
        return ops.mul(self.temper, ops.sub(lg, ops.logsumexp(lg, axis=1, keepdims=True)))

    def loglik(self, zp, labels, params=None):
        onehot = np.eye(self.n_classes)[self._codes(labels)]
        return ops.sum(ops.mul(self.log_probs(zp, params), onehot), axis=1)

    def log_marginal(self, labels, draws=None, params=None):
        if draws is None:
            raise ArgumentError("categorical marginal needs Monte-Carlo draws")
        codes = self._codes(labels)
        table = ops.logmeanexp(self.log_probs(draws, params), axis=0)
        return ops.take(table, codes, axis=0)

    def describe(self):
        return {"kind": self.kind, "n_classes": self.n_classes, "dim": self.dim,
                "temper": self.temper, "free_intercept": self.free_intercept}


class LinearGaussianHead:
    """x = intercept + loading @ zP + eps, eps ~ N(0, diag(variance)).

    Variances are stored as log-variances. With ``temper == 1`` the head
    marginal is Gaussian with covariance ``loading @ loading.T + diag(var)``.
    """

    kind = "linear_gaussian"

    def __init__(self, width, dim, temper=1.0, pin_variance=False, variance=1.0,
                 intercept=None, loading=None):
        if not temper > 0:
            raise ConfigurationError("tempering power must be positive")
        var = np.broadcast_to(np.asarray(variance, dtype=np.float64), (width,))
        if np.any(var <= 0):
            raise ConfigurationError("noise variances must be positive")
        self.width, self.dim = int(width), int(dim)
        self.temper = float(temper)
        self.pin_variance = bool(pin_variance)
        self.params = {
            "intercept": np.zeros(width) if intercept is None else np.array(intercept, dtype=np.float64),
            "loading": np.zeros((width, dim)) if loading is None else np.array(loading, dtype=np.float64),
            "log_variance": np.log(var).copy(),
        }
        if self.params["loading"].shape != (width, dim):
            raise ConfigurationError(f"loading must have shape {(width, dim)}")

    @property
    def pinned(self):
        return ("log_variance",) if self.pin_variance else ()

    @property
    def closed_form(self):
        return self.temper == 1.0

    @property
    def variance(self):
        return np.exp(self.params["log_variance"])

    def _x(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None] if self.width == 1 else x[None, :]
        if x.shape[-1] != self.width:
            raise ArgumentError(f"continuous covariate must have width {self.width}")
        return x

    def _gauss(self, resid, p, axis):
        sq = ops.mul(ops.mul(resid, resid), ops.exp(ops.neg(p["log_variance"])))
        terms = ops.add(ops.mul(0.5, p["log_variance"]), ops.mul(0.5, sq))
        return ops.mul(self.temper, ops.sub(-0.5 * LOG_2PI * self.width, ops.sum(terms, axis=axis)))

    def loglik(self, zp, x, params=None):
        p = self.params if params is None else params
        mean = ops.affine(zp, p["loading"], p["intercept"])
        return self._gauss(ops.sub(self._x(x), mean), p, axis=1)

    def log_marginal(self, x, draws=None, params=None, method="auto"):
        p = self.params if params is None else params
        x = self._x(x)
        if method == "closed" or (method == "auto" and self.closed_form):
            if not self.closed_form:
                raise ArgumentError("closed-form marginal requires temper == 1")
            load = p["loading"]
            cov = ops.add(ops.matmul(load, ops.transpose(load)),
                          ops.mul(np.eye(self.width), ops.exp(p["log_variance"])))
            resid = ops.sub(x, p["intercept"])
            quad = ops.sum(ops.mul(ops.matmul(resid, ops.inv(cov)), resid), axis=1)
            return ops.mul(-0.5, ops.add(ops.add(quad, ops.logdet(cov)), self.width * LOG_2PI))
        if draws is None:
            raise ArgumentError("Monte-Carlo marginal needs draws")
        t = ops.value(draws).shape[0]
        mean = ops.reshape(ops.affine(draws, p["loading"], p["intercept"]), (t, 1, self.width))
        resid = ops.sub(x[None, :, :], mean)
        ll = self._gauss(resid, p, axis=2)
        return ops.logmeanexp(ll, axis=0)

    def describe(self):
        return {"kind": self.kind, "width": self.width, "dim": self.dim,
                "temper": self.temper, "pin_variance": self.pin_variance}


def head_from_description(d, params=None):
    d = dict(d)
    kind = d.pop("kind")
    if kind == "categorical":
        head = CategoricalHead(d["n_classes"], d["dim"], d.get("temper", 1.0),
                               d.get("free_intercept", False))
    elif kind == "linear_gaussian":
        head = LinearGaussianHead(d["width"], d["dim"], d.get("temper", 1.0),
                                  d.get("pin_variance", False))
    else:
        raise ConfigurationError(f"unknown head kind {kind!r}")
    if params:
        for k in head.params:
            if k in params:
                head.params[k] = np.array(params[k], dtype=np.float64)
    return head


def _single(head, x):
    """Wrap one item's covariate as a batch of one."""
    if head.kind == "categorical":
        return np.atleast_1d(x)
    return np.asarray(x, dtype=np.float64).reshape(1, -1)


def loglik_head(head, x, zp):
    """Tempered log-likelihood of ``x`` given ``zp`` (single item or batch)."""
    zp = np.asarray(zp, dtype=np.float64)
    if zp.ndim == 1:
        return float(head.loglik(zp[None, :], _single(head, x))[0])
    return head.loglik(zp, x)


def log_marginal(head, x, mc_samples, rng, method="auto"):
    """log E_t f(x | t), t ~ N(0, I_d), for one item: closed form when available, else MC."""
    if mc_samples < 1:
        raise ArgumentError("need at least one Monte-Carlo sample")
    if head.kind == "categorical":
        return float(head.log_marginal(_single(head, x), rng.standard_normal((mc_samples, head.dim)))[0])
    draws = None
    if method == "mc" or not head.closed_form:
        draws = rng.standard_normal((mc_samples, head.dim))
    return float(head.log_marginal(_single(head, x), draws, method=method)[0])


@dataclass
class AugmentedBase:
    """Heads (one per z_P block of the layout) and the MC sample count."""

    heads: List[object] = field(default_factory=list)
    mc_samples: int = 1000

    def __post_init__(self):
        if self.mc_samples < 1:
            raise ConfigurationError("mc_samples must be at least 1")

    def check_layout(self, layout):
        if layout.widths != [h.dim for h in self.heads]:
            raise ConfigurationError(
                f"layout blocks {layout.widths} do not match head widths {[h.dim for h in self.heads]}")

    def params(self):
        return {f"head{i}.{k}": v for i, h in enumerate(self.heads) for k, v in h.params.items()}

    def pinned(self):
        return {f"head{i}.{k}" for i, h in enumerate(self.heads) for k in h.pinned}

    def set_params(self, values):
        for i, h in enumerate(self.heads):
            for k in h.params:
                key = f"head{i}.{k}"
                if key in values:
                    h.params[k] = np.array(values[key], dtype=np.float64)

    def bind(self, tape: Optional[Tape]):
        if tape is None:
            return [None] * len(self.heads)
        return [{k: (v if k in h.pinned else tape.param(f"head{i}.{k}", v))
                 for k, v in h.params.items()} for i, h in enumerate(self.heads)]

    def draw(self, rng, mc_samples=None):
        """Shared MC draws for one evaluation; ``None`` for closed-form heads."""
        m = self.mc_samples if mc_samples is None else mc_samples
        return [None if h.closed_form else rng.standard_normal((m, h.dim)) for h in self.heads]

    def check_x(self, x):
        if len(x) != len(self.heads):
            raise ArgumentError(f"expected {len(self.heads)} covariates, got {len(x)}")

    def describe(self):
        return {"mc_samples": self.mc_samples, "heads": [h.describe() for h in self.heads]}

    @classmethod
    def from_description(cls, d, params=None):
        heads = []
        for i, hd in enumerate(d["heads"]):
            hp = None
            if params is not None:
                pre = f"head{i}."
                hp = {k[len(pre):]: v for k, v in params.items() if k.startswith(pre)}
            heads.append(head_from_description(hd, hp))
        return cls(heads, d.get("mc_samples", 1000))


def _head_terms(base, zps, x, draws, bound):
    """Per-head ``loglik - log_marginal`` summed over heads (n,)."""
    total = 0.0
    for h, head in enumerate(base.heads):
        ll = head.loglik(zps[h], x[h], bound[h])
        lm = head.log_marginal(x[h], draws[h], bound[h])
        total = ops.add(total, ops.sub(ll, lm))
    return total


def log_aug_posterior(base: AugmentedBase, layout, z, x, rng=None, draws=None):
    """log f(z | x) under the augmented posterior, one value per row of ``z``."""
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    if single:
        z = z[None, :]
        x = [_single(h, xi) for h, xi in zip(base.heads, x)]
    base.check_x(x)
    base.check_layout(layout)
    if draws is None:
        draws = base.draw(rng if rng is not None else np.random.default_rng(0))
    zps, zn = layout.partition(z)
    out = log_std_normal(zn)
    for h, head in enumerate(base.heads):
        ll = head.loglik(zps[h], x[h])
        lm = head.log_marginal(x[h], draws[h])
        out = out + log_std_normal(zps[h]) + ll - lm
    return float(out[0]) if single else out


def apcde_terms(model, base: AugmentedBase, y, x, rng=None, draws=None, tape: Optional[Tape] = None):
    """Per-sample negative conditional log-density (n,)."""
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 2 or y.shape[0] == 0:
        raise ArgumentError("batch must be a non-empty (n, p) array")
    base.check_x(x)
    base.check_layout(model.layout)
    if draws is None:
        if rng is None and not all(h.closed_form for h in base.heads):
            raise ArgumentError("an rng or explicit draws are required for Monte-Carlo marginals")
        draws = base.draw(rng)
    z, logdet = model.forward(y, tape)
    zps = [ops.take(z, b) for b in model.layout.blocks]
    logp = ops.add(log_std_normal(z), logdet)
    if base.heads:
        logp = ops.add(logp, _head_terms(base, zps, x, draws, base.bind(tape)))
    return ops.neg(logp)


def apcde_loss(model, base: AugmentedBase, y, x, rng=None, draws=None, tape: Optional[Tape] = None):
    """Batch mean of the negative conditional log-density.

    MC draws for non-closed-form heads are taken once from ``rng`` and shared
    across the batch unless ``draws`` is given. Returns a float, or a scalar
    :class:`Var` when ``tape`` is given.
    """
    terms = apcde_terms(model, base, y, x, rng, draws, tape)
    vals = ops.value(terms)
    bad = np.flatnonzero(~np.isfinite(vals))
    if bad.size:
        raise NumericalError(f"non-finite loss at batch sample {int(bad[0])}")
    loss = ops.mul(1.0 / vals.shape[0], ops.sum(terms))
    return loss if isinstance(loss, Var) else float(loss)
