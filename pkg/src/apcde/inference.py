"""Post-training estimators: densities, bits per dimension, embeddings,
classification and sampling."""
from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import integrate

from .base import AugmentedBase, CategoricalHead, LinearGaussianHead, _single, log_std_normal
from .errors import ArgumentError, ConfigurationError

INFERENCE_MC_SAMPLES = 100_000
_CHUNK = 4096


def _batch(y):
    y = np.asarray(y, dtype=np.float64)
    return (y[None, :], True) if y.ndim == 1 else (y, False)


def embed(model, y):
    """``(zP blocks, zN)`` for each row of ``y``."""
    z, _ = model.forward(y)
    return model.layout.partition(z)


def log_marg_density(model, base: AugmentedBase, y):
    """log f(y): standard normal over the whole latent plus the log-Jacobian.

    ``base`` is unused: the covariates integrate out exactly.
    """
    yb, single = _batch(y)
    z, logdet = model.forward(yb)
    out = log_std_normal(z) + logdet
    return float(out[0]) if single else out


def _marginal_draws(base, seed, mc_samples):
    rng = np.random.default_rng(seed)
    return [None if h.closed_form else rng.standard_normal((mc_samples, h.dim)) for h in base.heads]


def log_cond_density(model, base: AugmentedBase, y, x, seed=0, mc_samples=INFERENCE_MC_SAMPLES):
    """log f(y | x). Head marginals are closed form where possible, otherwise
    a Monte-Carlo estimate from ``seed`` shared by every row."""
    yb, single = _batch(y)
    if single:
        x = [_single(h, xi) for h, xi in zip(base.heads, x)]
    base.check_x(x)
    base.check_layout(model.layout)
    draws = _marginal_draws(base, seed, mc_samples)
    out = np.empty(yb.shape[0])
    for lo in range(0, yb.shape[0], _CHUNK):
        sl = slice(lo, lo + _CHUNK)
        z, logdet = model.forward(yb[sl])
        zps, _ = model.layout.partition(z)
        val = log_std_normal(z) + logdet
        for h, head in enumerate(base.heads):
            xh = x[h][sl]
            val = val + head.loglik(zps[h], xh) - head.log_marginal(xh, draws[h])
        out[sl] = val
    return float(out[0]) if single else out


def bits_per_dim(model, base, y, scale_divisor=256.0, base2=True):
    """-log f(y) / p plus the offset log(scale_divisor) for data that was
    divided by ``scale_divisor``; in bits unless ``base2`` is False (nats)."""
    if not scale_divisor > 0:
        raise ArgumentError("scale_divisor must be positive")
    lm = log_marg_density(model, base, y)
    p = model.dims
    nats = -np.asarray(lm) / p + math.log(scale_divisor)
    out = nats / math.log(2.0) if base2 else nats
    return float(out) if np.ndim(out) == 0 else out


def _categorical_index(base, head=None):
    cats = [i for i, h in enumerate(base.heads) if isinstance(h, CategoricalHead)]
    if head is not None:
        if head not in cats:
            raise ConfigurationError(f"head {head} is not categorical")
        return head
    if len(cats) != 1:
        raise ConfigurationError(f"classification needs exactly one categorical head, found {len(cats)}")
    return cats[0]


def classify(model, base, y, head=None):
    """Arg-max label (1-based) of the categorical head at each row's z_P.

    Returns ``(labels, ties)``; ties go to the lowest class with the flag set.
    """
    h = _categorical_index(base, head)
    yb, single = _batch(y)
    zps, _ = embed(model, yb)
    logits = base.heads[h].logits(zps[h])
    best = logits.max(axis=1, keepdims=True)
    labels = np.argmax(logits, axis=1) + 1
    ties = np.sum(logits == best, axis=1) > 1
    if single:
        return int(labels[0]), bool(ties[0])
    return labels, ties


def sample_uncond(model, n, rng):
    if n < 1:
        raise ArgumentError("n must be at least 1")
    return model.inverse(rng.standard_normal((n, model.dims)))


def generate_fixed_zp(model, zps: Sequence, n_draws, rng):
    """Hold every z_P block fixed, draw fresh z_N, and invert the flow.

    Returns an ``(n_draws, p)`` array.
    """
    if n_draws < 1:
        raise ArgumentError("n_draws must be at least 1")
    layout = model.layout
    if len(zps) != len(layout.blocks):
        raise ConfigurationError(f"need {len(layout.blocks)} z_P blocks, got {len(zps)}")
    fixed = []
    for zp, b in zip(zps, layout.blocks):
        zp = np.asarray(zp, dtype=np.float64).reshape(-1)
        if zp.size != b.size:
            raise ConfigurationError(f"z_P block width {zp.size} != layout width {b.size}")
        fixed.append(np.broadcast_to(zp, (n_draws, b.size)))
    zn = rng.standard_normal((n_draws, layout.zn.size))
    return model.inverse(layout.assemble(fixed, zn))


def zp_for_covariate(head: LinearGaussianHead, target):
    """z_P whose regression mean equals ``target`` (least-squares for wide heads)."""
    target = np.asarray(target, dtype=np.float64).reshape(-1)
    return np.linalg.pinv(head.params["loading"]) @ (target - head.params["intercept"])


def class_marginals(head: CategoricalHead, seed=0, mc_samples=INFERENCE_MC_SAMPLES):
    """m(k) = E_{t ~ N(0, I)} p(k | t) for every class.

    Adaptive quadrature for d = 1, a Simpson grid on [-8, 8]^2 for d = 2 and
    Monte Carlo otherwise.
    """
    k = head.n_classes
    if head.dim == 1:
        def integrand(t, c):
            lp = head.log_probs(np.array([[t]]), None)[0, c]
            return math.exp(lp) * math.exp(-0.5 * t * t) / math.sqrt(2 * math.pi)
        return np.array([integrate.quad(integrand, -12, 12, args=(c,), epsabs=1e-13,
                                        epsrel=1e-12, limit=400)[0] for c in range(k)])
    if head.dim == 2:
        g = np.linspace(-8.0, 8.0, 1601)
        t1, t2 = np.meshgrid(g, g, indexing="ij")
        pts = np.column_stack([t1.ravel(), t2.ravel()])
        dens = np.exp(head.log_probs(pts, None) + log_std_normal(pts)[:, None])
        dens = dens.reshape(g.size, g.size, k)
        return integrate.simpson(integrate.simpson(dens, x=g, axis=0), x=g, axis=0)
    draws = np.random.default_rng(seed).standard_normal((mc_samples, head.dim))
    return np.exp(head.log_probs(draws, None)).mean(axis=0)


def fingerprint(model, base) -> str:
    h = hashlib.sha256()
    for params in (model.params(), base.params()):
        for name in params:
            h.update(name.encode())
            h.update(np.ascontiguousarray(params[name], dtype="<f8").tobytes())
    return h.hexdigest()[:16]


@dataclass
class DensityReport:
    log_cond: np.ndarray
    log_marg: np.ndarray
    bpd: np.ndarray
    fingerprint: str

    def __post_init__(self):
        n = len(self.log_marg)
        if len(self.bpd) != n or (self.log_cond is not None and len(self.log_cond) != n):
            raise ArgumentError("density report columns differ in length")

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", "log_cond", "log_marg", "bpd"])
            for i in range(len(self.log_marg)):
                lc = "" if self.log_cond is None else repr(float(self.log_cond[i]))
                w.writerow([i, lc, repr(float(self.log_marg[i])), repr(float(self.bpd[i]))])


def density_report(model, base, y, x=None, seed=0, scale_divisor=256.0, base2=True,
                   mc_samples=INFERENCE_MC_SAMPLES) -> DensityReport:
    """Per-sample conditional/marginal log densities and bits per dimension.

    Without covariates the conditional column is left empty.
    """
    y = np.asarray(y, dtype=np.float64)
    lm = np.atleast_1d(log_marg_density(model, base, y))
    lc = None
    if x is not None and base.heads:
        lc = np.atleast_1d(log_cond_density(model, base, y, x, seed=seed, mc_samples=mc_samples))
    nats = -lm / model.dims + math.log(scale_divisor)
    bpd = nats / math.log(2.0) if base2 else nats
    return DensityReport(lc, lm, bpd, fingerprint(model, base))


def sort_by_density(model, base, y) -> np.ndarray:
    """Row order of ``y`` by increasing marginal density."""
    return np.argsort(np.atleast_1d(log_marg_density(model, base, y)), kind="stable")
