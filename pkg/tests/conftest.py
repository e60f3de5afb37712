import functools

import numpy as np
import pytest

from apcde.base import AugmentedBase, CategoricalHead
from apcde.data import MixtureSpec, synth_conditional_mixture
from apcde.flows import FlowModel
from apcde.training import TrainConfig, train


def randomize(model, rng, scale=0.3):
    """Perturb every parameter so no layer is the identity.

    Invertible-linear weights become well-conditioned random matrices.
    """
    params = {}
    for name, v in model.params().items():
        if name.endswith(".W"):
            n = v.shape[0]
            q, _ = np.linalg.qr(rng.normal(size=(n, n)))
            params[name] = q @ np.diag(rng.uniform(0.7, 1.4, n))
        else:
            params[name] = v + scale * rng.normal(size=v.shape)
    model.set_params(params)
    model.initialized = True
    return model


def random_model(p, rng, coupling="affine", n_levels=1, depth=2, hidden=(8,), head_widths=()):
    model = FlowModel.build(p, n_levels=n_levels, depth=depth, hidden=hidden, coupling=coupling,
                            head_widths=head_widths, rng=rng)
    return randomize(model, rng)


def numerical_jacobian(f, y, step=1e-6):
    y = np.asarray(y, dtype=np.float64)
    cols = []
    for j in range(y.size):
        e = np.zeros_like(y)
        e[j] = step
        cols.append((f(y + e) - f(y - e)) / (2 * step))
    return np.stack(cols, axis=1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


MIXTURE_MEANS = [[2.0, 0.0], [-2.0, 0.0]]


@functools.lru_cache(maxsize=None)
def trained_mixture(sigma=1.0, n=1000, seed=0):
    """Flow with one categorical head fitted to the two-class 2-D mixture.

    Cached so several test modules share one training run.
    """
    spec = MixtureSpec(MIXTURE_MEANS, sigma)
    ds = synth_conditional_mixture(spec, n, seed)
    model = FlowModel.build(2, depth=8, hidden=(32,), coupling="affine", head_widths=[1],
                            rng=np.random.default_rng(seed))
    base = AugmentedBase([CategoricalHead(2, 1)])
    train(model, base, ds, TrainConfig(epochs=100, warmup_epochs=2, peak_lr=3e-3, final_lr=3e-4, mc_samples=200))
    return model, base, spec


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
