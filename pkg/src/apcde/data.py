"""Datasets, dequantisation, the synthetic mixture generator and PGM output.

CSV layout: a header row, then one row per sample. Response columns are
named ``y0 .. y{p-1}``. Each covariate (one per predictive head) follows the
schema: a categorical covariate is one integer column holding labels
``1..K``; a continuous covariate of width 1 is one column named after it, and
of width m > 1 the columns ``<name>0 .. <name>{m-1}``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.stats import norm

from .errors import DataError, SchemaError


@dataclass(frozen=True)
class XSpec:
    name: str
    kind: str            # "categorical" | "continuous"
    n_classes: int = 0
    width: int = 1

    def __post_init__(self):
        if self.kind not in ("categorical", "continuous"):
            raise SchemaError(f"unknown covariate kind {self.kind!r}")
        if self.kind == "categorical" and self.n_classes < 2:
            raise SchemaError(f"categorical covariate {self.name!r} needs n_classes >= 2")

    @property
    def columns(self) -> List[str]:
        if self.kind == "categorical" or self.width == 1:
            return [self.name]
        return [f"{self.name}{j}" for j in range(self.width)]

    def to_dict(self):
        return {"name": self.name, "kind": self.kind, "n_classes": self.n_classes, "width": self.width}

    @classmethod
    def parse(cls, text: str) -> "XSpec":
        """``label:categorical:10`` or ``light:continuous[:width]``."""
        parts = text.split(":")
        if len(parts) < 2:
            raise SchemaError(f"bad covariate spec {text!r}")
        name, kind = parts[0], parts[1]
        if kind == "categorical":
            if len(parts) != 3:
                raise SchemaError(f"categorical spec needs a class count: {text!r}")
            return cls(name, kind, n_classes=int(parts[2]))
        return cls(name, kind, width=int(parts[2]) if len(parts) > 2 else 1)


@dataclass
class Dataset:
    y: np.ndarray
    x: List[np.ndarray] = field(default_factory=list)
    schema: List[XSpec] = field(default_factory=list)
    provenance: Dict[str, object] = field(default_factory=dict)
    # integer source pixels behind a dequantised y, kept so training can redraw the noise
    pixels: Optional[np.ndarray] = None
    bit_depth: Optional[int] = None

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.pixels is not None:
            self.pixels = np.asarray(self.pixels, dtype=np.float64)
            if self.pixels.shape != self.y.shape or self.bit_depth is None:
                raise DataError("pixels must match y in shape and come with a bit depth")
        if self.y.ndim != 2 or self.y.shape[0] < 1:
            raise DataError("y must be a non-empty (n, p) matrix")
        if not np.all(np.isfinite(self.y)):
            raise DataError("y contains non-finite values")
        if len(self.x) != len(self.schema):
            raise SchemaError("one covariate array per schema entry is required")
        xs = []
        for spec, col in zip(self.schema, self.x):
            col = np.asarray(col)
            if col.shape[0] != self.n:
                raise DataError(f"covariate {spec.name!r} has {col.shape[0]} rows, y has {self.n}")
            if spec.kind == "categorical":
                col = col.astype(np.int64)
                if col.min() < 1 or col.max() > spec.n_classes:
                    raise DataError(f"labels of {spec.name!r} outside 1..{spec.n_classes}")
            else:
                col = np.asarray(col, dtype=np.float64).reshape(self.n, spec.width)
            xs.append(col)
        self.x = xs

    @property
    def n(self):
        return self.y.shape[0]

    @property
    def p(self):
        return self.y.shape[1]

    def subset(self, idx):
        idx = np.asarray(idx)
        return Dataset(self.y[idx], [c[idx] for c in self.x], list(self.schema), dict(self.provenance),
                       None if self.pixels is None else self.pixels[idx], self.bit_depth)

    def without_covariates(self):
        return Dataset(self.y, [], [], dict(self.provenance), self.pixels, self.bit_depth)

    def redequantize(self, rng) -> np.ndarray:
        """A fresh dequantisation of the stored pixels."""
        if self.pixels is None:
            raise DataError("dataset has no integer pixels to dequantise")
        return dequantize(self.pixels, self.bit_depth, rng)


def dequantize(values, bit_depth, rng) -> np.ndarray:
    """Integer pixels in [0, 255] to continuous values in (0, 1).

    For ``bit_depth < 8`` pixels are first floored to multiples of
    ``2**(8 - bit_depth)``. Uniform(0, 1) noise is added per entry and the
    result divided by 256.
    """
    v = np.asarray(values, dtype=np.float64)
    if not 1 <= int(bit_depth) <= 8:
        raise DataError(f"bit depth must be in 1..8, got {bit_depth}")
    if np.any(v < 0) or np.any(v > 255) or np.any(v != np.floor(v)):
        raise DataError("pixel values must be integers in [0, 255]")
    if bit_depth < 8:
        step = 2 ** (8 - int(bit_depth))
        v = np.floor(v / step) * step
    return (v + rng.uniform(0.0, 1.0, size=v.shape)) / 256.0


def to_byte_range(values, max_value) -> np.ndarray:
    """Rescale integer data with maximum ``max_value`` to the 0..255 convention."""
    v = np.asarray(values, dtype=np.float64)
    return np.rint(v * (255.0 / max_value))


def _header_for(p, schema):
    return [f"y{j}" for j in range(p)] + [c for s in schema for c in s.columns]


def save_dataset(ds: Dataset, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_header_for(ds.p, ds.schema))
        for i in range(ds.n):
            row = [repr(float(v)) for v in ds.y[i]]
            for spec, col in zip(ds.schema, ds.x):
                if spec.kind == "categorical":
                    row.append(str(int(col[i])))
                else:
                    row.extend(repr(float(v)) for v in col[i])
            w.writerow(row)


def load_dataset(path, schema: Sequence[XSpec] = ()) -> Dataset:
    """Read a CSV dataset; raises DataError naming the line and column on bad cells."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise SchemaError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    ycols = [h for h in header if h.startswith("y") and h[1:].isdigit()]
    p = len(ycols)
    if p == 0 or ycols != [f"y{j}" for j in range(p)]:
        raise SchemaError(f"{path}: response columns must be y0..y{{p-1}}")
    expected = _header_for(p, schema)
    missing = [c for c in expected if c not in header]
    if missing:
        raise SchemaError(f"{path}: missing columns {missing}")
    pos = {h: i for i, h in enumerate(header)}
    body = rows[1:]
    if not body:
        raise DataError(f"{path}: no data rows")
    y = np.empty((len(body), p))
    xs = [np.empty((len(body), s.width if s.kind == "continuous" else 1)) for s in schema]

    def cell(r, line, col):
        try:
            text = r[pos[col]].strip()
        except IndexError:
            raise DataError(f"{path}:{line}: row too short, no column {col!r}") from None
        if text == "":
            raise DataError(f"{path}:{line}: missing value in column {col!r}")
        try:
            val = float(text)
        except ValueError:
            raise DataError(f"{path}:{line}: non-numeric value {text!r} in column {col!r}") from None
        if not math.isfinite(val):
            raise DataError(f"{path}:{line}: non-finite value in column {col!r}")
        return val

    for i, r in enumerate(body):
        line = i + 2
        for j, c in enumerate(ycols):
            y[i, j] = cell(r, line, c)
        for k, spec in enumerate(schema):
            for j, c in enumerate(spec.columns):
                xs[k][i, j] = cell(r, line, c)
    x = []
    for spec, col in zip(schema, xs):
        if spec.kind == "categorical":
            if np.any(col != np.floor(col)):
                raise DataError(f"{path}: non-integer label in column {spec.name!r}")
            x.append(col[:, 0].astype(np.int64))
        else:
            x.append(col)
    return Dataset(y, x, list(schema), {"source": str(path)})


@dataclass
class MixtureSpec:
    """Isotropic Gaussian class-conditional mixture with optional continuous covariate.

    The continuous covariate, when ``covariate_slope`` is set, is
    ``slope * y[0] + N(0, covariate_noise^2)``.
    """

    means: np.ndarray
    sigma: float = 1.0
    probs: Optional[np.ndarray] = None
    covariate_slope: Optional[float] = None
    covariate_noise: float = 0.1

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        k = self.means.shape[0]
        self.probs = np.full(k, 1.0 / k) if self.probs is None else np.asarray(self.probs, dtype=np.float64)
        if self.probs.shape != (k,) or abs(self.probs.sum() - 1.0) > 1e-12 or np.any(self.probs < 0):
            raise DataError("class probabilities must be non-negative and sum to 1")
        if self.sigma < 0 or self.covariate_noise <= 0:
            raise DataError("sigma must be >= 0 and covariate noise > 0")

    @property
    def n_classes(self):
        return self.means.shape[0]

    def bayes_error(self) -> Optional[float]:
        """Phi(-|mu1 - mu2| / (2 sigma)) for two equiprobable classes, else None."""
        if self.n_classes != 2 or not np.allclose(self.probs, 0.5) or self.sigma <= 0:
            return None
        dist = float(np.linalg.norm(self.means[0] - self.means[1]))
        return float(norm.cdf(-dist / (2.0 * self.sigma)))

    def to_dict(self):
        return {"means": self.means.tolist(), "sigma": self.sigma, "probs": self.probs.tolist(),
                "covariate_slope": self.covariate_slope, "covariate_noise": self.covariate_noise}


def synth_conditional_mixture(spec: MixtureSpec, n: int, seed: int) -> Dataset:
    rng = np.random.default_rng(seed)
    labels = rng.choice(spec.n_classes, size=n, p=spec.probs)
    y = spec.means[labels] + spec.sigma * rng.standard_normal((n, spec.means.shape[1]))
    schema = [XSpec("label", "categorical", n_classes=spec.n_classes)]
    x = [labels + 1]
    if spec.covariate_slope is not None:
        xb = spec.covariate_slope * y[:, 0] + spec.covariate_noise * rng.standard_normal(n)
        schema.append(XSpec("xb", "continuous"))
        x.append(xb[:, None])
    prov = {"generator": "conditional_mixture", "spec": spec.to_dict(), "seed": seed, "n": n,
            "bayes_error": spec.bayes_error()}
    return Dataset(y, x, schema, prov)


def load_digits_8x8(seed=0, bit_depth=5, test_size=200) -> tuple:
    """The 8x8 handwritten-digit images (p = 64), dequantised.

    Pixels (0..16) are mapped to 0..255 before dequantisation. Labels are
    digit + 1. Returns ``(train, test)`` with a seeded split.
    """
    from sklearn.datasets import load_digits

    raw = load_digits()
    rng = np.random.default_rng(seed)
    pixels = to_byte_range(raw.data, raw.data.max())
    y = dequantize(pixels, bit_depth, rng)
    labels = raw.target.astype(np.int64) + 1
    order = rng.permutation(len(labels))
    schema = [XSpec("digit", "categorical", n_classes=10)]
    prov = {"source": "sklearn.datasets.load_digits", "seed": seed, "bit_depth": bit_depth}
    full = Dataset(y, [labels], schema, prov, pixels, bit_depth)
    return full.subset(order[test_size:]), full.subset(order[:test_size])


def write_pgm(path, image, lo=0.0, hi=1.0):
    """Binary (P5) 8-bit greyscale image; values are clipped to [lo, hi]."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise DataError("PGM output needs a 2-D image")
    px = np.rint(np.clip((img - lo) / (hi - lo), 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = px.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(px.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise DataError(f"{path}: not a binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)
