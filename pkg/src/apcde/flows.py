"""Invertible transform y -> z built from Glow-style steps on flat vectors.

A model has ``L`` levels of ``K`` steps each; a step is actnorm, then a full
invertible linear map, then a coupling layer. After every non-final level the
first half of the surviving coordinates is frozen as latent output. The flat
latent is laid out level by level::

    z = [level-0 factored half | level-1 factored half | ... | final output]

so an identity-initialised model maps y to itself.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import ops
from .core.tape import Tape, Var
from .errors import ConfigurationError, DegenerateDataError, NumericalError

LOG_SCALE_BOUND = 5.0


def bounded_log_scale(raw):
    """5 * tanh(raw / 5): keeps affine-coupling scales inside [e^-5, e^5]."""
    return ops.mul(LOG_SCALE_BOUND, ops.tanh(ops.mul(1.0 / LOG_SCALE_BOUND, raw)))


def _as_batch(a):
    a = np.asarray(a, dtype=np.float64)
    return (a[None, :], True) if a.ndim == 1 else (a, False)


class Conditioner:
    """Dense network: affine/tanh alternation with an affine output layer."""

    def __init__(self, weights: Sequence[np.ndarray], biases: Sequence[np.ndarray]):
        if len(weights) != len(biases) or not weights:
            raise ConfigurationError("conditioner needs matching, non-empty weight/bias lists")
        for i in range(1, len(weights)):
            if weights[i].shape[1] != weights[i - 1].shape[0]:
                raise ConfigurationError(f"conditioner layer {i} width mismatch")
        self.params: Dict[str, np.ndarray] = {}
        for i, (w, b) in enumerate(zip(weights, biases)):
            self.params[f"W{i}"] = np.array(w, dtype=np.float64)
            self.params[f"b{i}"] = np.array(b, dtype=np.float64)
        self.n_layers = len(weights)

    @classmethod
    def create(cls, in_width, out_width, hidden=(64,), rng=None, zero_output=True):
        rng = rng if rng is not None else np.random.default_rng(0)
        widths = [in_width, *hidden, out_width]
        ws, bs = [], []
        for i in range(len(widths) - 1):
            fan_in, fan_out = widths[i], widths[i + 1]
            last = i == len(widths) - 2
            if last and zero_output:
                w = np.zeros((fan_out, fan_in))
            else:
                w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_out, fan_in))
            ws.append(w)
            bs.append(np.zeros(fan_out))
        return cls(ws, bs)

    @property
    def in_width(self):
        return self.params["W0"].shape[1]

    @property
    def out_width(self):
        return self.params[f"W{self.n_layers - 1}"].shape[0]

    def __call__(self, h, params=None):
        p = self.params if params is None else params
        if ops.value(h).shape[-1] != self.in_width:
            raise ConfigurationError(
                f"conditioner expects width {self.in_width}, got {ops.value(h).shape[-1]}")
        for i in range(self.n_layers):
            h = ops.affine(h, p[f"W{i}"], p[f"b{i}"])
            if i < self.n_layers - 1:
                h = ops.tanh(h)
        return h

    @property
    def hidden(self):
        return [self.params[f"W{i}"].shape[0] for i in range(self.n_layers - 1)]


def conditioner_eval(conditioner: Conditioner, inputs):
    return conditioner(inputs)


def actnorm_init(batch) -> Tuple[np.ndarray, np.ndarray]:
    """Scale and bias that whiten ``batch`` per dimension (population std)."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[0] < 2:
        raise DegenerateDataError("actnorm initialisation needs at least two samples")
    mean = batch.mean(axis=0)
    std = batch.std(axis=0)
    if np.any(std <= 0.0):
        bad = np.flatnonzero(std <= 0.0).tolist()
        raise DegenerateDataError(f"zero variance in dimensions {bad} of the initialisation batch")
    scale = 1.0 / std
    return scale, -mean * scale


class ActNorm:
    kind = "actnorm"

    def __init__(self, width):
        self.width = width
        self.params = {"log_scale": np.zeros(width), "bias": np.zeros(width)}

    @property
    def scale(self):
        return np.exp(self.params["log_scale"])

    def initialize(self, batch):
        scale, bias = actnorm_init(batch)
        self.params["log_scale"] = np.log(scale)
        self.params["bias"] = bias

    def forward(self, h, params=None):
        p = self.params if params is None else params
        out = ops.add(ops.mul(h, ops.exp(p["log_scale"])), p["bias"])
        return out, ops.sum(p["log_scale"])

    def inverse(self, h):
        return (h - self.params["bias"]) * np.exp(-self.params["log_scale"])


class InvertibleLinear:
    kind = "invlinear"

    def __init__(self, weight):
        weight = np.array(weight, dtype=np.float64)
        if weight.ndim != 2 or weight.shape[0] != weight.shape[1]:
            raise ConfigurationError("invertible-linear weight must be square")
        self.width = weight.shape[0]
        self.params = {"W": weight}

    @classmethod
    def permutation(cls, width, rng):
        return cls(np.eye(width)[rng.permutation(width)])

    def forward(self, h, params=None):
        p = self.params if params is None else params
        return ops.matmul(h, ops.transpose(p["W"])), ops.logdet(p["W"])

    def inverse(self, h):
        return np.linalg.solve(self.params["W"], h.T).T


class Coupling:
    """Additive or affine coupling; ``parity`` 0 keeps the first half fixed."""

    kind = "coupling"

    def __init__(self, width, variant, parity, conditioner: Conditioner):
        if width % 2:
            raise ConfigurationError(f"coupling width must be even, got {width}")
        if variant not in ("additive", "affine"):
            raise ConfigurationError(f"unknown coupling variant {variant!r}")
        half = width // 2
        need = half if variant == "additive" else 2 * half
        if conditioner.in_width != half or conditioner.out_width != need:
            raise ConfigurationError(
                f"conditioner maps {conditioner.in_width}->{conditioner.out_width}, "
                f"coupling needs {half}->{need}")
        self.width, self.variant, self.parity = width, variant, parity
        self.conditioner = conditioner
        self.params = conditioner.params
        lo, hi = np.arange(half), np.arange(half, width)
        self.passive, self.active = (lo, hi) if parity == 0 else (hi, lo)

    def _shift_logscale(self, passive, params):
        out = self.conditioner(passive, params)
        half = self.width // 2
        if self.variant == "additive":
            return out, None
        shift = ops.take(out, np.arange(half))
        return shift, bounded_log_scale(ops.take(out, np.arange(half, 2 * half)))

    def forward(self, h, params=None):
        passive = ops.take(h, self.passive)
        active = ops.take(h, self.active)
        shift, log_s = self._shift_logscale(passive, params)
        if log_s is None:
            new_active, logdet = ops.add(active, shift), 0.0
        else:
            new_active = ops.add(ops.mul(active, ops.exp(log_s)), shift)
            logdet = ops.sum(log_s, axis=1)
        parts = [passive, new_active] if self.parity == 0 else [new_active, passive]
        return ops.concat(parts, axis=1), logdet

    def inverse(self, h):
        passive, active = h[:, self.passive], h[:, self.active]
        shift, log_s = self._shift_logscale(passive, None)
        active = active - shift
        if log_s is not None:
            active = active * np.exp(-log_s)
        parts = [passive, active] if self.parity == 0 else [active, passive]
        return np.concatenate(parts, axis=1)


@dataclass
class LatentLayout:
    """Partition of the flat latent into one z_P block per head plus z_N.

    ``origins`` optionally records ``(level, start)`` for each block so the
    block can be described as "level l, indices start..start+width".
    """

    dims: int
    blocks: List[np.ndarray] = field(default_factory=list)
    origins: List[Optional[Tuple[int, int]]] = field(default_factory=list)

    def __post_init__(self):
        self.blocks = [np.asarray(b, dtype=np.intp) for b in self.blocks]
        if not self.origins:
            self.origins = [None] * len(self.blocks)
        self.validate()

    def validate(self):
        seen = np.zeros(self.dims, dtype=bool)
        for h, b in enumerate(self.blocks):
            if b.size == 0:
                raise ConfigurationError(f"z_P block {h} is empty")
            if b.min() < 0 or b.max() >= self.dims:
                raise ConfigurationError(f"z_P block {h} indexes outside 0..{self.dims - 1}")
            if np.any(seen[b]) or len(np.unique(b)) != b.size:
                raise ConfigurationError(f"z_P block {h} overlaps another block")
            seen[b] = True

    @property
    def zn(self) -> np.ndarray:
        mask = np.ones(self.dims, dtype=bool)
        for b in self.blocks:
            mask[b] = False
        return np.flatnonzero(mask)

    @property
    def widths(self) -> List[int]:
        return [int(b.size) for b in self.blocks]

    def partition(self, z):
        z = np.asarray(z, dtype=np.float64)
        if z.shape[-1] != self.dims:
            raise ConfigurationError(f"latent has width {z.shape[-1]}, layout expects {self.dims}")
        return [z[..., b] for b in self.blocks], z[..., self.zn]

    def assemble(self, zps, zn):
        zn = np.asarray(zn, dtype=np.float64)
        z = np.empty(zn.shape[:-1] + (self.dims,))
        for b, zp in zip(self.blocks, zps):
            z[..., b] = zp
        z[..., self.zn] = zn
        return z

    def to_dict(self):
        return {"dims": self.dims,
                "blocks": [b.tolist() for b in self.blocks],
                "origins": [list(o) if o is not None else None for o in self.origins]}

    @classmethod
    def from_dict(cls, d):
        origins = [tuple(o) if o is not None else None for o in d.get("origins", [])]
        return cls(d["dims"], d["blocks"], origins)


def latent_partition(layout: LatentLayout, z):
    return layout.partition(z)


class FlowModel:
    """Multi-scale stack of flow steps with a latent layout."""

    def __init__(self, dims, levels: List[List[object]], layout: Optional[LatentLayout] = None,
                 initialized=False):
        self.dims = dims
        self.levels = levels
        self.layout = layout if layout is not None else LatentLayout(dims)
        self.initialized = initialized
        widths = self.level_widths
        for l, level in enumerate(levels):
            for layer in level:
                if layer.width != widths[l]:
                    raise ConfigurationError(
                        f"level {l} layer width {layer.width} != surviving width {widths[l]}")
        if self.layout.dims != dims:
            raise ConfigurationError("layout dimension does not match the model")

    @property
    def n_levels(self):
        return len(self.levels)

    @property
    def level_widths(self) -> List[int]:
        widths, w = [], self.dims
        for l in range(len(self.levels)):
            widths.append(w)
            if l < len(self.levels) - 1:
                if w % 2:
                    raise ConfigurationError(f"cannot factor out half of odd width {w}")
                w //= 2
        return widths

    def level_block(self, level) -> np.ndarray:
        """Flat latent indices holding the output of ``level``."""
        widths = self.level_widths
        start = 0
        for l in range(level):
            start += widths[l] // 2
        size = widths[level] if level == self.n_levels - 1 else widths[level] // 2
        return np.arange(start, start + size)

    @classmethod
    def build(cls, dims, n_levels=1, depth=4, hidden=(64,), coupling="additive",
              head_widths=(), rng=None, identity=False):
        """Fresh model; ``identity=True`` gives exactly the identity map."""
        rng = rng if rng is not None else np.random.default_rng(0)
        levels, w = [], dims
        for l in range(n_levels):
            if depth > 0 and w % 2:
                raise ConfigurationError(
                    f"level {l} would have odd width {w}; couplings need an even width "
                    f"(use fewer levels for {dims} dimensions)")
            steps = []
            for k in range(depth):
                steps.append(ActNorm(w))
                steps.append(InvertibleLinear(np.eye(w) if identity else
                                              np.eye(w)[rng.permutation(w)]))
                out = w // 2 if coupling == "additive" else w
                cond = Conditioner.create(w // 2, out, hidden, rng, zero_output=True)
                steps.append(Coupling(w, coupling, k % 2, cond))
            levels.append(steps)
            if l < n_levels - 1:
                w //= 2
        model = cls(dims, levels, LatentLayout(dims), initialized=identity)
        model.layout = model.default_layout(head_widths)
        return model

    def default_layout(self, head_widths: Sequence[int]) -> LatentLayout:
        """Heads take consecutive blocks from the start of the final level's output."""
        final = self.n_levels - 1
        return self.layout_from_levels([(final, None, w) for w in head_widths])

    def layout_from_levels(self, specs) -> LatentLayout:
        """Build a layout from ``(level, start, width)`` triples.

        ``start=None`` continues after the previous block on the same level.
        """
        blocks, origins, cursor = [], [], {}
        for level, start, width in specs:
            if not 0 <= level < self.n_levels:
                raise ConfigurationError(f"level {level} out of range")
            region = self.level_block(level)
            start = cursor.get(level, 0) if start is None else start
            if start < 0 or start + width > region.size:
                raise ConfigurationError(
                    f"level {level} has {region.size} outputs; cannot take {start}..{start + width}")
            blocks.append(region[start:start + width])
            origins.append((level, start))
            cursor[level] = start + width
        return LatentLayout(self.dims, blocks, origins)

    def layers(self):
        for l, level in enumerate(self.levels):
            for i, layer in enumerate(level):
                yield f"level{l}.{i}.{layer.kind}", layer

    def params(self) -> Dict[str, np.ndarray]:
        out = {}
        for name, layer in self.layers():
            for k, v in layer.params.items():
                out[f"{name}.{k}"] = v
        return out

    def set_params(self, values: Dict[str, np.ndarray]):
        for name, layer in self.layers():
            for k in layer.params:
                key = f"{name}.{k}"
                if key in values:
                    layer.params[k] = np.array(values[key], dtype=np.float64)

    def bind(self, tape: Optional[Tape]):
        """Per-layer parameter mappings, registered on ``tape`` when given."""
        bound = []
        for name, layer in self.layers():
            if tape is None:
                bound.append(None)
            else:
                bound.append({k: tape.param(f"{name}.{k}", v) for k, v in layer.params.items()})
        return bound

    def forward(self, y, tape: Optional[Tape] = None):
        """Map y to z; returns ``(z, logdet)`` with one logdet per sample.

        With a tape the results are :class:`Var` nodes.
        """
        if isinstance(y, Var):
            h, single = y, False
        else:
            h, single = _as_batch(y)
        if ops.value(h).shape[1] != self.dims:
            raise ConfigurationError(f"input width {ops.value(h).shape[1]} != {self.dims}")
        z, logdet = self._run(h, self.bind(tape))
        if single and tape is None:
            return z[0], float(logdet[0])
        return z, logdet

    def _run(self, h, bound, init_actnorm=False):
        bound = iter(bound)
        logdet = np.zeros(ops.value(h).shape[0])
        factored = []
        idx = 0
        for l, level in enumerate(self.levels):
            for layer in level:
                if init_actnorm and isinstance(layer, ActNorm):
                    layer.initialize(h)
                h, ld = layer.forward(h, next(bound))
                logdet = ops.add(logdet, ld)
                if not np.all(np.isfinite(ops.value(h))):
                    raise NumericalError(
                        f"non-finite output at layer {idx} ({layer.kind}, level {l})")
                idx += 1
            if l < self.n_levels - 1:
                w = ops.value(h).shape[1]
                factored.append(ops.take(h, np.arange(w // 2)))
                h = ops.take(h, np.arange(w // 2, w))
        z = ops.concat(factored + [h], axis=1) if factored else h
        return z, logdet

    def initialize_actnorm(self, batch):
        """Data-dependent actnorm initialisation, layer by layer."""
        batch = np.asarray(batch, dtype=np.float64)
        self._run(batch, self.bind(None), init_actnorm=True)
        self.initialized = True

    def inverse(self, z):
        z, single = _as_batch(z)
        if z.shape[1] != self.dims:
            raise ConfigurationError(f"latent width {z.shape[1]} != {self.dims}")
        h = z[:, self.level_block(self.n_levels - 1)]
        for l in range(self.n_levels - 1, -1, -1):
            if l < self.n_levels - 1:
                h = np.concatenate([z[:, self.level_block(l)], h], axis=1)
            for i, layer in reversed(list(enumerate(self.levels[l]))):
                h = layer.inverse(h)
                if not np.all(np.isfinite(h)):
                    raise NumericalError(f"non-finite value inverting level {l} layer {i} ({layer.kind})")
        return h[0] if single else h

    def descriptor(self) -> dict:
        """Architecture description sufficient to rebuild the model skeleton."""
        levels = []
        for level in self.levels:
            steps = []
            for layer in level:
                entry = {"kind": layer.kind, "width": layer.width}
                if isinstance(layer, Coupling):
                    entry.update(variant=layer.variant, parity=layer.parity,
                                 hidden=layer.conditioner.hidden)
                steps.append(entry)
            levels.append(steps)
        return {"dims": self.dims, "levels": levels, "layout": self.layout.to_dict(),
                "initialized": self.initialized}

    @classmethod
    def from_descriptor(cls, desc, params: Dict[str, np.ndarray]):
        levels = []
        for steps in desc["levels"]:
            layers = []
            for s in steps:
                w = s["width"]
                if s["kind"] == "actnorm":
                    layers.append(ActNorm(w))
                elif s["kind"] == "invlinear":
                    layers.append(InvertibleLinear(np.eye(w)))
                elif s["kind"] == "coupling":
                    out = w // 2 if s["variant"] == "additive" else w
                    cond = Conditioner.create(w // 2, out, tuple(s["hidden"]), zero_output=True)
                    layers.append(Coupling(w, s["variant"], s["parity"], cond))
                else:
                    raise ConfigurationError(f"unknown layer kind {s['kind']!r}")
            levels.append(layers)
        model = cls(desc["dims"], levels, LatentLayout.from_dict(desc["layout"]),
                    initialized=desc.get("initialized", True))
        missing = set(model.params()) - set(params)
        if missing:
            raise ConfigurationError(f"missing parameters: {sorted(missing)[:5]}")
        model.set_params(params)
        return model


def flow_forward(model: FlowModel, y):
    return model.forward(y)


def flow_inverse(model: FlowModel, z):
    return model.inverse(z)
