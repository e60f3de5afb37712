"""Batch command-line front end.

Usage::

    apcde synth-data --out train.csv --set data.synth.n=2000 --seed 1
    apcde train --config run.cfg --out model.ckpt
    apcde density --model model.ckpt --data test.csv --out report.csv
    apcde embed | classify | sample | generate | validate-sdr | report ...

Config files hold one ``dotted.key = value`` per line (``#`` starts a
comment); values are parsed as JSON when possible and as bare strings
otherwise. ``--set key=value`` and the dedicated flags override file values.

Exit codes: 0 success, 1 usage/configuration error, 2 data error,
3 numerical error or divergence.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List

import numpy as np

from .base import AugmentedBase, CategoricalHead, LinearGaussianHead
from .checkpoint import load_checkpoint, save_checkpoint
from .data import MixtureSpec, XSpec, load_dataset, save_dataset, synth_conditional_mixture, write_pgm
from .errors import ConfigurationError, DataError, NumericalError
from .flows import FlowModel
from .inference import (classify, density_report, embed, generate_fixed_zp, sample_uncond,
                        zp_for_covariate)
from .sdr import ProbeConfig, sdr_result, train_probe
from .training import TrainConfig, train

log = logging.getLogger("apcde")

COMMANDS = ("train", "density", "embed", "classify", "sample", "generate", "validate-sdr", "report",
            "synth-data")

# named architectures; explicit arch.* keys override the preset's values
ARCH_PRESETS = {
    "desk": {"arch.levels": 2, "arch.depth": 4, "arch.hidden": [64]},
    "full": {"arch.levels": 3, "arch.depth": 32, "arch.hidden": [512]},
}

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def parse_config_text(text: str) -> Dict[str, object]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        out[key] = _parse_value(val)
    return out


def _parse_value(val: str):
    try:
        return json.loads(val)
    except json.JSONDecodeError:
        return val


def _collect_config(args) -> Dict[str, object]:
    cfg: Dict[str, object] = {}
    if getattr(args, "config", None):
        try:
            cfg.update(parse_config_text(Path(args.config).read_text()))
        except OSError as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        cfg[k.strip()] = _parse_value(v.strip())
    for flag, key in (("data", "data.path"), ("seed", "seed"), ("epochs", "train.epochs")):
        val = getattr(args, flag, None)
        if val is not None:
            cfg[key] = val
    return cfg


def _schema(cfg) -> List[XSpec]:
    spec = cfg.get("data.schema", [])
    if isinstance(spec, str):
        spec = [s for s in spec.split(",") if s.strip()]
    return [XSpec.parse(s.strip()) for s in spec]


# -- dataset / model assembly ------------------------------------------------

def _mixture_from_config(cfg) -> MixtureSpec:
    return MixtureSpec(cfg.get("data.synth.means", [[2.0, 0.0], [-2.0, 0.0]]),
                       float(cfg.get("data.synth.sigma", 1.0)),
                       cfg.get("data.synth.probs"),
                       cfg.get("data.synth.covariate_slope"),
                       float(cfg.get("data.synth.covariate_noise", 0.1)))


def _load_training_data(cfg):
    if "data.path" in cfg:
        return load_dataset(cfg["data.path"], _schema(cfg))
    if "data.synth.n" in cfg:
        return synth_conditional_mixture(_mixture_from_config(cfg), int(cfg["data.synth.n"]),
                                         int(cfg.get("data.synth.seed", cfg.get("seed", 0))))
    raise UsageError("train needs a dataset: set data.path (or --data) or data.synth.n")


def _build_heads(cfg, schema) -> List[object]:
    heads = []
    for i, spec in enumerate(schema):
        pre = f"head{i}."
        dim = int(cfg.get(pre + "dim", 1 if spec.kind == "continuous" else 2))
        temper = float(cfg.get(pre + "temper", 1.0))
        if spec.kind == "categorical":
            heads.append(CategoricalHead(spec.n_classes, dim, temper,
                                         bool(cfg.get(pre + "free_intercept", False))))
        else:
            heads.append(LinearGaussianHead(spec.width, dim, temper,
                                            bool(cfg.get(pre + "pin_variance", False)),
                                            cfg.get(pre + "variance", 1.0)))
    return heads


def _build_model(cfg, dims, heads) -> FlowModel:
    preset = str(cfg.get("arch.preset", "desk"))
    if preset not in ARCH_PRESETS:
        raise UsageError(f"unknown arch.preset {preset!r}; choose from {sorted(ARCH_PRESETS)}")
    cfg = {**ARCH_PRESETS[preset], **cfg}
    hidden = cfg.get("arch.hidden", [64])
    hidden = [hidden] if isinstance(hidden, int) else list(hidden)
    blocks = cfg.get("layout.blocks")
    model = FlowModel.build(dims, n_levels=int(cfg.get("arch.levels", 2)),
                            depth=int(cfg.get("arch.depth", 4)), hidden=tuple(hidden),
                            coupling=str(cfg.get("arch.coupling", "additive")),
                            head_widths=[] if blocks else [h.dim for h in heads],
                            rng=np.random.default_rng(int(cfg.get("seed", 0))))
    if blocks:
        # "level:start:width" per head, separated by ';'
        if isinstance(blocks, str):
            blocks = [tuple(int(v) for v in b.split(":")) for b in blocks.split(";") if b.strip()]
        model.layout = model.layout_from_levels([tuple(b) for b in blocks])
    return model


def _train_config(cfg) -> TrainConfig:
    keys = {"epochs": int, "batch_size": int, "peak_lr": float, "warmup_epochs": int,
            "final_lr": float, "mc_samples": int, "clip_norm": float}
    kwargs = {k: conv(cfg[f"train.{k}"]) for k, conv in keys.items() if f"train.{k}" in cfg}
    return TrainConfig(seed=int(cfg.get("seed", 0)), **kwargs)


# -- commands -----------------------------------------------------------------

def cmd_synth_data(args, cfg):
    if not args.out:
        raise UsageError("synth-data needs --out")
    ds = synth_conditional_mixture(_mixture_from_config(cfg), int(cfg.get("data.synth.n", 1000)),
                                   int(cfg.get("data.synth.seed", cfg.get("seed", 0))))
    save_dataset(ds, args.out)
    log.info("wrote %d samples to %s (bayes error %s)", ds.n, args.out, ds.provenance["bayes_error"])


def cmd_train(args, cfg):
    if not args.out:
        raise UsageError("train needs --out")
    ds = _load_training_data(cfg)
    heads = _build_heads(cfg, ds.schema)
    base = AugmentedBase(heads)
    model = _build_model(cfg, ds.p, heads)
    tc = _train_config(cfg)
    log_path = args.log or cfg.get("train.log") or str(Path(args.out).with_suffix(".loss.txt"))
    ckpt = train(model, base, ds, tc, log_path=log_path)
    ckpt.metadata["threads"] = args.threads
    save_checkpoint(ckpt, args.out)
    log.info("saved %s; final loss %s", args.out, ckpt.loss_trace[-1] if ckpt.loss_trace else None)


def _need(args, *names):
    for n in names:
        if not getattr(args, n, None):
            raise UsageError(f"{args.command} needs --{n.replace('_', '-')}")


def _eval_data(args, ckpt, require_x=False):
    ds = load_dataset(args.data, ckpt.schema if require_x or _has_columns(args.data, ckpt.schema) else [])
    if ds.p != ckpt.model.dims:
        raise DataError(f"data has {ds.p} response columns, model expects {ckpt.model.dims}")
    return ds


def _has_columns(path, schema):
    try:
        with open(path, newline="") as fh:
            header = next(csv.reader(fh), [])
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    return all(c in header for s in schema for c in s.columns)


def cmd_density(args, cfg):
    _need(args, "model", "data", "out")
    ckpt = load_checkpoint(args.model)
    ds = _eval_data(args, ckpt)
    rep = density_report(ckpt.model, ckpt.base, ds.y, ds.x if ds.x else None,
                         seed=int(cfg.get("seed", 0)), scale_divisor=args.scale_divisor,
                         base2=not args.nats)
    rep.to_csv(args.out)


def cmd_embed(args, cfg):
    _need(args, "model", "data", "out")
    ckpt = load_checkpoint(args.model)
    ds = _eval_data(args, ckpt)
    zps, zn = embed(ckpt.model, ds.y)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id"] + [f"zp{h}_{j}" for h, zp in enumerate(zps) for j in range(zp.shape[1])]
                   + [f"zn{j}" for j in range(zn.shape[1])])
        for i in range(ds.n):
            w.writerow([i] + [repr(float(v)) for zp in zps for v in zp[i]] + [repr(float(v)) for v in zn[i]])


def cmd_classify(args, cfg):
    _need(args, "model", "data", "out")
    ckpt = load_checkpoint(args.model)
    _write_classes(ckpt, _eval_data(args, ckpt), args.out)


def _write_classes(ckpt, ds, path):
    labels, ties = classify(ckpt.model, ckpt.base, ds.y)
    cats = [i for i, s in enumerate(ds.schema) if s.kind == "categorical"]
    observed = ds.x[cats[0]] if cats else None
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "label", "tie"] + (["observed"] if observed is not None else []))
        for i in range(ds.n):
            w.writerow([i, int(labels[i]), int(ties[i])] + ([int(observed[i])] if observed is not None else []))
    if observed is not None:
        log.info("error rate %.4f", float(np.mean(labels != observed)))


def _image_shape(text, p):
    if not text:
        return None
    h, w = (int(v) for v in text.lower().split("x"))
    if h * w != p:
        raise UsageError(f"image shape {text} does not hold {p} values")
    return h, w


def _write_samples(path, y):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"y{j}" for j in range(y.shape[1])])
        for row in y:
            w.writerow([repr(float(v)) for v in row])


def cmd_sample(args, cfg):
    _need(args, "model", "out")
    ckpt = load_checkpoint(args.model)
    rng = np.random.default_rng(int(cfg.get("seed", 0)))
    y = sample_uncond(ckpt.model, args.n, rng)
    _write_samples(args.out, y)
    shape = _image_shape(args.image_shape, ckpt.model.dims)
    if shape and args.pgm_dir:
        Path(args.pgm_dir).mkdir(parents=True, exist_ok=True)
        for i, row in enumerate(y):
            write_pgm(Path(args.pgm_dir) / f"sample_{i:05d}.pgm", row.reshape(shape))


def _parse_zp_fix(items, layout) -> Dict[int, np.ndarray]:
    fixed = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--fix-zp expects h=v1,v2,..., got {item!r}")
        h, vals = item.split("=", 1)
        h = int(h.lstrip("h"))
        if not 0 <= h < len(layout.blocks):
            raise UsageError(f"--fix-zp names head {h}, model has {len(layout.blocks)}")
        vec = np.array([float(v) for v in vals.split(",")])
        if vec.size != layout.blocks[h].size:
            raise UsageError(f"head {h} z_P has width {layout.blocks[h].size}, got {vec.size} values")
        fixed[h] = vec
    return fixed


def _parse_grid(items):
    grid = []
    for item in items or []:
        try:
            h, rng_txt = item.split("=", 1)
            lo, hi, cnt = rng_txt.split(":")
            grid.append((int(h.lstrip("h")), np.linspace(float(lo), float(hi), int(cnt))))
        except ValueError:
            raise UsageError(f"--grid expects h=start:stop:count, got {item!r}") from None
    if len(grid) > 2:
        raise UsageError("--grid sweeps at most two heads")
    return grid


def cmd_generate(args, cfg):
    _need(args, "model", "out_dir")
    ckpt = load_checkpoint(args.model)
    model, base = ckpt.model, ckpt.base
    layout = model.layout
    rng = np.random.default_rng(int(cfg.get("seed", 0)))
    zps = [np.zeros(b.size) for b in layout.blocks]
    if args.zp_data is not None:
        ds = load_dataset(args.zp_data)
        src, _ = embed(model, ds.y[args.zp_row])
        zps = [np.asarray(z) for z in src]
    for h, vec in _parse_zp_fix(args.fix_zp, layout).items():
        zps[h] = vec
    grid = _parse_grid(args.grid)
    for h, _ in grid:
        if not isinstance(base.heads[h], LinearGaussianHead):
            raise UsageError(f"--grid head {h} is not a continuous (linear-gaussian) head")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    shape = _image_shape(args.image_shape, model.dims)
    cells = [()]
    for _, values in grid:
        cells = [c + (v,) for c in cells for v in values]
    rows = []
    for cell in cells:
        cell_zps = list(zps)
        for (h, _), target in zip(grid, cell):
            cell_zps[h] = zp_for_covariate(base.heads[h], [target])
        ys = generate_fixed_zp(model, cell_zps, args.n, rng)
        idx = _grid_index(grid, cell)
        for j, yv in enumerate(ys):
            rows.append((idx, j, cell, yv))
            if shape:
                write_pgm(out / f"gen_{'_'.join(map(str, idx)) or 'fixed'}_{j:03d}.pgm", yv.reshape(shape))
    with open(out / "generated.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cell", "draw"] + [f"target{g}" for g in range(len(grid))] + [f"y{j}" for j in range(model.dims)])
        for idx, j, cell, yv in rows:
            w.writerow(["_".join(map(str, idx)) or "fixed", j] + [repr(float(c)) for c in cell] + [repr(float(v)) for v in yv])


def _grid_index(grid, cell):
    return tuple(int(np.argmin(np.abs(values - v))) for (_, values), v in zip(grid, cell))


def cmd_validate_sdr(args, cfg):
    _need(args, "model", "data")
    ckpt = load_checkpoint(args.model)
    ds = _eval_data(args, ckpt, require_x=True)
    seed = int(cfg.get("seed", 0))
    probe_data = load_dataset(args.probe_data, ckpt.schema) if args.probe_data else ds
    probe = train_probe(probe_data, ProbeConfig(kind=args.probe_kind, epochs=args.probe_epochs, seed=seed))
    res = sdr_result(ckpt.model, probe, ds, args.draws, np.random.default_rng(seed))
    if args.out:
        res.to_csv(args.out)
    print(f"agreement {res.rate:.6f} probe_holdout_accuracy {probe.metadata['holdout_accuracy']}")


def cmd_report(args, cfg):
    """Loss trace, per-sample densities and (with a categorical head) labels."""
    _need(args, "model", "data", "out")
    ckpt = load_checkpoint(args.model)
    ds = _eval_data(args, ckpt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        for i, v in enumerate(ckpt.loss_trace):
            w.writerow([i, repr(float(v))])
    density_report(ckpt.model, ckpt.base, ds.y, ds.x if ds.x else None,
                   seed=int(cfg.get("seed", 0))).to_csv(out / "density.csv")
    if sum(isinstance(h, CategoricalHead) for h in ckpt.base.heads) == 1:
        _write_classes(ckpt, ds, out / "classify.csv")


HANDLERS = {"train": cmd_train, "density": cmd_density, "embed": cmd_embed, "classify": cmd_classify,
            "sample": cmd_sample, "generate": cmd_generate, "validate-sdr": cmd_validate_sdr,
            "report": cmd_report, "synth-data": cmd_synth_data}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="apcde", description="Conditional density estimation with augmented-posterior flows.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config")
        s.add_argument("--set", action="append", metavar="KEY=VALUE")
        s.add_argument("--seed", type=int)
        s.add_argument("--threads", type=int, default=1)
        s.add_argument("--out")
        s.add_argument("-v", "--verbose", action="store_true")
        if name != "synth-data":
            s.add_argument("--data")
        if name not in ("train", "synth-data"):
            s.add_argument("--model")
        if name == "train":
            s.add_argument("--log")
            s.add_argument("--epochs", type=int)
        if name == "density":
            s.add_argument("--scale-divisor", type=float, default=256.0)
            s.add_argument("--nats", action="store_true", help="report nats instead of bits")
        if name in ("sample", "generate"):
            s.add_argument("--n", type=int, default=10)
            s.add_argument("--image-shape", help="e.g. 8x8; enables PGM output")
        if name == "sample":
            s.add_argument("--pgm-dir")
        if name == "generate":
            s.add_argument("--out-dir")
            s.add_argument("--fix-zp", action="append", metavar="H=V1,V2")
            s.add_argument("--grid", action="append", metavar="H=START:STOP:COUNT")
            s.add_argument("--zp-data")
            s.add_argument("--zp-row", type=int, default=0)
        if name == "validate-sdr":
            s.add_argument("--draws", type=int, default=10)
            s.add_argument("--probe-kind", default="logistic", choices=("logistic", "mlp"))
            s.add_argument("--probe-epochs", type=int, default=100)
            s.add_argument("--probe-data")
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage())
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        cfg = _collect_config(args)
        if args.command == "generate" and args.out_dir is None:
            args.out_dir = args.out
        HANDLERS[args.command](args, cfg)
    except (UsageError, ConfigurationError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
