"""Command-line entry point: ``train``, ``eval`` and ``gradcheck``.

Exit codes: 0 success, 2 usage or config error, 3 data/model mismatch
(including failed gradient checks), 4 numerical divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .checks import CASES, run_suite
from .data import IdxError
from .evaluate import (
    MissingTransform,
    correspondence_score,
    ground_truth,
    interpolate,
    pair_rows,
    render,
    uda_accuracy,
    write_grid,
)
from .nn import SOURCE, TARGET
from .trainer import CheckpointError, TrainConfig, Trainer, TrainingDiverged, build_dataset, train

EXIT_OK, EXIT_USAGE, EXIT_MISMATCH, EXIT_DIVERGED = 0, 2, 3, 4

# config-file spellings that differ from TrainConfig field names
ALIASES = {"lambda": "lam"}
TUPLE_KEYS = {"gen_channels", "dsc_channels", "mlp_hidden"}
GRID_PAIRS = 8


class UsageError(Exception):
    pass


class Mismatch(Exception):
    pass


# -- config files -----------------------------------------------------------------------

def _coerce(key: str, raw: str, default):
    text = raw.strip()
    if key in TUPLE_KEYS:
        try:
            return tuple(int(v) for v in text.replace(" ", "").split(",") if v)
        except ValueError:
            raise UsageError(f"{key}: expected comma-separated integers, got {raw!r}") from None
    if key == "lr":
        if text.lower() == "none":
            return None
        default = 0.0
    if isinstance(default, bool):
        low = text.lower()
        if low in ("true", "yes", "1"):
            return True
        if low in ("false", "no", "0"):
            return False
        raise UsageError(f"{key}: expected true/false, got {raw!r}")
    try:
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise UsageError(f"{key}: invalid value {raw!r}") from None
    return text


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse strict ``key = value`` lines into TrainConfig keyword arguments.
    Blank lines and ``#`` comments are ignored; unknown or repeated keys are
    errors."""
    defaults = {f.name: f.default for f in fields(TrainConfig)}
    out, seen = {}, {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        name = ALIASES.get(key, key)
        if name not in defaults:
            raise UsageError(f"{source}:{lineno}: unknown key {key!r}")
        if name in seen:
            raise UsageError(f"{source}:{lineno}: duplicate key {key!r} (first set on line {seen[name]})")
        seen[name] = lineno
        out[name] = _coerce(name, value, defaults[name])
    return out


def load_config(path, overrides: Optional[dict] = None) -> TrainConfig:
    """Read a ``key = value`` file, or the resolved config of a run's
    ``manifest.json``, and apply ``overrides``."""
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    if p.suffix == ".json":
        try:
            kw = dict(json.loads(p.read_text())["config"])
        except (ValueError, KeyError, TypeError):
            raise UsageError(f"{p}: not a run manifest") from None
        known = {f.name for f in fields(TrainConfig)}
        unknown = sorted(set(kw) - known)
        if unknown:
            raise UsageError(f"{p}: unknown key(s) {unknown}")
    else:
        kw = parse_config_text(p.read_text(), str(p))
    kw.update(overrides or {})
    try:
        return TrainConfig(**kw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"{p}: {exc}") from None


def format_config(cfg: TrainConfig) -> str:
    lines = []
    for key, value in cfg.to_dict().items():
        if isinstance(value, list):
            value = ",".join(str(v) for v in value)
        elif value is None:
            value = "none"
        elif isinstance(value, bool):
            value = str(value).lower()
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{'lambda' if key == 'lam' else key} = {value}")
    return "\n".join(lines) + "\n"


# -- train --------------------------------------------------------------------------------

def _fixed_latents(trainer: Trainer, n: int = GRID_PAIRS) -> np.ndarray:
    # a private stream: sample grids never touch the training RNGs
    rng = np.random.default_rng([trainer.cfg.seed, 7])
    return rng.uniform(-1.0, 1.0, size=(n, trainer.gen.latent_dim))


def _sample_hook(out: Path):
    def hook(trainer: Trainer, it: int) -> None:
        if trainer.ds.meta.get("kind") != "image":
            return
        z = _fixed_latents(trainer)
        grid = pair_rows(render(trainer.gen, z, SOURCE), render(trainer.gen, z, TARGET), GRID_PAIRS)
        write_grid(grid, GRID_PAIRS, out / f"samples_{it}.pgm")
    return hook


def _build_dataset(cfg: TrainConfig, test: bool = False):
    try:
        return build_dataset(cfg, test=test)
    except (OSError, IdxError) as exc:
        raise UsageError(f"cannot build dataset {cfg.dataset!r}: {exc}") from None


def cmd_train(args) -> int:
    overrides = {}
    if args.uda:
        overrides["uda"] = True
    if args.seed is not None:
        overrides["seed"] = args.seed
    cfg = load_config(args.config, overrides)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = _build_dataset(cfg)
    (out / "config.txt").write_text(format_config(cfg))
    manifest = {
        "tool": "regcgan",
        "version": __version__,
        "config": cfg.to_dict(),
        "dataset": ds.meta,
        "out_dir": str(out),
        "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    t0 = time.time()
    status = EXIT_OK
    try:
        trainer, _ = train(cfg, ds, out, sample_hook=_sample_hook(out))
        manifest["final_iteration"] = trainer.iteration
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        manifest["diverged"] = str(exc)
        status = EXIT_DIVERGED
    manifest["seconds"] = round(time.time() - t0, 3)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    if status == EXIT_OK:
        print(f"final={out / 'final.bin'} iterations={trainer.iteration}")
    return status


# -- eval ---------------------------------------------------------------------------------

def _summary(values) -> str:
    values = np.asarray(values, dtype=np.float64)
    if len(values) == 1:
        return f"{values[0]:.4f}"
    return f"{values.mean():.4f}±{values.std():.4f}"


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _eval_correspondence(trainer: Trainer, args, out: Path) -> str:
    try:
        gt = ground_truth(trainer.ds)
    except MissingTransform as exc:
        raise Mismatch(str(exc)) from None
    reports = [correspondence_score(trainer.gen, gt, args.n, args.seed + t) for t in range(args.trials)]
    _write_csv(out / "correspondence.csv", ("trial", "n", "mean_error", "baseline_error"),
               [(t, r.n, repr(r.mean_error), repr(r.baseline_error)) for t, r in enumerate(reports)])
    return (f"mean_error={_summary([r.mean_error for r in reports])} "
            f"baseline_error={_summary([r.baseline_error for r in reports])}")


def _eval_uda(trainer: Trainer, args, out: Path) -> str:
    cfg = trainer.cfg
    if trainer.cls is None:
        raise Mismatch("checkpoint has no classifier head (trained without uda)")
    if trainer.ds.labels1 is None:
        raise Mismatch("target domain has no labels to score against")
    test = _build_dataset(cfg, test=True)
    acc_test = uda_accuracy(trainer.dsc, trainer.cls, test.domain1, test.labels1, TARGET)
    rows, sampled = [], []
    for t in range(args.trials):
        # only the sampling of the evaluated target subset is reseeded per trial
        ds = trainer.ds if t == 0 else _build_dataset(cfg.replace(data_seed=cfg.data_seed + t))
        acc = uda_accuracy(trainer.dsc, trainer.cls, ds.domain1, ds.labels1, TARGET)
        sampled.append(acc)
        rows.append((t, repr(acc), repr(acc_test)))
    _write_csv(out / "uda.csv", ("trial", "acc_sampled", "acc_test"), rows)
    return f"acc_sampled={_summary(sampled)} acc_test={_summary([acc_test] * args.trials)}"


def _eval_interp(trainer: Trainer, args, out: Path) -> str:
    rng = np.random.default_rng(args.seed)
    dim = trainer.gen.latent_dim
    rows0, rows1 = [], []
    for _ in range(args.trials):
        x0, x1 = interpolate(trainer.gen, rng.uniform(-1, 1, dim), rng.uniform(-1, 1, dim), args.steps)
        rows0.append(x0)
        rows1.append(x1)
    if trainer.ds.meta.get("kind") == "image":
        grid = pair_rows(np.concatenate(rows0), np.concatenate(rows1), args.steps)
        path = write_grid(grid, args.steps, out / "interp.pgm")
    else:
        path = out / "interp.csv"
        width = rows0[0].shape[1]
        _write_csv(path, ("trial", "step", "domain") + tuple(f"x{i}" for i in range(width)),
                   [(t, s, d, *map(repr, xs[t][s]))
                    for t in range(args.trials) for s in range(args.steps)
                    for d, xs in ((0, rows0), (1, rows1))])
    return f"interp={path}"


METRICS = {"correspondence": _eval_correspondence, "uda": _eval_uda, "interp": _eval_interp}


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise UsageError(f"checkpoint not found: {ckpt}")
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    try:
        trainer = Trainer.load(ckpt, ds=None)
    except (OSError, IdxError) as exc:
        raise UsageError(f"cannot rebuild the checkpoint's dataset: {exc}") from None
    except (CheckpointError, KeyError) as exc:
        raise UsageError(f"bad checkpoint {ckpt}: {exc}") from None
    out = Path(args.out) if args.out else ckpt.parent
    out.mkdir(parents=True, exist_ok=True)
    print(METRICS[args.metric](trainer, args, out))
    return EXIT_OK


# -- gradcheck ------------------------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    unknown = sorted(set(args.op or ()) - set(CASES))
    if unknown:
        raise UsageError(f"unknown check(s) {unknown}; choose from {sorted(CASES)}")
    results = run_suite(args.instances, args.seed, names=args.op or None)
    failed = [r for r in results if not r.passed]
    worst = max(r.max_error for r in results)
    if not failed:
        print(f"gradcheck ok: {len(results)} checks x {args.instances} instances, max_rel_error={worst:.3e}")
        return EXIT_OK
    print(f"{'op':<40} max_rel_error")
    for r in failed:
        print(f"{r.name:<40} {r.max_error:.3e}")
    print(f"gradcheck FAILED: {len(failed)} of {len(results)} checks", file=sys.stderr)
    return EXIT_MISMATCH


# -- entry point -----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="regcgan", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"regcgan {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a key = value config file")
    t.add_argument("--config", required=True)
    t.add_argument("--uda", action="store_true", help="enable the source-label classifier")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", default="run")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--metric", required=True, choices=sorted(METRICS))
    e.add_argument("--trials", type=int, default=1)
    e.add_argument("--n", type=int, default=1000, help="latents per correspondence trial")
    e.add_argument("--steps", type=int, default=8, help="interpolation steps")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", help="artifact directory (default: next to the checkpoint)")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference check every op and loss")
    g.add_argument("--instances", type=int, default=20)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--op", action="append", help="restrict to the named check (repeatable)")
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Mismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH


if __name__ == "__main__":
    sys.exit(main())
