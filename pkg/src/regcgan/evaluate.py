"""Correspondence and adaptation metrics, ablations, interpolation, PGM grids."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .data import DomainDataset
from .nn import SOURCE, TARGET, ClassifierHead, DiscriminatorNet, DomainVar, GeneratorNet
from .tensor import Tensor

EVAL_BATCH = 256


class MissingTransform(ValueError):
    """The dataset has no ground-truth cross-domain transform."""


def ground_truth(ds: DomainDataset):
    if ds._gt_transform is None:
        raise MissingTransform(f"dataset {ds.meta.get('name', '?')!r} has no ground-truth transform")
    return ds._gt_transform


def render(gen: GeneratorNet, z: np.ndarray, d: DomainVar, batch_size: int = EVAL_BATCH) -> np.ndarray:
    """Eval-mode generator outputs for a latent matrix, in fixed-size chunks."""
    outs = []
    for i in range(0, len(z), batch_size):
        x, _ = gen.forward(Tensor(z[i:i + batch_size]), d, train=False)
        outs.append(x.data)
    return np.concatenate(outs)


@dataclass
class CorrespondenceReport:
    mean_error: float
    per_sample_errors: np.ndarray
    baseline_error: float
    n: int

    FIELDS = ("n", "mean_error", "baseline_error")

    def as_row(self) -> dict:
        return {"n": self.n, "mean_error": self.mean_error, "baseline_error": self.baseline_error}


def _per_sample_mse(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = (a - b).reshape(len(a), -1)
    return np.mean(diff * diff, axis=1)


def correspondence_score(gen: GeneratorNet, gt_transform, n: int = 1000, seed: int = 0,
                         batch_size: int = EVAL_BATCH) -> CorrespondenceReport:
    """Mean squared error between gt_transform(G(z|0)) and G(z|1) over ``n``
    latents, plus the same statistic with domain-1 outputs paired to a
    permutation of the latents."""
    if gt_transform is None:
        raise MissingTransform("correspondence needs a ground-truth transform")
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    z = rng.uniform(-1.0, 1.0, size=(n, gen.latent_dim))
    mapped = np.asarray(gt_transform(render(gen, z, SOURCE, batch_size)))
    x1 = render(gen, z, TARGET, batch_size)
    errs = _per_sample_mse(mapped, x1)
    perm = rng.permutation(n)
    base = _per_sample_mse(mapped, x1[perm])
    return CorrespondenceReport(float(errs.mean()), errs, float(base.mean()), n)


def uda_accuracy(dsc: DiscriminatorNet, cls: ClassifierHead, samples, labels, d: DomainVar,
                 batch_size: int = 512) -> float:
    """Fraction of samples whose argmax class logit matches the label."""
    samples = np.asarray(samples)
    labels = np.asarray(labels)
    correct = 0
    for i in range(0, len(samples), batch_size):
        _, taps = dsc.forward(Tensor(samples[i:i + batch_size]), d)
        logits = cls.forward(taps["D_hi"])
        correct += int(np.sum(np.argmax(logits.data, axis=1) == labels[i:i + batch_size]))
    return correct / len(samples)


def interpolate(gen: GeneratorNet, z_a, z_b, steps: int):
    """Render (1-t) z_a + t z_b for evenly spaced t in [0, 1] under both
    domains. Returns (domain0 images, domain1 images), each [steps, ...]."""
    if steps < 2:
        raise ValueError("steps must be >= 2")
    z_a, z_b = np.asarray(z_a, dtype=np.float64), np.asarray(z_b, dtype=np.float64)
    t = np.linspace(0.0, 1.0, steps)[:, None]
    z = (1.0 - t) * z_a[None, :] + t * z_b[None, :]
    z[0], z[-1] = z_a, z_b
    return render(gen, z, SOURCE), render(gen, z, TARGET)


# -- ablation ----------------------------------------------------------------------

@dataclass
class AblationReport:
    regularized: CorrespondenceReport
    unregularized: CorrespondenceReport
    first_metrics: dict = field(default_factory=dict)  # run label -> iteration-1 metrics row

    HEADER = ("run", "n", "mean_error", "baseline_error")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.HEADER)
        for label, rep in (("regularized", self.regularized), ("unregularized", self.unregularized)):
            w.writerow([label, rep.n, repr(rep.mean_error), repr(rep.baseline_error)])
        return buf.getvalue()

    @staticmethod
    def from_csv(text: str) -> dict:
        rows = list(csv.DictReader(io.StringIO(text)))
        return {r["run"]: {"n": int(r["n"]), "mean_error": float(r["mean_error"]),
                           "baseline_error": float(r["baseline_error"])} for r in rows}


def ablation_compare(cfg, ds: Optional[DomainDataset] = None, n_eval: int = 1000,
                     eval_seed: int = 12345) -> AblationReport:
    """Train with the configured weights and with lambda = beta = 0 from the
    same seed, and score both generators on the same latents."""
    from .trainer import build_dataset, train

    ds = build_dataset(cfg) if ds is None else ds
    gt = ground_truth(ds)
    reports, first = {}, {}
    for label, run_cfg in (("regularized", cfg), ("unregularized", cfg.replace(lam=0.0, beta=0.0))):
        trainer, history = train(run_cfg, ds)
        reports[label] = correspondence_score(trainer.gen, gt, n_eval, eval_seed)
        if history:
            first[label] = history[0]
    return AblationReport(reports["regularized"], reports["unregularized"], first)


# -- image grids ---------------------------------------------------------------------

def to_bytes(images: np.ndarray) -> np.ndarray:
    """Map [-1, 1] to 0..255 via round((v + 1) * 127.5), clamped."""
    v = np.rint((np.asarray(images, dtype=np.float64) + 1.0) * 127.5)
    return np.clip(v, 0, 255).astype(np.uint8)


def tile(images: np.ndarray, cols: int) -> np.ndarray:
    """Lay [N,1,H,W] images out row-major on a grid ``cols`` wide; empty
    cells are black."""
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[1] != 1:
        raise ValueError(f"tile needs single-channel [N,1,H,W] images, got {images.shape}")
    n, _, h, w = images.shape
    rows = -(-n // cols)
    canvas = np.full((rows * h, cols * w), -1.0)
    for i in range(n):
        r, c = divmod(i, cols)
        canvas[r * h:(r + 1) * h, c * w:(c + 1) * w] = images[i, 0]
    return canvas


def pair_rows(images0: np.ndarray, images1: np.ndarray, cols: int) -> np.ndarray:
    """Interleave two equally long image lists so each row of domain-0 images
    is followed by the row of their domain-1 counterparts."""
    images0, images1 = np.asarray(images0), np.asarray(images1)
    if images0.shape != images1.shape:
        raise ValueError("paired image sets differ in shape")
    out = []
    for start in range(0, len(images0), cols):
        row0, row1 = images0[start:start + cols], images1[start:start + cols]
        pad = cols - len(row0)
        if pad:
            fill = np.full((pad,) + images0.shape[1:], -1.0)
            row0, row1 = np.concatenate([row0, fill]), np.concatenate([row1, fill])
        out += [row0, row1]
    return np.concatenate(out)


def write_grid(images: np.ndarray, cols: int, path) -> Path:
    """Write a binary PGM (P5, maxval 255) of the tiled images."""
    pix = to_bytes(tile(images, cols))
    h, w = pix.shape
    path = Path(path)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)
