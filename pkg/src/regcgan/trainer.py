"""Alternating discriminator / generator updates, checkpoints and metrics.

One iteration is ``d_steps_per_g_step`` discriminator updates followed by
one generator update. Every random stream (parameter init per network,
latents, per-domain data cursors) is derived from the config seed, so a
config and a dataset fully determine a run.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import data as data_mod
from .data import BatchStream, DomainDataset, LatentSampler, PairedBatch, next_batch
from .nn import (
    SOURCE,
    TARGET,
    ClassifierHead,
    ClassifierSpec,
    DiscriminatorNet,
    GeneratorNet,
    conv_discriminator_spec,
    conv_generator_spec,
    mlp_discriminator_spec,
    mlp_generator_spec,
    pair_ids,
    split_pair,
)
from .objectives import LEAST_SQUARES, STANDARD, VARIANTS, LossWeights, compose_d_loss, compose_g_loss
from .optim import AdamState, adam_step
from .tensor import Graph, Tensor, backward, concat, slice_batch

log = logging.getLogger(__name__)

DEFAULT_LR = {STANDARD: 0.0002, LEAST_SQUARES: 0.0005}
DIVERGENCE_LIMIT = 1e6

METRICS_HEADER = ("iter", "loss_d", "loss_g", "reg_g", "reg_d", "cls", "acc_src")
COMPONENTS_HEADER = ("iter", "gan_d", "gan_g", "grad_norm_d", "grad_norm_g")

CHECKPOINT_MAGIC = b"RCGANCKP"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_checkpoint: Optional[str] = None):
        super().__init__(message if last_checkpoint is None else f"{message} (last good checkpoint: {last_checkpoint})")
        self.last_checkpoint = last_checkpoint


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    loss_variant: str = STANDARD
    lam: float = 0.1
    beta: float = 0.004
    gamma: float = 1.0
    lr: Optional[float] = None  # None: 2e-4 for standard, 5e-4 for least squares
    batch_size: int = 64
    iterations: int = 5000
    seed: int = 0
    uda: bool = False
    d_steps_per_g_step: int = 1
    checkpoint_every: int = 0
    sample_every: int = 0
    # dataset
    dataset: str = "glyphs"  # glyphs | rings | idx
    transform: str = "negative"
    resolution: int = 16
    n_samples: int = 2000
    data_seed: int = 0
    ring_scale: float = 1.5
    ring_rotation: float = 30.0
    ring_tx: float = 0.0
    ring_ty: float = 0.0
    source_images: str = ""
    source_labels: str = ""
    target_images: str = ""
    target_labels: str = ""
    target_test_images: str = ""
    target_test_labels: str = ""
    n_source: int = 2000
    n_target: int = 1800
    # architecture
    latent_dim: int = 64
    gen_channels: tuple = (128, 64, 32)
    dsc_channels: tuple = (32, 64)
    dsc_hidden: int = 256
    mlp_hidden: tuple = (64, 64)

    def __post_init__(self):
        self.gen_channels = tuple(int(c) for c in self.gen_channels)
        self.dsc_channels = tuple(int(c) for c in self.dsc_channels)
        self.mlp_hidden = tuple(int(c) for c in self.mlp_hidden)
        self.validate()

    def validate(self) -> None:
        if self.loss_variant not in VARIANTS:
            raise ValueError(f"loss_variant must be one of {VARIANTS}, got {self.loss_variant!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.d_steps_per_g_step < 1:
            raise ValueError("d_steps_per_g_step must be >= 1")
        if self.dataset not in ("glyphs", "rings", "idx"):
            raise ValueError(f"unknown dataset {self.dataset!r}")
        if self.lr is not None and not self.lr > 0:
            raise ValueError("lr must be positive")
        LossWeights(self.lam, self.beta, self.gamma)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lam, self.beta, self.gamma)

    @property
    def learning_rate(self) -> float:
        return DEFAULT_LR[self.loss_variant] if self.lr is None else self.lr

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("gen_channels", "dsc_channels", "mlp_hidden"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise KeyError(f"unknown config keys: {unknown}")
        return cls(**d)

    def replace(self, **changes) -> "TrainConfig":
        d = self.to_dict()
        d.update(changes)
        return TrainConfig.from_dict(d)


def build_dataset(cfg: TrainConfig, test: bool = False) -> DomainDataset:
    """Construct the dataset a config describes. ``test`` builds the
    held-out counterpart (fresh seed, or the target test IDX files)."""
    seed = cfg.data_seed + (1_000_003 if test else 0)
    if cfg.dataset == "glyphs":
        return data_mod.make_glyph_pairs(cfg.n_samples, cfg.resolution, cfg.transform, seed)
    if cfg.dataset == "rings":
        return data_mod.make_rings2d(cfg.n_samples, cfg.ring_scale, cfg.ring_rotation,
                                     (cfg.ring_tx, cfg.ring_ty), seed)
    source = data_mod.load_idx(cfg.source_images, cfg.source_labels)
    if test:
        target = data_mod.load_idx(cfg.target_test_images, cfg.target_test_labels)
        n_target = len(target[1])
    else:
        target = data_mod.load_idx(cfg.target_images, cfg.target_labels)
        n_target = cfg.n_target
    return data_mod.make_idx_pair(source, target, cfg.n_source, n_target, cfg.resolution, cfg.data_seed)


def build_networks(cfg: TrainConfig, ds: DomainDataset, seeds):
    if ds.meta.get("kind") == "points":
        gspec = mlp_generator_spec(cfg.latent_dim, cfg.mlp_hidden, ds.sample_shape[0])
        dspec = mlp_discriminator_spec(ds.sample_shape[0], cfg.mlp_hidden)
    else:
        res = ds.sample_shape[-1]
        gspec = conv_generator_spec(res, cfg.latent_dim, cfg.gen_channels)
        dspec = conv_discriminator_spec(res, cfg.dsc_channels, cfg.dsc_hidden)
    if tuple(gspec.output_shape) != tuple(ds.sample_shape):
        raise ValueError(f"generator output {gspec.output_shape} does not match samples {ds.sample_shape}")
    gen = GeneratorNet.create(gspec, seeds[0])
    dsc = DiscriminatorNet.create(dspec, seeds[1])
    cls = None
    if cfg.uda:
        if not ds.n_classes:
            raise ValueError("UDA mode needs a labeled source domain")
        cls = ClassifierHead.create(ClassifierSpec(dspec.feature_width, ds.n_classes), seeds[2])
    return gen, dsc, cls


@dataclass
class StepMetrics:
    iter: int
    loss_d: float
    loss_g: float
    reg_g: float
    reg_d: float
    cls: Optional[float]
    acc_src: Optional[float]
    gan_d: float = 0.0
    gan_g: float = 0.0
    grad_norm_d: float = 0.0
    grad_norm_g: float = 0.0

    def row(self, header) -> list:
        return ["" if getattr(self, k) is None else repr(getattr(self, k)) for k in header]


def _grad_norm(grads: dict) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def _named(grads: dict, leaves: dict) -> dict:
    return {name: grads[t] for name, t in leaves.items()}


class Trainer:
    """Holds both players, their optimizers and every RNG stream of a run."""

    def __init__(self, cfg: TrainConfig, ds: Optional[DomainDataset] = None):
        self.cfg = cfg
        self.ds = build_dataset(cfg) if ds is None else ds
        if cfg.uda and self.ds.labels0 is None:
            raise ValueError("UDA mode needs source labels")
        ss = np.random.SeedSequence(cfg.seed)
        s_gen, s_dsc, s_cls, s_latent, s_data = ss.spawn(5)
        init_seeds = [int(s.generate_state(1)[0]) for s in (s_gen, s_dsc, s_cls)]
        self.gen, self.dsc, self.cls = build_networks(cfg, self.ds, init_seeds)
        self.d_params = self.dsc.params if self.cls is None else self.dsc.params.merged(self.cls.params)
        lr = cfg.learning_rate
        self.adam_g = AdamState.for_params(self.gen.params, lr)
        self.adam_d = AdamState.for_params(self.d_params, lr)
        self.sampler = LatentSampler(self.gen.latent_dim, s_latent)
        self.stream = BatchStream(self.ds, s_data)
        self.weights = cfg.weights
        self.iteration = 0
        self.last_checkpoint: Optional[str] = None

    # -- updates --------------------------------------------------------------

    def _check(self, what: str, value: float) -> None:
        if not math.isfinite(value) or abs(value) > DIVERGENCE_LIMIT:
            raise TrainingDiverged(f"{what} = {value} at iteration {self.iteration}", self.last_checkpoint)

    def d_step(self, batch: PairedBatch):
        cfg = self.cfg
        b = batch.z.shape[0]
        g = Graph()
        pd = g.params(self.d_params)
        # generator outputs are built without a graph: detached from G
        (fake0, fake1), _ = self.gen.forward_pair(batch.z, train=True)
        # all four sample sets go through D as one stacked batch
        stacked = concat([batch.reals_d0, batch.reals_d1, fake0, fake1], axis=0)
        ids = np.concatenate([pair_ids(b), pair_ids(b)])
        score, taps = self.dsc.forward(stacked, ids, params=pd)
        s_r0, s_r1, s_f0, s_f1 = (slice_batch(score, i * b, (i + 1) * b) for i in range(4))
        hi = taps["D_hi"]
        logits = None
        if self.cls is not None:
            logits = self.cls.forward(slice_batch(hi, 0, b), params=pd)
        terms = compose_d_loss(
            cfg.loss_variant, self.weights,
            {"real0": s_r0, "real1": s_r1, "fake0": s_f0, "fake1": s_f1},
            {"fake0": slice_batch(hi, 2 * b, 3 * b), "fake1": slice_batch(hi, 3 * b, 4 * b)},
            logits=logits, labels=batch.labels_d0,
        )
        self._check("discriminator loss", terms.total.item())
        grads = _named(backward(g, terms.total), pd)
        adam_step(self.adam_d, self.d_params, grads)
        return terms, _grad_norm(grads)

    def g_step(self, batch: PairedBatch):
        cfg = self.cfg
        g = Graph()
        pg = g.params(self.gen.params)
        (fake0, fake1), (h0, h1) = self.gen.forward_pair(batch.z, params=pg, train=True, update_stats=True)
        # discriminator parameters enter as constants: only G is updated
        score, _ = self.dsc.forward(concat([fake0, fake1], axis=0), pair_ids(batch.z.shape[0]))
        s0, s1 = split_pair(score)
        terms = compose_g_loss(cfg.loss_variant, self.weights, {"fake0": s0, "fake1": s1},
                               {"fake0": h0, "fake1": h1})
        self._check("generator loss", terms.total.item())
        grads = _named(backward(g, terms.total), pg)
        adam_step(self.adam_g, self.gen.params, grads)
        return terms, _grad_norm(grads)

    def train_step(self, batch: PairedBatch) -> StepMetrics:
        """One D update then one G update on the same paired batch."""
        d_terms, gn_d = self.d_step(batch)
        g_terms, gn_g = self.g_step(batch)
        self.iteration += 1
        return StepMetrics(
            iter=self.iteration, loss_d=d_terms.total.item(), loss_g=g_terms.total.item(),
            reg_g=g_terms.reg, reg_d=d_terms.reg, cls=d_terms.cls, acc_src=d_terms.acc,
            gan_d=d_terms.gan, gan_g=g_terms.gan, grad_norm_d=gn_d, grad_norm_g=gn_g,
        )

    def next_batch(self) -> PairedBatch:
        return next_batch(self.stream, self.sampler, self.cfg.batch_size, uda=self.cfg.uda)

    def iterate(self) -> StepMetrics:
        for _ in range(self.cfg.d_steps_per_g_step - 1):
            self.d_step(self.next_batch())
        return self.train_step(self.next_batch())

    # -- persistence ------------------------------------------------------------

    def state_records(self) -> dict:
        rec = {}
        rec.update(self.gen.params)
        rec.update(self.gen.buffers)
        rec.update(self.d_params)
        rec.update(self.adam_g.to_records("adam_g"))
        rec.update(self.adam_d.to_records("adam_d"))
        return rec

    def state_meta(self) -> dict:
        return {
            "config": self.cfg.to_dict(),
            "iteration": self.iteration,
            "adam_g": self.adam_g.hyper(),
            "adam_d": self.adam_d.hyper(),
            "latent_rng": self.sampler.get_state(),
            "cursors": self.stream.get_state(),
        }

    def save(self, path) -> str:
        write_checkpoint(path, self.state_meta(), self.state_records())
        self.last_checkpoint = str(path)
        return str(path)

    @classmethod
    def load(cls, path, ds: Optional[DomainDataset] = None) -> "Trainer":
        meta, records = read_checkpoint(path)
        trainer = cls(TrainConfig.from_dict(meta["config"]), ds)
        trainer.restore(meta, records)
        trainer.last_checkpoint = str(path)
        return trainer

    def restore(self, meta: dict, records: dict) -> None:
        for store in (self.gen.params, self.gen.buffers, self.d_params):
            for name in store:
                if name not in records:
                    raise CheckpointError(f"checkpoint lacks record {name!r}")
                # copy into the existing arrays so shared views stay valid
                np.copyto(store[name], records[name].reshape(store[name].shape))
        self.adam_g = AdamState.from_records(meta["adam_g"], records, "adam_g")
        self.adam_d = AdamState.from_records(meta["adam_d"], records, "adam_d")
        self.sampler.set_state(meta["latent_rng"])
        self.stream.set_state(meta["cursors"])
        self.iteration = int(meta["iteration"])


# -- checkpoint file format ---------------------------------------------------------
#
#   magic   8 bytes  b"RCGANCKP"
#   version u32 LE
#   meta    u32 LE length + UTF-8 JSON (config echo, iteration, optimizer
#           hyperparameters, RNG and cursor states)
#   count   u32 LE number of records, then per record:
#           u32 name length, UTF-8 name, u32 rank, rank x u32 dims,
#           prod(dims) little-endian float64 values

def write_checkpoint(path, meta: dict, records: dict) -> None:
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts += [struct.pack("<I", len(blob)), blob, struct.pack("<I", len(records))]
    for name in sorted(records):
        arr = np.asarray(records[name], dtype="<f8")  # keeps rank 0, unlike ascontiguousarray
        key = name.encode("utf-8")
        parts += [struct.pack("<I", len(key)), key, struct.pack("<I", arr.ndim)]
        parts += [struct.pack(f"<{arr.ndim}I", *arr.shape), arr.tobytes()]
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def read_checkpoint(path):
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = 8

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"{path}: truncated checkpoint")
        out = raw[pos:pos + n]
        pos += n
        return out

    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (mlen,) = struct.unpack("<I", take(4))
    meta = json.loads(take(mlen).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    records = {}
    for _ in range(count):
        (klen,) = struct.unpack("<I", take(4))
        name = take(klen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        n = int(np.prod(dims, dtype=np.int64))
        records[name] = np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64).reshape(dims)
    return meta, records


# -- run loop --------------------------------------------------------------------------

class MetricsWriter:
    def __init__(self, out_dir: Optional[Path], append: bool = False):
        self.files = []
        self.writers = []
        if out_dir is None:
            return
        for fname, header in (("metrics.csv", METRICS_HEADER), ("components.csv", COMPONENTS_HEADER)):
            path = out_dir / fname
            exists = append and path.exists()
            fh = open(path, "a" if exists else "w", newline="")
            w = csv.writer(fh, lineterminator="\n")
            if not exists:
                w.writerow(header)
            self.files.append(fh)
            self.writers.append((w, header))

    def write(self, m: StepMetrics) -> None:
        for w, header in self.writers:
            w.writerow(m.row(header))

    def close(self) -> None:
        for fh in self.files:
            fh.close()


def train(cfg: TrainConfig, ds: Optional[DomainDataset] = None, out_dir=None,
          trainer: Optional[Trainer] = None, sample_hook=None):
    """Run ``cfg.iterations`` iterations (resuming ``trainer`` if given).

    With ``out_dir`` set, writes ``metrics.csv``, ``components.csv``,
    periodic ``ckpt_<iter>.bin`` files and a final ``final.bin``.
    Returns (trainer, list of StepMetrics).
    """
    out = None if out_dir is None else Path(out_dir)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    resumed = trainer is not None
    if trainer is None:
        trainer = Trainer(cfg, ds)
    writer = MetricsWriter(out, append=resumed)
    history = []
    try:
        if out is not None and not resumed:
            trainer.save(out / "ckpt_0.bin")
        while trainer.iteration < cfg.iterations:
            m = trainer.iterate()
            history.append(m)
            writer.write(m)
            it = trainer.iteration
            if out is not None and cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
                trainer.save(out / f"ckpt_{it}.bin")
            if sample_hook is not None and cfg.sample_every and it % cfg.sample_every == 0:
                sample_hook(trainer, it)
            if it % 500 == 0:
                log.info("iter %d loss_d %.4f loss_g %.4f reg_g %.4g reg_d %.4g",
                         it, m.loss_d, m.loss_g, m.reg_g, m.reg_d)
    finally:
        writer.close()
    if out is not None:
        trainer.save(out / "final.bin")
    return trainer, history
