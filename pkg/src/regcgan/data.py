"""Two-domain datasets, latent sampling, and paired mini-batches.

Datasets never keep the two domains index-aligned: each domain is shuffled
independently at construction, and training cursors draw from each domain
with their own permutations. The ground-truth cross-domain map is kept on
the dataset only for evaluation.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .tensor import Tensor

N_GLYPH_CLASSES = 4
N_RING_CLASSES = 4
RING_NOISE = 0.05
EDGE_THRESHOLD = 0.5

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


@dataclass
class DomainDataset:
    domain0: np.ndarray
    domain1: np.ndarray
    labels0: Optional[np.ndarray] = None
    labels1: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)
    # evaluation only; see regcgan.evaluate.ground_truth
    _gt_transform: Optional[Callable] = field(default=None, repr=False)

    @property
    def sample_shape(self) -> tuple:
        return self.domain0.shape[1:]

    @property
    def n_classes(self) -> Optional[int]:
        return self.meta.get("n_classes")

    @property
    def has_gt_transform(self) -> bool:
        return self._gt_transform is not None


# -- image transforms -----------------------------------------------------------

def negative(x: np.ndarray) -> np.ndarray:
    return -np.asarray(x)


def edge(x: np.ndarray) -> np.ndarray:
    """Binarized gradient magnitude of [..., H, W] images in [-1, 1].

    3x3 central differences with replicated borders; magnitude > 0.5 maps
    to +1, everything else to -1.
    """
    x = np.asarray(x, dtype=np.float64)
    pad = [(0, 0)] * (x.ndim - 2) + [(1, 1), (1, 1)]
    p = np.pad(x, pad, mode="edge")
    gx = 0.5 * (p[..., 1:-1, 2:] - p[..., 1:-1, :-2])
    gy = 0.5 * (p[..., 2:, 1:-1] - p[..., :-2, 1:-1])
    mag = np.sqrt(gx * gx + gy * gy)
    return np.where(mag > EDGE_THRESHOLD, 1.0, -1.0)


TRANSFORMS = {"negative": negative, "edge": edge}


# -- procedural glyphs ----------------------------------------------------------

def _segment_distance(px, py, x0, y0, x1, y1):
    dx, dy = x1 - x0, y1 - y0
    t = np.clip(((px - x0) * dx + (py - y0) * dy) / (dx * dx + dy * dy), 0.0, 1.0)
    return np.hypot(px - (x0 + t * dx), py - (y0 + t * dy))


def _draw_glyph(cls: int, res: int, rng: np.random.Generator) -> np.ndarray:
    c = (np.arange(res) + 0.5) / res
    px, py = np.meshgrid(c, c)
    thick = rng.uniform(0.09, 0.16)
    if cls == 0:  # horizontal bar
        y = rng.uniform(0.3, 0.7)
        x0, x1 = rng.uniform(0.1, 0.3), rng.uniform(0.7, 0.9)
        dist = _segment_distance(px, py, x0, y, x1, y)
    elif cls == 1:  # vertical stem
        x = rng.uniform(0.3, 0.7)
        y0, y1 = rng.uniform(0.1, 0.3), rng.uniform(0.7, 0.9)
        dist = _segment_distance(px, py, x, y0, x, y1)
    elif cls == 2:  # diagonal slash
        ang = rng.uniform(np.pi / 6, np.pi / 3) * rng.choice([-1.0, 1.0])
        cx, cy = rng.uniform(0.4, 0.6, size=2)
        half = rng.uniform(0.3, 0.4)
        dx, dy = half * np.cos(ang), half * np.sin(ang)
        dist = _segment_distance(px, py, cx - dx, cy - dy, cx + dx, cy + dy)
    else:  # ring
        cx, cy = rng.uniform(0.4, 0.6, size=2)
        r = rng.uniform(0.2, 0.32)
        dist = np.abs(np.hypot(px - cx, py - cy) - r)
    # soft stroke edge, one pixel wide
    ink = np.clip((thick - dist) * res + 0.5, 0.0, 1.0)
    return 2.0 * ink - 1.0


def make_glyph_pairs(n: int, resolution: int = 16, transform: str = "negative",
                     seed: int = 0) -> DomainDataset:
    """Procedural stroke glyphs (4 families) and their transformed twins.

    Domain 1 holds ``transform`` applied to each domain-0 glyph; the two
    domains are then shuffled independently.
    """
    if resolution not in (8, 16):
        raise ValueError(f"unsupported glyph resolution {resolution}; use 8 or 16")
    if transform not in TRANSFORMS:
        raise ValueError(f"unknown transform {transform!r}")
    if n < 1:
        raise ValueError("n must be >= 1")
    base, labels, twin = _glyph_construction(n, resolution, transform, seed)
    rng = np.random.default_rng([seed, 1])
    p0, p1 = rng.permutation(n), rng.permutation(n)
    return DomainDataset(
        domain0=base[p0], domain1=twin[p1], labels0=labels[p0], labels1=labels[p1],
        meta={"name": f"glyph-{transform}", "kind": "image", "resolution": resolution,
              "channels": 1, "n_classes": N_GLYPH_CLASSES},
        _gt_transform=TRANSFORMS[transform],
    )


def _glyph_construction(n, resolution, transform, seed):
    """Pre-shuffle arrays: (domain-0 glyphs, labels, transformed twins)."""
    rng = np.random.default_rng([seed, 0])
    labels = rng.integers(0, N_GLYPH_CLASSES, size=n)
    base = np.stack([_draw_glyph(int(k), resolution, rng) for k in labels])[:, None]
    return base, labels, TRANSFORMS[transform](base)


# -- 2-D rings -------------------------------------------------------------------

# Each class occupies a cluster near the upper edge of its quarter-circle
# sector; widths differ per class so that no rotation maps the density onto
# itself.
RING_CLUSTER_CENTER = np.deg2rad(62.0)
RING_CLUSTER_HALFWIDTH = np.deg2rad([6.0, 10.0, 14.0, 18.0])


def _ring_points(n: int, rng: np.random.Generator):
    labels = rng.integers(0, N_RING_CLASSES, size=n)
    ang = (labels * (np.pi / 2) + RING_CLUSTER_CENTER
           + rng.uniform(-1.0, 1.0, size=n) * RING_CLUSTER_HALFWIDTH[labels])
    pts = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    pts += rng.normal(0.0, RING_NOISE, size=pts.shape)
    return pts, labels


def affine_map(scale: float, rotation_deg: float, translation=(0.0, 0.0)) -> Callable:
    th = np.deg2rad(rotation_deg)
    rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    t = np.asarray(translation, dtype=np.float64)

    def f(x):
        return scale * np.asarray(x) @ rot.T + t

    return f


def make_rings2d(n: int, scale: float = 1.5, rotation_deg: float = 30.0, translation=(0.0, 0.0),
                 seed: int = 0) -> DomainDataset:
    """Noisy ring points in 4 angular classes (domain 0) and an affine image
    of an independent draw from the same distribution (domain 1)."""
    if not scale > 0:
        raise ValueError("scale must be positive")
    src, src_labels, base1, labels1, f = _rings_construction(n, scale, rotation_deg, translation, seed)
    return DomainDataset(
        domain0=src, domain1=f(base1), labels0=src_labels, labels1=labels1,
        meta={"name": "rings2d", "kind": "points", "n_classes": N_RING_CLASSES,
              "scale": scale, "rotation_deg": rotation_deg, "translation": list(translation)},
        _gt_transform=f,
    )


def _rings_construction(n, scale, rotation_deg, translation, seed):
    rng = np.random.default_rng([seed, 2])
    src, src_labels = _ring_points(n, rng)
    base1, labels1 = _ring_points(n, rng)
    return src, src_labels, base1, labels1, affine_map(scale, rotation_deg, translation)


# -- IDX ingestion ---------------------------------------------------------------

class IdxError(ValueError):
    pass


class IdxMagicError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class IdxCountMismatch(IdxError):
    pass


def _read_bytes(path) -> bytes:
    path = str(path)
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(raw: bytes, magic: int, ndims: int, what: str) -> np.ndarray:
    header = 4 + 4 * ndims
    if len(raw) < header:
        raise IdxTruncatedError(f"{what}: file too short for IDX header ({len(raw)} bytes)")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise IdxMagicError(f"{what}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndims}I", raw[4:header])
    need = int(np.prod(dims, dtype=np.int64))
    payload = raw[header:]
    if len(payload) < need:
        raise IdxTruncatedError(f"{what}: payload has {len(payload)} bytes, header promises {need}")
    return np.frombuffer(payload, dtype=np.uint8, count=need).reshape(dims)


def load_idx(images_path, labels_path):
    """Read an IDX image/label pair; pixels are mapped from [0, 255] to [-1, 1].

    Returns (samples [N,1,H,W] float64, labels [N] int64).
    """
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGE_MAGIC, 3, "images")
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABEL_MAGIC, 1, "labels")
    if images.shape[0] != labels.shape[0]:
        raise IdxCountMismatch(f"{images.shape[0]} images but {labels.shape[0]} labels")
    samples = images.astype(np.float64)[:, None] / 127.5 - 1.0
    return samples, labels.astype(np.int64)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images [N,H,W] and labels [N] in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, *images.shape))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABEL_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


def resize_nearest(samples: np.ndarray, target: int) -> np.ndarray:
    """Nearest-neighbour resize of square [..., H, H] images to target x target."""
    samples = np.asarray(samples)
    h, w = samples.shape[-2:]
    if h != w:
        raise ValueError(f"resize_nearest needs square images, got {h}x{w}")
    idx = (np.arange(target) * h) // target
    return samples[..., idx[:, None], idx[None, :]]


def make_idx_pair(source, target, n_source: int = 2000, n_target: int = 1800,
                  resolution: int = 14, seed: int = 0, names=("source", "target")) -> DomainDataset:
    """Random subsets of two labeled digit sets, resized to a common resolution.

    ``source``/``target`` are (samples, labels) tuples such as those
    returned by :func:`load_idx`. No ground-truth transform exists.
    """
    rng = np.random.default_rng([seed, 3])
    xs, ys = source
    xt, yt = target
    i0 = rng.choice(len(xs), size=min(n_source, len(xs)), replace=False)
    i1 = rng.choice(len(xt), size=min(n_target, len(xt)), replace=False)
    n_classes = int(max(ys.max(), yt.max())) + 1
    return DomainDataset(
        domain0=resize_nearest(xs[i0], resolution), domain1=resize_nearest(xt[i1], resolution),
        labels0=ys[i0], labels1=yt[i1],
        meta={"name": f"{names[0]}->{names[1]}", "kind": "image", "resolution": resolution,
              "channels": 1, "n_classes": n_classes},
    )


# -- sampling ----------------------------------------------------------------------

class LatentSampler:
    """Uniform latents on [-1, 1]^dim from a seeded generator."""

    def __init__(self, dim: int, seed=0):
        self.dim = dim
        self.rng = np.random.default_rng(seed)

    def sample(self, b: int) -> np.ndarray:
        return self.rng.uniform(-1.0, 1.0, size=(b, self.dim))

    def get_state(self) -> dict:
        return self.rng.bit_generator.state

    def set_state(self, state: dict) -> None:
        self.rng.bit_generator.state = state


class ShuffledCursor:
    """Epoch-wise permutation cursor over ``n`` items; reshuffles on wrap."""

    def __init__(self, n: int, seed=0):
        self.n = n
        self.rng = np.random.default_rng(seed)
        self.perm = self.rng.permutation(n)
        self.pos = 0

    def take(self, b: int) -> np.ndarray:
        out = []
        while b > 0:
            if self.pos == self.n:
                self.perm = self.rng.permutation(self.n)
                self.pos = 0
            k = min(b, self.n - self.pos)
            out.append(self.perm[self.pos:self.pos + k])
            self.pos += k
            b -= k
        return np.concatenate(out)

    def get_state(self) -> dict:
        return {"rng": self.rng.bit_generator.state, "perm": self.perm.tolist(), "pos": self.pos}

    def set_state(self, state: dict) -> None:
        self.rng.bit_generator.state = state["rng"]
        self.perm = np.asarray(state["perm"], dtype=np.int64)
        self.pos = int(state["pos"])


@dataclass
class PairedBatch:
    z: Tensor
    reals_d0: Tensor
    reals_d1: Tensor
    labels_d0: Optional[np.ndarray] = None


class BatchStream:
    """Independent per-domain cursors over a dataset."""

    def __init__(self, ds: DomainDataset, seed=0):
        ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        s0, s1 = ss.spawn(2)
        self.ds = ds
        self.cursors = (ShuffledCursor(len(ds.domain0), s0), ShuffledCursor(len(ds.domain1), s1))

    def get_state(self) -> list:
        return [c.get_state() for c in self.cursors]

    def set_state(self, state: list) -> None:
        for c, s in zip(self.cursors, state):
            c.set_state(s)


def next_batch(stream: BatchStream, sampler: LatentSampler, b: int, uda: bool = False) -> PairedBatch:
    """One latent per pair slot plus independently drawn reals per domain."""
    if b < 1:
        raise ValueError("batch size must be >= 1")
    ds = stream.ds
    i0 = stream.cursors[0].take(b)
    i1 = stream.cursors[1].take(b)
    labels = None
    if uda:
        if ds.labels0 is None:
            raise ValueError("UDA batches need source-domain labels")
        labels = ds.labels0[i0]
    return PairedBatch(
        z=Tensor(sampler.sample(b)),
        reals_d0=Tensor(ds.domain0[i0]),
        reals_d1=Tensor(ds.domain1[i1]),
        labels_d0=labels,
    )
