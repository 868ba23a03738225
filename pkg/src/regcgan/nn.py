"""Layer stacks, parameter stores, and the domain-conditioned networks.

The generator receives the one-hot domain code at the input of every
layer; the discriminator sees it only alongside the input image. Both
expose named activation taps: ``G_h0`` (generator first-layer output) and
``D_hi`` (discriminator last hidden layer, flattened).
"""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    batch_norm,
    bias_add,
    concat,
    conv2d,
    conv2d_transpose,
    flatten,
    leaky_relu,
    matmul,
    relu,
    reshape,
    slice_batch,
    tanh,
)
from .tensor.conv import conv_output_size, deconv_output_size

N_DOMAINS = 2
INIT_STD = 0.02
BN_MOMENTUM = 0.9
BN_EPS = 1e-5
LEAKY_SLOPE = 0.2


class ParamStore(Mapping):
    """Flat name -> float64 array store with sorted, deterministic iteration."""

    def __init__(self, entries: Optional[Mapping] = None):
        self._entries: dict = {}
        for name, value in (entries or {}).items():
            self.register(name, value)

    def register(self, name: str, value) -> None:
        if name in self._entries:
            raise KeyError(f"parameter {name!r} registered twice")
        self._entries[name] = np.array(value, dtype=np.float64)

    def __getitem__(self, name):
        return self._entries[name]

    def __setitem__(self, name, value):
        if name not in self._entries:
            raise KeyError(f"unknown parameter {name!r}")
        self._entries[name] = np.array(value, dtype=np.float64)

    def __iter__(self):
        return iter(sorted(self._entries))

    def __len__(self):
        return len(self._entries)

    def subset(self, prefix: str) -> "ParamStore":
        """A store sharing arrays with this one, restricted to ``prefix``."""
        out = ParamStore()
        out._entries = {k: v for k, v in self._entries.items() if k.startswith(prefix)}
        return out

    def merged(self, *others: "ParamStore") -> "ParamStore":
        out = ParamStore()
        out._entries = dict(self._entries)
        for other in others:
            for k, v in other._entries.items():
                if k in out._entries:
                    raise KeyError(f"parameter {k!r} registered twice")
                out._entries[k] = v
        return out

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self._entries.items()})

    def count(self) -> int:
        return int(sum(v.size for v in self._entries.values()))


@dataclass(frozen=True)
class DomainVar:
    id: int

    def __post_init__(self):
        if self.id not in range(N_DOMAINS):
            raise ValueError(f"domain id must be 0 or 1, got {self.id}")

    @property
    def encoding(self) -> np.ndarray:
        return np.eye(N_DOMAINS)[self.id]


SOURCE = DomainVar(0)
TARGET = DomainVar(1)


def domain_codes(d, n: int) -> np.ndarray:
    """One-hot domain codes [n x 2] for a DomainVar (shared by every row)
    or a length-n sequence of per-sample domain ids."""
    if isinstance(d, DomainVar):
        return np.broadcast_to(d.encoding, (n, N_DOMAINS))
    ids = np.asarray(d)
    if ids.shape != (n,):
        raise ShapeError(f"expected {n} per-sample domain ids, got shape {ids.shape}")
    if not np.isin(ids, np.arange(N_DOMAINS)).all():
        raise ValueError("domain ids must be 0 or 1")
    return np.eye(N_DOMAINS)[ids]


def inject_domain(x: Tensor, d, kind: Optional[str] = None) -> Tensor:
    """Append the domain one-hot to the feature axis (dense) or as two
    constant channels (conv). ``d`` is a DomainVar or per-sample ids."""
    if kind is None:
        kind = {2: "dense", 4: "conv"}.get(x.ndim)
    if kind == "dense" and x.ndim == 2:
        code = domain_codes(d, x.shape[0])
    elif kind == "conv" and x.ndim == 4:
        n, _, h, w = x.shape
        code = np.broadcast_to(domain_codes(d, n)[:, :, None, None], (n, N_DOMAINS, h, w))
    else:
        raise ShapeError(f"cannot inject a domain code into a rank-{x.ndim} tensor as {kind!r}")
    return concat([x, Tensor(np.array(code))], axis=1)


def pair_ids(b: int) -> np.ndarray:
    """Domain ids of a stacked pair batch: b rows of domain 0, then b of domain 1."""
    return np.repeat(np.arange(N_DOMAINS), b)


def split_pair(x: Tensor) -> tuple:
    """Undo the stacking of a pair batch into its (domain 0, domain 1) halves."""
    b = x.shape[0] // 2
    return slice_batch(x, 0, b), slice_batch(x, b, 2 * b)


# -- declarative specs --------------------------------------------------------

@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "dense", "conv" or "deconv"
    width: int  # output features / channels
    kernel: int = 1
    stride: int = 1
    pad: int = 0
    norm: bool = False
    act: str = "relu"  # "relu", "leaky_relu", "tanh" or "linear"

    def __post_init__(self):
        if self.kind not in ("dense", "conv", "deconv"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.act not in ("relu", "leaky_relu", "tanh", "linear"):
            raise ValueError(f"unknown activation {self.act!r}")


def _layer_shapes(in_shape: tuple, layers, conditioned_at) -> list:
    """Propagate per-sample shapes; returns (input_shape, output_shape) per layer."""
    shapes = []
    cur = tuple(in_shape)
    for i, layer in enumerate(layers):
        if layer.kind == "dense" and len(cur) == 3:
            cur = (int(np.prod(cur)),)
        extra = N_DOMAINS if conditioned_at(i) else 0
        if layer.kind == "dense":
            if len(cur) != 1:
                raise ShapeError(f"layer {i}: dense layer after shape {cur}")
            lin = (cur[0] + extra,)
            out = (layer.width,)
        else:
            if len(cur) != 3:
                raise ShapeError(f"layer {i}: {layer.kind} layer needs a (C,H,W) input, got {cur}")
            lin = (cur[0] + extra,) + cur[1:]
            size = conv_output_size if layer.kind == "conv" else deconv_output_size
            h = size(cur[1], layer.kernel, layer.stride, layer.pad)
            w = size(cur[2], layer.kernel, layer.stride, layer.pad)
            out = (layer.width, h, w)
        shapes.append((lin, out))
        cur = out
    return shapes


@dataclass(frozen=True)
class GeneratorSpec:
    latent_dim: int
    layers: tuple

    @property
    def input_shape(self) -> tuple:
        if self.layers[0].kind == "dense":
            return (self.latent_dim,)
        return (self.latent_dim, 1, 1)

    def shapes(self) -> list:
        return _layer_shapes(self.input_shape, self.layers, lambda i: True)

    @property
    def output_shape(self) -> tuple:
        return self.shapes()[-1][1]


@dataclass(frozen=True)
class DiscriminatorSpec:
    in_shape: tuple  # (C, H, W) images or (F,) points, without domain channels
    layers: tuple  # hidden layers; the last one's output is D_hi

    def shapes(self) -> list:
        return _layer_shapes(self.in_shape, self.layers, lambda i: i == 0)

    @property
    def feature_width(self) -> int:
        return int(np.prod(self.shapes()[-1][1]))


@dataclass(frozen=True)
class ClassifierSpec:
    in_features: int
    n_classes: int


def fit_channels(resolution: int, channels: tuple) -> tuple:
    """Longest prefix of ``channels`` whose upsampling chain ends exactly at
    ``resolution`` from a seed block of side >= 2."""
    for k in range(len(channels), 0, -1):
        if resolution % 2 ** k == 0 and resolution // 2 ** k >= 2:
            return tuple(channels[:k])
    raise ValueError(f"no upsampling chain reaches resolution {resolution}")


def conv_generator_spec(resolution: int = 16, latent_dim: int = 64,
                        channels: tuple = (128, 64, 32)) -> GeneratorSpec:
    """Transposed-conv generator: a 1x1 -> seed x seed block, then x2
    upsampling blocks (kernel 4, stride 2, pad 1) up to ``resolution``.

    Hidden blocks use batch-norm + relu; the output block is tanh. With the
    defaults this is 4 layers, 1 -> 2 -> 4 -> 8 -> 16.
    """
    channels = fit_channels(resolution, channels)
    seed = resolution // 2 ** len(channels)
    layers = [LayerSpec("deconv", channels[0], kernel=seed, stride=1, pad=0, norm=True)]
    layers += [LayerSpec("deconv", c, kernel=4, stride=2, pad=1, norm=True) for c in channels[1:]]
    layers.append(LayerSpec("deconv", 1, kernel=4, stride=2, pad=1, act="tanh"))
    return GeneratorSpec(latent_dim, tuple(layers))


def conv_discriminator_spec(resolution: int = 16, channels: tuple = (32, 64),
                            hidden: int = 256) -> DiscriminatorSpec:
    """Strided conv stack (leaky relu) and one dense hidden layer (= D_hi).

    Each conv halves the side: kernel 4 when the side is even, else 3.
    """
    layers, side = [], resolution
    for c in channels:
        k = 4 if side % 2 == 0 else 3
        layers.append(LayerSpec("conv", c, kernel=k, stride=2, pad=1, act="leaky_relu"))
        side = conv_output_size(side, k, 2, 1)
    layers.append(LayerSpec("dense", hidden, act="leaky_relu"))
    return DiscriminatorSpec((1, resolution, resolution), tuple(layers))


def mlp_generator_spec(latent_dim: int = 8, hidden: tuple = (64, 64),
                       out_dim: int = 2) -> GeneratorSpec:
    layers = [LayerSpec("dense", h) for h in hidden]
    layers.append(LayerSpec("dense", out_dim, act="linear"))
    return GeneratorSpec(latent_dim, tuple(layers))


def mlp_discriminator_spec(in_dim: int = 2, hidden: tuple = (64, 64)) -> DiscriminatorSpec:
    layers = tuple(LayerSpec("dense", h, act="leaky_relu") for h in hidden)
    return DiscriminatorSpec((in_dim,), layers)


# -- parameters ---------------------------------------------------------------

def _layer_param_shapes(layer: LayerSpec, lin: tuple) -> dict:
    cin = lin[0]
    if layer.kind == "dense":
        shapes = {"kernel": (cin, layer.width)}
    elif layer.kind == "conv":
        shapes = {"kernel": (layer.width, cin, layer.kernel, layer.kernel)}
    else:
        shapes = {"kernel": (cin, layer.width, layer.kernel, layer.kernel)}
    if layer.norm:
        shapes["bn_gamma"] = (layer.width,)
        shapes["bn_beta"] = (layer.width,)
    else:
        shapes["bias"] = (layer.width,)
    return shapes


def param_shapes(spec, prefix: str) -> dict:
    """Name -> shape for every trainable tensor of ``spec``."""
    out = {}
    if isinstance(spec, ClassifierSpec):
        out[f"{prefix}.kernel"] = (spec.in_features, spec.n_classes)
        out[f"{prefix}.bias"] = (spec.n_classes,)
        return out
    for i, (lin, _) in enumerate(spec.shapes()):
        for key, shape in _layer_param_shapes(spec.layers[i], lin).items():
            out[f"{prefix}.layer{i}.{key}"] = shape
    if isinstance(spec, DiscriminatorSpec):
        out[f"{prefix}.score.kernel"] = (spec.feature_width, 1)
        out[f"{prefix}.score.bias"] = (1,)
    return out


def param_count(spec) -> int:
    """Closed form: each layer has ``fan_in * width * k**2`` kernel entries,
    where ``fan_in`` includes the 2 domain channels wherever the code is
    injected, plus ``width`` biases (``2 * width`` with batch-norm); the
    discriminator adds ``feature_width + 1`` for the score layer and the
    classifier ``(f + 1) * K``."""
    if isinstance(spec, ClassifierSpec):
        return (spec.in_features + 1) * spec.n_classes
    total = 0
    for (lin, _), layer in zip(spec.shapes(), spec.layers):
        k2 = 1 if layer.kind == "dense" else layer.kernel ** 2
        total += lin[0] * layer.width * k2
        total += layer.width * (2 if layer.norm else 1)
    if isinstance(spec, DiscriminatorSpec):
        total += spec.feature_width + 1
    return total


def init_params(spec, seed: int, prefix: str) -> ParamStore:
    """Kernels ~ N(0, 0.02), biases and batch-norm shifts 0, batch-norm scales 1."""
    rng = np.random.default_rng(seed)
    store = ParamStore()
    for name, shape in param_shapes(spec, prefix).items():
        kind = name.rsplit(".", 1)[1]
        if kind == "kernel":
            value = rng.normal(0.0, INIT_STD, size=shape)
        elif kind == "bn_gamma":
            value = np.ones(shape)
        else:
            value = np.zeros(shape)
        store.register(name, value)
    return store


def _bind(store: ParamStore, params: Optional[Mapping]) -> Mapping:
    if params is not None:
        return params
    return {k: Tensor(v) for k, v in store.items()}


_ACT = {
    "relu": relu,
    "leaky_relu": lambda x: leaky_relu(x, LEAKY_SLOPE),
    "tanh": tanh,
    "linear": lambda x: x,
}


def _apply_layer(x: Tensor, layer: LayerSpec, p: Mapping, name: str,
                 bn_state: Optional[dict], train: bool, update_stats: bool) -> Tensor:
    if layer.kind == "dense":
        if x.ndim == 4:
            x = flatten(x)
        h = matmul(x, p[f"{name}.kernel"])
    elif layer.kind == "conv":
        h = conv2d(x, p[f"{name}.kernel"], stride=layer.stride, pad=layer.pad)
    else:
        h = conv2d_transpose(x, p[f"{name}.kernel"], stride=layer.stride, pad=layer.pad)

    if layer.norm:
        gamma, beta = p[f"{name}.bn_gamma"], p[f"{name}.bn_beta"]
        if train:
            h, mean, var = batch_norm(h, gamma, beta, BN_EPS)
            if update_stats:
                bn_state[f"{name}.bn_mean"] *= BN_MOMENTUM
                bn_state[f"{name}.bn_mean"] += (1 - BN_MOMENTUM) * mean
                bn_state[f"{name}.bn_var"] *= BN_MOMENTUM
                bn_state[f"{name}.bn_var"] += (1 - BN_MOMENTUM) * var
        else:
            h, _, _ = batch_norm(h, gamma, beta, BN_EPS,
                                 mean=bn_state[f"{name}.bn_mean"], var=bn_state[f"{name}.bn_var"])
    else:
        h = bias_add(h, p[f"{name}.bias"])
    return _ACT[layer.act](h)


# -- networks -----------------------------------------------------------------

@dataclass
class GeneratorNet:
    spec: GeneratorSpec
    params: ParamStore
    buffers: dict = field(default_factory=dict)  # batch-norm running statistics
    prefix: str = "gen"

    @classmethod
    def create(cls, spec: GeneratorSpec, seed: int, prefix: str = "gen") -> "GeneratorNet":
        net = cls(spec, init_params(spec, seed, prefix), prefix=prefix)
        for i, layer in enumerate(spec.layers):
            if layer.norm:
                net.buffers[f"{prefix}.layer{i}.bn_mean"] = np.zeros(layer.width)
                net.buffers[f"{prefix}.layer{i}.bn_var"] = np.ones(layer.width)
        return net

    @property
    def latent_dim(self) -> int:
        return self.spec.latent_dim

    def forward(self, z: Tensor, d, params: Optional[Mapping] = None,
                train: bool = False, update_stats: bool = False):
        if z.ndim != 2 or z.shape[1] != self.latent_dim:
            raise ShapeError(f"latent batch must be [b x {self.latent_dim}], got {z.shape}")
        p = _bind(self.params, params)
        x = z
        if self.spec.layers[0].kind != "dense":
            x = reshape(z, (z.shape[0], self.latent_dim, 1, 1))
        taps = {}
        for i, layer in enumerate(self.spec.layers):
            x = inject_domain(x, d, "dense" if x.ndim == 2 else "conv")
            x = _apply_layer(x, layer, p, f"{self.prefix}.layer{i}", self.buffers, train, update_stats)
            taps[f"layer{i}"] = x
        taps["G_h0"] = taps["layer0"]
        return x, taps

    def forward_pair(self, z: Tensor, params: Optional[Mapping] = None,
                     train: bool = False, update_stats: bool = False):
        """Render every latent under both domains in one stacked batch, so
        batch-norm statistics are shared by the two halves of each pair.
        Returns ((x_d0, x_d1), (h0_d0, h0_d1))."""
        zz = concat([z, z], axis=0)
        x, taps = self.forward(zz, pair_ids(z.shape[0]), params, train, update_stats)
        return split_pair(x), split_pair(taps["G_h0"])


@dataclass
class DiscriminatorNet:
    spec: DiscriminatorSpec
    params: ParamStore
    prefix: str = "dsc"

    @classmethod
    def create(cls, spec: DiscriminatorSpec, seed: int, prefix: str = "dsc") -> "DiscriminatorNet":
        return cls(spec, init_params(spec, seed, prefix), prefix=prefix)

    @property
    def feature_width(self) -> int:
        return self.spec.feature_width

    def forward(self, x: Tensor, d, params: Optional[Mapping] = None):
        if tuple(x.shape[1:]) != tuple(self.spec.in_shape):
            raise ShapeError(f"discriminator expects samples of shape {self.spec.in_shape}, got {x.shape[1:]}")
        p = _bind(self.params, params)
        h = inject_domain(x, d, "dense" if x.ndim == 2 else "conv")
        taps = {}
        for i, layer in enumerate(self.spec.layers):
            h = _apply_layer(h, layer, p, f"{self.prefix}.layer{i}", None, False, False)
            taps[f"layer{i}"] = h
        if h.ndim == 4:
            h = flatten(h)
        taps["D_hi"] = h
        score = bias_add(matmul(h, p[f"{self.prefix}.score.kernel"]), p[f"{self.prefix}.score.bias"])
        return score, taps


@dataclass
class ClassifierHead:
    spec: ClassifierSpec
    params: ParamStore
    prefix: str = "cls"

    @classmethod
    def create(cls, spec: ClassifierSpec, seed: int, prefix: str = "cls") -> "ClassifierHead":
        return cls(spec, init_params(spec, seed, prefix), prefix=prefix)

    def forward(self, features: Tensor, params: Optional[Mapping] = None) -> Tensor:
        if features.ndim != 2 or features.shape[1] != self.spec.in_features:
            raise ShapeError(f"classifier expects [b x {self.spec.in_features}] features, got {features.shape}")
        p = _bind(self.params, params)
        return bias_add(matmul(features, p[f"{self.prefix}.kernel"]), p[f"{self.prefix}.bias"])


def generator_forward(g: GeneratorNet, z: Tensor, d: DomainVar, **kw):
    return g.forward(z, d, **kw)


def discriminator_forward(dsc: DiscriminatorNet, x: Tensor, d: DomainVar, **kw):
    return dsc.forward(x, d, **kw)


def classify(c: ClassifierHead, features: Tensor, **kw) -> Tensor:
    return c.forward(features, **kw)
