"""Finite-difference gradient suite over every op and composed loss.

Each case draws a fresh random instance per trial and reduces the op's
output to a scalar through a fixed random projection, so every output
element contributes to the checked gradient. Losses are looked up on the
``objectives`` module at call time, which lets tests swap in a broken
implementation and watch the suite catch it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import objectives
from .nn import (
    SOURCE,
    TARGET,
    ClassifierHead,
    ClassifierSpec,
    DiscriminatorNet,
    GeneratorNet,
    conv_discriminator_spec,
    conv_generator_spec,
)
from .objectives import LEAST_SQUARES, STANDARD, LossWeights
from .tensor import Tensor, grad_check, grad_check_params
from .tensor import ops as T
from .tensor.conv import conv2d, conv2d_transpose

TOL = 1e-3
STEP = 1e-5
NET_STEP = 1e-6  # smaller step through networks: fewer activation kinks straddled


@dataclass
class CheckResult:
    name: str
    instances: int
    max_error: float
    passed: bool


def _project(y: Tensor, r: np.ndarray) -> Tensor:
    return T.reduce_sum(T.mul(y, Tensor(r)))


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin + x, x)


def _shape(rng, rank=None):
    rank = rank or int(rng.integers(1, 5))
    return tuple(int(v) for v in rng.integers(1, 4, size=rank))


# Each case maps an rng to a list of (f, x) pairs: f is a scalar function of
# one tensor and x the point at which to check it.

def _unary(op):
    def case(rng):
        shp = _shape(rng)
        r = rng.normal(size=shp)
        return [(lambda t: _project(op(t), r), _away_from_zero(rng, shp))]
    return case


def _binary(op):
    def case(rng):
        shp = _shape(rng)
        a, b, r = rng.normal(size=shp), rng.normal(size=shp), rng.normal(size=shp)
        return [(lambda t: _project(op(t, Tensor(b)), r), a),
                (lambda t: _project(op(Tensor(a), t), r), b)]
    return case


def _scale_case(rng):
    shp = _shape(rng)
    c, r = float(rng.normal()), rng.normal(size=shp)
    return [(lambda t: _project(T.scale(t, c), r), rng.normal(size=shp))]


def _matmul_case(rng):
    m, k, n = (int(v) for v in rng.integers(1, 5, size=3))
    a, b, r = rng.normal(size=(m, k)), rng.normal(size=(k, n)), rng.normal(size=(m, n))
    return [(lambda t: _project(T.matmul(t, Tensor(b)), r), a),
            (lambda t: _project(T.matmul(Tensor(a), t), r), b)]


def _bias_add_case(rng):
    shp = _shape(rng, rank=int(rng.choice([2, 4])))
    x, b, r = rng.normal(size=shp), rng.normal(size=shp[1]), rng.normal(size=shp)
    return [(lambda t: _project(T.bias_add(t, Tensor(b)), r), x),
            (lambda t: _project(T.bias_add(Tensor(x), t), r), b)]


def _reduce_case(op):
    def case(rng):
        return [(lambda t: T.scale(op(t), 1.7), rng.normal(size=_shape(rng)))]
    return case


def _concat_case(rng):
    shp = _shape(rng, rank=int(rng.integers(2, 5)))
    axis = int(rng.integers(0, len(shp)))
    other = list(shp)
    other[axis] = int(rng.integers(1, 4))
    a, b = rng.normal(size=shp), rng.normal(size=other)
    r = rng.normal(size=np.concatenate([a, b], axis=axis).shape)
    return [(lambda t: _project(T.concat([t, Tensor(b)], axis), r), a),
            (lambda t: _project(T.concat([Tensor(a), t], axis), r), b)]


def _reshape_case(rng):
    shp = _shape(rng, rank=4)
    new = (shp[0] * shp[1], shp[2] * shp[3])
    r = rng.normal(size=new)
    return [(lambda t: _project(T.reshape(t, new), r), rng.normal(size=shp))]


def _flatten_case(rng):
    shp = _shape(rng, rank=4)
    r = rng.normal(size=(shp[0], shp[1] * shp[2] * shp[3]))
    return [(lambda t: _project(T.flatten(t), r), rng.normal(size=shp))]


def _squared_l2_case(rng):
    shp = _shape(rng)
    a, b = rng.normal(size=shp), rng.normal(size=shp)
    return [(lambda t: T.squared_l2(t, Tensor(b)), a), (lambda t: T.squared_l2(Tensor(a), t), b)]


def _log_softmax_case(rng):
    shp = (int(rng.integers(1, 5)), int(rng.integers(2, 6)))
    r = rng.normal(size=shp)
    return [(lambda t: _project(T.log_softmax(t), r), rng.normal(size=shp))]


def _batch_norm_case(train: bool):
    def case(rng):
        shp = _shape(rng, rank=int(rng.choice([2, 4])))
        shp = (shp[0] + 2,) + shp[1:]  # at least 3 samples so batch variance is nondegenerate
        c = shp[1]
        x, r = rng.normal(size=shp), rng.normal(size=shp)
        gamma, beta = rng.normal(size=c), rng.normal(size=c)
        stats = {} if train else {"mean": rng.normal(size=c), "var": rng.uniform(0.5, 2.0, size=c)}

        def f(which):
            def g(t):
                args = [Tensor(x), Tensor(gamma), Tensor(beta)]
                args[which] = t
                return _project(T.batch_norm(*args, **stats)[0], r)
            return g
        return [(f(0), x), (f(1), gamma), (f(2), beta)]
    return case


def _conv_geometry(rng, transpose: bool):
    n, cin, cout = (int(v) for v in rng.integers(1, 4, size=3))
    k = int(rng.integers(1, 5))
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, k))
    if transpose:
        h = int(rng.integers(1, 4))
        return n, cin, cout, k, stride, pad, h
    # pick an input side that tiles exactly
    ho = int(rng.integers(1, 4))
    h = (ho - 1) * stride + k - 2 * pad
    if h < 1:
        h = k
        pad = 0
        ho = (h - k) // stride + 1
    return n, cin, cout, k, stride, pad, h


def _conv_case(transpose: bool):
    op = conv2d_transpose if transpose else conv2d

    def case(rng):
        while True:
            n, cin, cout, k, s, p, h = _conv_geometry(rng, transpose)
            if not transpose or (h - 1) * s - 2 * p + k >= 1:
                break
        x = rng.normal(size=(n, cin, h, h))
        w = rng.normal(size=(cin, cout, k, k) if transpose else (cout, cin, k, k))
        b = rng.normal(size=cout)
        out = op(Tensor(x), Tensor(w), Tensor(b), stride=s, pad=p)
        r = rng.normal(size=out.shape)

        def f(which):
            def g(t):
                args = [Tensor(x), Tensor(w), Tensor(b)]
                args[which] = t
                return _project(op(*args, stride=s, pad=p), r)
            return g
        return [(f(0), x), (f(1), w), (f(2), b)]
    return case


def _scores(rng, b):
    return rng.normal(size=(b, 1))


def _gan_d_case(variant):
    def case(rng):
        b = int(rng.integers(1, 6))
        real, fake = _scores(rng, b), _scores(rng, b)
        return [(lambda t: objectives.gan_d_loss(variant, t, Tensor(fake)), real),
                (lambda t: objectives.gan_d_loss(variant, Tensor(real), t), fake)]
    return case


def _gan_g_case(variant):
    def case(rng):
        return [(lambda t: objectives.gan_g_loss(variant, t), _scores(rng, int(rng.integers(1, 6))))]
    return case


def _reg_case(name):
    def case(rng):
        shp = _shape(rng, rank=int(rng.choice([2, 4])))
        a, b = rng.normal(size=shp), rng.normal(size=shp)
        fn = lambda u, v: getattr(objectives, name)(u, v)
        return [(lambda t: fn(t, Tensor(b)), a), (lambda t: fn(Tensor(a), t), b)]
    return case


def _cls_case(rng):
    b, k = int(rng.integers(1, 6)), int(rng.integers(2, 6))
    labels = rng.integers(0, k, size=b)
    return [(lambda t: objectives.cls_loss(t, labels), rng.normal(size=(b, k)))]


# -- composed objectives over small networks ----------------------------------------------

RES, LATENT, BATCH = 8, 4, 3


def _nets(rng):
    seeds = [int(v) for v in rng.integers(0, 2**31, size=3)]
    gen = GeneratorNet.create(conv_generator_spec(RES, LATENT, (4, 3)), seeds[0])
    dspec = conv_discriminator_spec(RES, (3, 4), 6)
    dsc = DiscriminatorNet.create(dspec, seeds[1])
    cls = ClassifierHead.create(ClassifierSpec(dspec.feature_width, 3), seeds[2])
    # perturb away from the zero-bias, unit-gamma initialization
    for store in (gen.params, dsc.params, cls.params):
        for name in store:
            store[name] = store[name] + rng.normal(scale=0.3, size=store[name].shape)
    return gen, dsc, cls


def _images(rng):
    return np.tanh(rng.normal(size=(BATCH, 1, RES, RES)))


def _param_cases(loss_fn, params, rng, max_coords=4):
    """Wrap grad_check_params into the same (report list) shape as op cases."""
    return grad_check_params(loss_fn, params, h=NET_STEP, tol=TOL, max_coords=max_coords,
                             seed=int(rng.integers(0, 2**31))).values()


def _gen_objective(variant):
    def case(rng):
        gen, dsc, _ = _nets(rng)
        z = Tensor(rng.uniform(-1, 1, size=(BATCH, LATENT)))
        w = LossWeights(lam=float(rng.uniform(0.05, 1.0)))

        def loss(p):
            x0, t0 = gen.forward(z, SOURCE, params=p, train=True)
            x1, t1 = gen.forward(z, TARGET, params=p, train=True)
            s0, _ = dsc.forward(x0, SOURCE)
            s1, _ = dsc.forward(x1, TARGET)
            return objectives.compose_g_loss(variant, w, {"fake0": s0, "fake1": s1},
                                             {"fake0": t0["G_h0"], "fake1": t1["G_h0"]}).total
        return _param_cases(loss, dict(gen.params), rng)
    return case


def _dsc_objective(variant, uda: bool):
    def case(rng):
        _, dsc, cls = _nets(rng)
        r0, r1, f0, f1 = (Tensor(_images(rng)) for _ in range(4))
        labels = rng.integers(0, 3, size=BATCH)
        w = LossWeights(beta=float(rng.uniform(0.05, 1.0)), gamma=float(rng.uniform(0.5, 2.0)))
        params = dict(dsc.params)
        if uda:
            params.update(cls.params)

        def loss(p):
            s_r0, t_r0 = dsc.forward(r0, SOURCE, params=p)
            s_r1, _ = dsc.forward(r1, TARGET, params=p)
            s_f0, t_f0 = dsc.forward(f0, SOURCE, params=p)
            s_f1, t_f1 = dsc.forward(f1, TARGET, params=p)
            logits = cls.forward(t_r0["D_hi"], params=p) if uda else None
            return objectives.compose_d_loss(
                variant, w, {"real0": s_r0, "real1": s_r1, "fake0": s_f0, "fake1": s_f1},
                {"fake0": t_f0["D_hi"], "fake1": t_f1["D_hi"]},
                logits=logits, labels=labels if uda else None).total
        return _param_cases(loss, params, rng)
    return case


CASES: dict = {
    "add": _binary(T.add),
    "sub": _binary(T.sub),
    "mul": _binary(T.mul),
    "scale": _scale_case,
    "negate": _unary(T.negate),
    "relu": _unary(T.relu),
    "leaky_relu": _unary(lambda t: T.leaky_relu(t, 0.2)),
    "sigmoid": _unary(T.sigmoid),
    "tanh": _unary(T.tanh),
    "softplus": _unary(T.softplus),
    "matmul": _matmul_case,
    "bias_add": _bias_add_case,
    "reduce_sum": _reduce_case(T.reduce_sum),
    "reduce_mean": _reduce_case(T.reduce_mean),
    "concat": _concat_case,
    "reshape": _reshape_case,
    "flatten": _flatten_case,
    "squared_l2": _squared_l2_case,
    "log_softmax": _log_softmax_case,
    "batch_norm_train": _batch_norm_case(True),
    "batch_norm_eval": _batch_norm_case(False),
    "conv2d": _conv_case(False),
    "conv2d_transpose": _conv_case(True),
    "gan_d_loss_standard": _gan_d_case(STANDARD),
    "gan_d_loss_least_squares": _gan_d_case(LEAST_SQUARES),
    "gan_g_loss_standard": _gan_g_case(STANDARD),
    "gan_g_loss_least_squares": _gan_g_case(LEAST_SQUARES),
    "reg_g": _reg_case("reg_g"),
    "reg_d": _reg_case("reg_d"),
    "cls_loss": _cls_case,
    "generator_objective_standard": _gen_objective(STANDARD),
    "generator_objective_least_squares": _gen_objective(LEAST_SQUARES),
    "discriminator_objective_standard": _dsc_objective(STANDARD, False),
    "discriminator_objective_least_squares": _dsc_objective(LEAST_SQUARES, False),
    "adaptation_objective_standard": _dsc_objective(STANDARD, True),
    "adaptation_objective_least_squares": _dsc_objective(LEAST_SQUARES, True),
}


def check(name: str, instances: int = 20, seed: int = 0, tol: float = TOL) -> CheckResult:
    case = CASES[name]
    rng = np.random.default_rng([seed, sorted(CASES).index(name)])
    worst, ok = 0.0, True
    for _ in range(instances):
        for item in case(rng):
            rep = item if hasattr(item, "max_error") else grad_check(item[0], item[1], h=STEP, tol=tol)
            worst = max(worst, rep.max_error)
            ok = ok and rep.max_error <= tol
    return CheckResult(name, instances, worst, ok)


def run_suite(instances: int = 20, seed: int = 0, tol: float = TOL,
              names: Optional[list] = None, progress: Optional[Callable] = None) -> list:
    results = []
    for name in names or list(CASES):
        res = check(name, instances, seed, tol)
        results.append(res)
        if progress is not None:
            progress(res)
    return results
