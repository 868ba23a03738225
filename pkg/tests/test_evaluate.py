import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from regcgan.data import make_glyph_pairs, make_idx_pair, negative
from regcgan.evaluate import (
    AblationReport,
    CorrespondenceReport,
    MissingTransform,
    ablation_compare,
    correspondence_score,
    ground_truth,
    interpolate,
    pair_rows,
    read_pgm,
    tile,
    to_bytes,
    uda_accuracy,
    write_grid,
)
from regcgan.nn import SOURCE, TARGET, GeneratorNet, conv_generator_spec
from regcgan.tensor import Tensor
from regcgan.trainer import TrainConfig


class StubGen:
    """G(z|0) = tanh(z W) and G(z|1) = sign * G(z|0) + shift."""

    latent_dim = 3

    def __init__(self, sign=-1.0, shift=0.0):
        self.w = np.random.default_rng(0).normal(size=(3, 4))
        self.sign, self.shift = sign, shift

    def forward(self, z, d, train=False):
        x = np.tanh(z.data @ self.w)
        if d.id == 1:
            x = self.sign * x + self.shift
        return Tensor(x), {}


def loop_mse(a, b):
    out = []
    for i in range(len(a)):
        s = 0.0
        for u, v in zip(a[i].ravel(), b[i].ravel()):
            s += (u - v) ** 2
        out.append(s / a[i].size)
    return np.array(out)


def test_exact_correspondence_scores_zero():
    rep = correspondence_score(StubGen(), negative, n=50, seed=1)
    assert rep.mean_error == 0.0 and rep.n == 50
    assert rep.baseline_error > 0.0


def test_correspondence_matches_loop_oracle():
    gen = StubGen(sign=-0.5, shift=0.1)
    rep = correspondence_score(gen, negative, n=40, seed=2)
    z = np.random.default_rng(2).uniform(-1, 1, (40, 3))
    x0 = np.tanh(z @ gen.w)
    want = loop_mse(-x0, -0.5 * x0 + 0.1)
    assert np.allclose(rep.per_sample_errors, want, atol=1e-15)
    assert rep.mean_error == pytest.approx(want.mean(), abs=1e-15)


def test_correspondence_single_latent_and_validation():
    rep = correspondence_score(StubGen(sign=1.0), negative, n=1)
    assert rep.per_sample_errors.shape == (1,)
    assert rep.baseline_error == rep.mean_error  # the only permutation of one item
    with pytest.raises(ValueError):
        correspondence_score(StubGen(), negative, n=0)
    with pytest.raises(MissingTransform):
        correspondence_score(StubGen(), None)


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 64))
def test_correspondence_is_independent_of_eval_chunking(chunk):
    gen = GeneratorNet.create(conv_generator_spec(8, 4, (4, 2)), seed=0)
    full = correspondence_score(gen, negative, n=37, seed=3)
    chunked = correspondence_score(gen, negative, n=37, seed=3, batch_size=chunk)
    assert np.allclose(full.per_sample_errors, chunked.per_sample_errors, rtol=0, atol=1e-12)


def test_correspondence_is_deterministic():
    gen = GeneratorNet.create(conv_generator_spec(8, 4, (4, 2)), seed=0)
    a = correspondence_score(gen, negative, n=20, seed=9)
    b = correspondence_score(gen, negative, n=20, seed=9)
    assert a.mean_error == b.mean_error and a.baseline_error == b.baseline_error


def test_ground_truth_lookup():
    assert ground_truth(make_glyph_pairs(4, 8)) is negative
    rng = np.random.default_rng(0)
    ds = make_idx_pair((rng.uniform(-1, 1, (5, 1, 8, 8)), np.arange(5)),
                       (rng.uniform(-1, 1, (5, 1, 8, 8)), np.arange(5)), 5, 5, 8)
    with pytest.raises(MissingTransform):
        ground_truth(ds)


class StubDsc:
    def forward(self, x, d):
        return Tensor(np.zeros((len(x.data), 1))), {"D_hi": x}


class StubCls:
    def __init__(self, w):
        self.w = w

    def forward(self, h):
        return Tensor(h.data @ self.w)


def test_uda_accuracy_counts():
    x = np.eye(3)[[0, 1, 2, 2, 1]]
    labels = np.array([0, 1, 2, 2, 1])
    assert uda_accuracy(StubDsc(), StubCls(np.eye(3)), x, labels, TARGET) == 1.0
    assert uda_accuracy(StubDsc(), StubCls(np.eye(3)[:, [1, 2, 0]]), x, labels, TARGET) == 0.0
    const = StubCls(np.tile([0.0, 5.0, 0.0], (3, 1)))
    assert uda_accuracy(StubDsc(), const, x, labels, TARGET) == pytest.approx(2 / 5)
    assert uda_accuracy(StubDsc(), StubCls(np.eye(3)), x, labels, TARGET, batch_size=2) == 1.0


def test_uda_accuracy_is_permutation_invariant():
    rng = np.random.default_rng(0)
    x, labels = rng.normal(size=(30, 3)), rng.integers(0, 3, 30)
    cls = StubCls(rng.normal(size=(3, 3)))
    p = rng.permutation(30)
    assert uda_accuracy(StubDsc(), cls, x, labels, SOURCE) == uda_accuracy(StubDsc(), cls, x[p], labels[p], SOURCE)


def test_interpolation_endpoints_and_midpoint():
    gen = GeneratorNet.create(conv_generator_spec(8, 4, (4, 2)), seed=1)
    rng = np.random.default_rng(0)
    za, zb = rng.uniform(-1, 1, 4), rng.uniform(-1, 1, 4)
    i0, i1 = interpolate(gen, za, zb, 3)
    assert i0.shape == i1.shape == (3, 1, 8, 8)
    for k, z in ((0, za), (1, 0.5 * (za + zb)), (2, zb)):
        assert np.allclose(i0[k], gen.forward(Tensor(z[None]), SOURCE)[0].data[0], atol=1e-12)
        assert np.allclose(i1[k], gen.forward(Tensor(z[None]), TARGET)[0].data[0], atol=1e-12)
    two = interpolate(gen, za, zb, 2)[0]
    assert np.array_equal(two[0], i0[0]) and np.array_equal(two[1], i0[2])
    with pytest.raises(ValueError):
        interpolate(gen, za, zb, 1)


def test_pixel_mapping():
    assert to_bytes(np.array([-1.0, 1.0, 0.0, -3.0, 9.0])).tolist() == [0, 255, 128, 0, 255]


def test_grid_layout_and_pgm(tmp_path):
    imgs = np.stack([np.full((1, 2, 3), v) for v in (1.0, -1.0, 1.0)])
    canvas = tile(imgs, 2)
    assert canvas.shape == (4, 6)
    assert np.all(canvas[:2, :3] == 1.0) and np.all(canvas[:2, 3:] == -1.0)
    assert np.all(canvas[2:, :3] == 1.0) and np.all(canvas[2:, 3:] == -1.0)  # empty cell is black
    path = write_grid(imgs, 2, tmp_path / "g.pgm")
    assert path.read_bytes().startswith(b"P5\n6 4\n255\n")
    pix = read_pgm(path)
    assert pix.shape == (4, 6) and pix[0, 0] == 255 and pix[0, 3] == 0
    with pytest.raises(ValueError):
        tile(np.zeros((2, 3, 4, 4)), 2)


def test_pair_rows_interleaves():
    a = np.stack([np.full((1, 1, 1), v) for v in (1.0, 2.0, 3.0)])
    out = pair_rows(a, -a, 2)
    assert out[:, 0, 0, 0].tolist() == [1.0, 2.0, -1.0, -2.0, 3.0, -1.0, -3.0, -1.0]


def test_ablation_csv_round_trip():
    reg = CorrespondenceReport(0.125, np.array([0.1, 0.15]), 0.5, 2)
    unreg = CorrespondenceReport(0.4, np.array([0.3, 0.5]), 0.6, 2)
    back = AblationReport.from_csv(AblationReport(reg, unreg).to_csv())
    assert back == {"regularized": {"n": 2, "mean_error": 0.125, "baseline_error": 0.5},
                    "unregularized": {"n": 2, "mean_error": 0.4, "baseline_error": 0.6}}


def test_ablation_runs_share_everything_but_the_weights():
    cfg = TrainConfig(resolution=8, n_samples=40, batch_size=4, latent_dim=6, gen_channels=(8, 4),
                      dsc_channels=(4, 8), dsc_hidden=12, iterations=2)
    rep = ablation_compare(cfg, n_eval=16)
    a, b = rep.first_metrics["regularized"], rep.first_metrics["unregularized"]
    # same init, data and latents: the first G regularizer value is identical
    assert a.reg_g == b.reg_g
    assert a.gan_d == b.gan_d
    assert a.loss_d != b.loss_d  # the D regularizer only counts in one of them
    assert rep.regularized.n == rep.unregularized.n == 16
