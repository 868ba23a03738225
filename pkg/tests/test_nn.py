import numpy as np
import pytest

from regcgan.nn import (
    SOURCE,
    TARGET,
    ClassifierHead,
    ClassifierSpec,
    DiscriminatorNet,
    DomainVar,
    GeneratorNet,
    LayerSpec,
    ParamStore,
    classify,
    conv_discriminator_spec,
    conv_generator_spec,
    discriminator_forward,
    domain_codes,
    fit_channels,
    generator_forward,
    init_params,
    inject_domain,
    mlp_discriminator_spec,
    mlp_generator_spec,
    param_count,
    param_shapes,
)
from regcgan.tensor import Graph, ShapeError, Tensor, backward
from regcgan.tensor import ops


# hand-counted sizes of the default 16x16 networks (kernel entries + biases):
#   G: 66*128*2*2 + 256 | 130*64*16 + 128 | 66*32*16 + 64 | 34*1*16 + 1
#   D: 32*3*16 + 32 | 64*32*16 + 64 | 1024*256 + 256 | 256 + 1
GEN16_PARAMS = 34048 + 133248 + 33856 + 545
DSC16_PARAMS = 1568 + 32832 + 262400 + 257


def test_default_network_sizes():
    assert param_count(conv_generator_spec()) == GEN16_PARAMS == 201697
    assert param_count(conv_discriminator_spec()) == DSC16_PARAMS == 297057


@pytest.mark.parametrize("spec", [
    conv_generator_spec(),
    conv_generator_spec(8, 16, (8, 4)),
    conv_generator_spec(14, 10, (16, 8, 4)),
    conv_discriminator_spec(),
    conv_discriminator_spec(14, (4, 8), 16),
    mlp_generator_spec(),
    mlp_discriminator_spec(),
    ClassifierSpec(256, 10),
])
def test_param_count_closed_form_matches_shapes(spec):
    assert param_count(spec) == sum(int(np.prod(s)) for s in param_shapes(spec, "p").values())


def test_generator_shapes_per_resolution():
    assert conv_generator_spec(16).output_shape == (1, 16, 16)
    assert conv_generator_spec(8).output_shape == (1, 8, 8)
    spec14 = conv_generator_spec(14)
    assert spec14.output_shape == (1, 14, 14)
    assert spec14.layers[0].kernel == 7  # single upsampling block from a 7x7 seed
    assert [s[1][1] for s in conv_generator_spec(16).shapes()] == [2, 4, 8, 16]


def test_discriminator_kernel_adapts_to_odd_sides():
    spec = conv_discriminator_spec(14, (32, 64))
    assert [l.kernel for l in spec.layers[:2]] == [4, 3]
    assert spec.shapes()[1][1] == (64, 4, 4)


def test_fit_channels():
    assert fit_channels(16, (128, 64, 32)) == (128, 64, 32)
    assert fit_channels(8, (128, 64, 32)) == (128, 64)
    assert fit_channels(14, (128, 64, 32)) == (128,)
    with pytest.raises(ValueError):
        fit_channels(3, (8,))


def test_layer_spec_validation():
    with pytest.raises(ValueError):
        LayerSpec("pool", 4)
    with pytest.raises(ValueError):
        LayerSpec("dense", 4, act="gelu")


def test_init_distribution():
    store = init_params(conv_discriminator_spec(), seed=0, prefix="dsc")
    k = store["dsc.layer2.kernel"]
    assert abs(k.std() - 0.02) < 0.001 and abs(k.mean()) < 0.001
    assert not store["dsc.score.bias"].any()
    g = init_params(conv_generator_spec(), seed=0, prefix="gen")
    assert np.all(g["gen.layer0.bn_gamma"] == 1.0)
    assert "gen.layer0.bias" not in g and "gen.layer3.bias" in g


def test_init_is_seeded():
    a = init_params(mlp_generator_spec(), 5, "gen")
    b = init_params(mlp_generator_spec(), 5, "gen")
    c = init_params(mlp_generator_spec(), 6, "gen")
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not np.array_equal(a["gen.layer0.kernel"], c["gen.layer0.kernel"])


def test_param_store_contract():
    s = ParamStore()
    s.register("b", np.zeros(2))
    s.register("a", np.ones(3))
    assert list(s) == ["a", "b"] and s.count() == 5
    with pytest.raises(KeyError):
        s.register("a", np.zeros(1))
    view = s.subset("a")
    assert list(view) == ["a"]
    other = ParamStore({"c": np.zeros(1)})
    merged = s.merged(other)
    merged["a"][0] = 7.0  # merged stores share arrays with their parts
    assert s["a"][0] == 7.0
    copy = s.copy()
    copy["a"][0] = 0.0
    assert s["a"][0] == 7.0


def test_domain_encoding():
    assert SOURCE.encoding.tolist() == [1.0, 0.0]
    assert TARGET.encoding.tolist() == [0.0, 1.0]
    with pytest.raises(ValueError):
        DomainVar(2)
    assert domain_codes(np.array([1, 0]), 2).tolist() == [[0, 1], [1, 0]]
    with pytest.raises(ValueError):
        domain_codes(np.array([0, 3]), 2)


def test_inject_domain_conv_and_dense():
    x = inject_domain(Tensor(np.zeros((2, 3, 4, 4))), TARGET)
    assert x.shape == (2, 5, 4, 4)
    assert np.all(x.data[:, 3] == 0) and np.all(x.data[:, 4] == 1)
    y = inject_domain(Tensor(np.zeros((2, 3))), SOURCE)
    assert y.data[:, 3:].tolist() == [[1, 0], [1, 0]]
    with pytest.raises(ShapeError):
        inject_domain(Tensor(np.zeros(3)), SOURCE)


@pytest.fixture
def small_nets():
    gen = GeneratorNet.create(conv_generator_spec(8, 6, (8, 4)), seed=1)
    dspec = conv_discriminator_spec(8, (4, 8), 12)
    dsc = DiscriminatorNet.create(dspec, seed=2)
    cls = ClassifierHead.create(ClassifierSpec(dspec.feature_width, 4), seed=3)
    return gen, dsc, cls


def test_forward_shapes_and_taps(small_nets):
    gen, dsc, cls = small_nets
    z = Tensor(np.random.default_rng(0).uniform(-1, 1, (5, 6)))
    x, taps = generator_forward(gen, z, SOURCE, train=True)
    assert x.shape == (5, 1, 8, 8)
    assert np.all(np.abs(x.data) <= 1.0)
    assert taps["G_h0"].shape == (5, 8, 2, 2)
    score, dtaps = discriminator_forward(dsc, x, SOURCE)
    assert score.shape == (5, 1)
    assert dtaps["D_hi"].shape == (5, 12)
    assert classify(cls, dtaps["D_hi"]).shape == (5, 4)
    with pytest.raises(ShapeError):
        gen.forward(Tensor(np.zeros((5, 7))), SOURCE)
    with pytest.raises(ShapeError):
        dsc.forward(Tensor(np.zeros((5, 1, 4, 4))), SOURCE)


def test_domain_changes_generator_output(small_nets):
    gen, _, _ = small_nets
    z = Tensor(np.random.default_rng(0).uniform(-1, 1, (3, 6)))
    x0, _ = gen.forward(z, SOURCE)
    x1, _ = gen.forward(z, TARGET)
    assert not np.allclose(x0.data, x1.data)


def test_stacked_ids_equal_separate_forwards_in_eval_mode(small_nets):
    gen, dsc, _ = small_nets
    z = np.random.default_rng(1).uniform(-1, 1, (3, 6))
    (a0, a1), (h0, h1) = gen.forward_pair(Tensor(z))
    b0, t0 = gen.forward(Tensor(z), SOURCE)
    b1, _ = gen.forward(Tensor(z), TARGET)
    assert np.allclose(a0.data, b0.data) and np.allclose(a1.data, b1.data)
    assert np.allclose(h0.data, t0["G_h0"].data)
    stacked = np.concatenate([a0.data, a1.data])
    s, _ = dsc.forward(Tensor(stacked), np.array([0, 0, 0, 1, 1, 1]))
    assert np.allclose(s.data[:3], dsc.forward(a0, SOURCE)[0].data)


def test_paired_forward_shares_batch_statistics(small_nets):
    gen, _, _ = small_nets
    z = np.random.default_rng(2).uniform(-1, 1, (4, 6))
    (x0, _), _ = gen.forward_pair(Tensor(z), train=True)
    alone, _ = gen.forward(Tensor(z), SOURCE, train=True)
    # statistics over both halves differ from those of a single domain
    assert not np.allclose(x0.data, alone.data)


def test_running_stats_update_only_when_asked(small_nets):
    gen, _, _ = small_nets
    before = {k: v.copy() for k, v in gen.buffers.items()}
    z = Tensor(np.random.default_rng(3).uniform(-1, 1, (4, 6)))
    gen.forward(z, SOURCE, train=True)
    assert all(np.array_equal(before[k], gen.buffers[k]) for k in before)
    gen.forward(z, SOURCE, train=True, update_stats=True)
    assert not np.array_equal(before["gen.layer0.bn_mean"], gen.buffers["gen.layer0.bn_mean"])


def test_bound_params_receive_gradients(small_nets):
    gen, dsc, _ = small_nets
    g = Graph()
    pd = g.params(dsc.params)
    x = Tensor(np.random.default_rng(4).normal(size=(2, 1, 8, 8)))
    s, _ = dsc.forward(x, TARGET, params=pd)
    grads = backward(g, ops.reduce_sum(s))
    assert set(t.name for t in grads) == set(dsc.params)
    assert np.any(grads[pd["dsc.layer0.kernel"]] != 0)


def test_mlp_networks():
    gen = GeneratorNet.create(mlp_generator_spec(8, (16, 16)), seed=0)
    dsc = DiscriminatorNet.create(mlp_discriminator_spec(2, (16, 16)), seed=0)
    x, taps = gen.forward(Tensor(np.zeros((3, 8))), SOURCE, train=True)
    assert x.shape == (3, 2) and taps["G_h0"].shape == (3, 16)
    s, t = dsc.forward(x, SOURCE)
    assert s.shape == (3, 1) and t["D_hi"].shape == (3, 16)
