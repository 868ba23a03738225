import numpy as np
import pytest

from regcgan import trainer as trainer_mod
from regcgan.trainer import (
    CheckpointError,
    TrainConfig,
    Trainer,
    TrainingDiverged,
    build_dataset,
    read_checkpoint,
    train,
    write_checkpoint,
)

TINY = dict(dataset="glyphs", resolution=8, n_samples=40, batch_size=4, latent_dim=6,
            gen_channels=(8, 4), dsc_channels=(4, 8), dsc_hidden=12, iterations=6)


def tiny(**kw):
    return TrainConfig(**{**TINY, **kw})


def snapshot(store):
    return {k: v.copy() for k, v in store.items()}


def same(a, b):
    return set(a) == set(b) and all(np.array_equal(a[k], b[k]) for k in a)


def test_config_defaults_and_learning_rates():
    cfg = TrainConfig()
    assert (cfg.lam, cfg.beta, cfg.gamma) == (0.1, 0.004, 1.0)
    assert cfg.learning_rate == 0.0002
    assert TrainConfig(loss_variant="least_squares").learning_rate == 0.0005
    assert TrainConfig(lr=0.01).learning_rate == 0.01


def test_config_round_trip_and_validation():
    cfg = tiny(lam=0.3)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(KeyError, match="bogus"):
        TrainConfig.from_dict({**cfg.to_dict(), "bogus": 1})
    for bad in (dict(loss_variant="wgan"), dict(batch_size=0), dict(dataset="cifar"),
                dict(lam=-1.0), dict(lr=0.0), dict(d_steps_per_g_step=0)):
        with pytest.raises(ValueError):
            tiny(**bad)


def test_test_split_uses_a_fresh_seed():
    cfg = tiny()
    a, b = build_dataset(cfg), build_dataset(cfg, test=True)
    assert not np.array_equal(a.domain0, b.domain0)


def test_runs_are_bit_identical(tmp_path):
    cfg = tiny()
    train(cfg, out_dir=tmp_path / "a")
    train(cfg, out_dir=tmp_path / "b")
    for name in ("metrics.csv", "components.csv", "final.bin"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_seed_changes_the_run(tmp_path):
    _, h0 = train(tiny(iterations=2))
    _, h1 = train(tiny(iterations=2, seed=1))
    assert h0[-1].loss_d != h1[-1].loss_d


def test_resume_reproduces_the_uninterrupted_trajectory(tmp_path):
    cfg = tiny(checkpoint_every=3)
    full, _ = train(cfg, out_dir=tmp_path / "full")
    resumed = Trainer.load(tmp_path / "full" / "ckpt_3.bin")
    assert resumed.iteration == 3
    resumed, _ = train(cfg, out_dir=tmp_path / "resumed", trainer=resumed)
    assert same(full.state_records(), resumed.state_records())
    rows_full = (tmp_path / "full" / "metrics.csv").read_text().splitlines()
    rows_res = (tmp_path / "resumed" / "metrics.csv").read_text().splitlines()
    assert rows_res[1:] == rows_full[4:]


def test_generator_step_leaves_discriminator_untouched():
    t = Trainer(tiny())
    batch = t.next_batch()
    d_before, g_before = snapshot(t.d_params), snapshot(t.gen.params)
    t.g_step(batch)
    assert same(d_before, t.d_params)
    assert not same(g_before, t.gen.params)


def test_discriminator_step_leaves_generator_untouched():
    t = Trainer(tiny())
    batch = t.next_batch()
    g_before, buf_before, d_before = snapshot(t.gen.params), snapshot(t.gen.buffers), snapshot(t.d_params)
    t.d_step(batch)
    assert same(g_before, t.gen.params) and same(buf_before, t.gen.buffers)
    assert not same(d_before, t.d_params)


def test_extra_discriminator_steps():
    t = Trainer(tiny(d_steps_per_g_step=3))
    t.iterate()
    assert t.adam_d.t == 3 and t.adam_g.t == 1 and t.iteration == 1


def test_metrics_file_layout(tmp_path):
    train(tiny(iterations=3), out_dir=tmp_path)
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0] == "iter,loss_d,loss_g,reg_g,reg_d,cls,acc_src"
    assert [l.split(",")[0] for l in lines[1:]] == ["1", "2", "3"]
    assert lines[1].endswith(",,")  # no classifier outside UDA mode
    assert (tmp_path / "ckpt_0.bin").exists() and (tmp_path / "final.bin").exists()


def test_uda_mode_trains_the_classifier():
    t, hist = train(tiny(uda=True, iterations=3))
    assert t.cls is not None
    assert all(m.cls is not None and 0.0 <= m.acc_src <= 1.0 for m in hist)
    assert any(k.startswith("cls.") for k in t.d_params)


def test_rings_use_mlp_networks():
    t, hist = train(TrainConfig(dataset="rings", n_samples=64, batch_size=8, latent_dim=4,
                                mlp_hidden=(8, 8), iterations=2))
    assert t.gen.spec.output_shape == (2,)
    assert len(hist) == 2


def test_unregularized_run_reports_but_ignores_regularizers():
    _, hist = train(tiny(lam=0.0, beta=0.0, iterations=2))
    assert all(m.reg_g > 0.0 for m in hist)
    assert all(m.loss_g == m.gan_g for m in hist)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported_with_last_checkpoint(tmp_path):
    cfg = tiny(checkpoint_every=2, iterations=6)
    t = Trainer(cfg)
    t.save(tmp_path / "ckpt_0.bin")
    t.dsc.params["dsc.score.bias"][...] = np.nan
    with pytest.raises(TrainingDiverged) as err:
        t.iterate()
    assert err.value.last_checkpoint == str(tmp_path / "ckpt_0.bin")


def test_divergence_on_huge_loss(monkeypatch):
    monkeypatch.setattr(trainer_mod, "DIVERGENCE_LIMIT", 1e-6)
    with pytest.raises(TrainingDiverged, match="iteration 0"):
        Trainer(tiny()).iterate()


def test_checkpoint_format_round_trip(tmp_path):
    recs = {"a": np.arange(6.0).reshape(2, 3), "s": np.array(2.5)}
    write_checkpoint(tmp_path / "c.bin", {"k": [1, 2]}, recs)
    meta, back = read_checkpoint(tmp_path / "c.bin")
    assert meta == {"k": [1, 2]}
    assert same(recs, back) and back["s"].shape == ()
    raw = (tmp_path / "c.bin").read_bytes()
    assert raw[:8] == b"RCGANCKP" and raw[8:12] == b"\x01\x00\x00\x00"


def test_corrupt_checkpoints_are_rejected(tmp_path):
    write_checkpoint(tmp_path / "c.bin", {}, {"a": np.ones(4)})
    raw = (tmp_path / "c.bin").read_bytes()
    cases = {"magic": b"XXXXXXXX" + raw[8:], "trunc": raw[:-3],
             "version": raw[:8] + b"\x09\x00\x00\x00" + raw[12:]}
    for name, blob in cases.items():
        (tmp_path / name).write_bytes(blob)
        with pytest.raises(CheckpointError):
            read_checkpoint(tmp_path / name)


def test_checkpoint_missing_record(tmp_path):
    t = Trainer(tiny())
    recs = t.state_records()
    recs.pop("gen.layer0.kernel")
    write_checkpoint(tmp_path / "c.bin", t.state_meta(), recs)
    with pytest.raises(CheckpointError, match="gen.layer0.kernel"):
        Trainer.load(tmp_path / "c.bin")
