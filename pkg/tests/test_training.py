import numpy as np
import pytest

from flowshift import numerics as nx
from flowshift.adversary import LossWeights
from flowshift.glow import Glow, GlowConfig, preprocess
from flowshift.ictm import ICTMConfig
from flowshift.semantics import MissingPrototype, akd_target
from flowshift.training import (ConfigError, TrainConfig, TrainingDiverged, _STREAM_GLOW_DATA, _STREAM_GLOW_INIT,
                                _STREAM_ICTM_DATA, compute_prototype_stage, encode_images, glow_from_checkpoint,
                                prototypes_from_checkpoint, train_glow, train_ictm, translator_from_checkpoint)

TINY_GLOW = dict(levels=2, steps=1, in_shape=[1, 8, 8], hidden=4)
TINY_ICTM = dict(flows=2, latent_channels=16, cond_channels=2, hidden=4)


def tiny_config(**kw):
    base = dict(seed=3, lr_glow=1e-3, lr_ictm=1e-3, micro_batch=4, accumulation=2, glow_iters=3, ictm_iters=3,
                disc_hidden=8, glow=TINY_GLOW, ictm=TINY_ICTM)
    base.update(kw)
    return TrainConfig.from_dict(base)


@pytest.fixture(scope="module")
def toy():
    rng = nx.make_rng(0)
    n = 32
    groups = np.arange(n) % 4
    attrs = (np.arange(n) // 4) % 2
    images = np.zeros((n, 1, 8, 8), np.uint8)
    for i, (g, a) in enumerate(zip(groups, attrs)):
        images[i, 0, 4 - g:4 + g, 4 - g:4 + g] = 200 if a == 0 else 100
    images = np.clip(images + rng.integers(0, 20, images.shape), 0, 255).astype(np.uint8)
    return images, groups, attrs


@pytest.fixture(scope="module")
def stage1(toy):
    images, groups, attrs = toy
    ckpt, rows = train_glow(tiny_config(), images)
    ckpt, table = compute_prototype_stage(ckpt, images, groups, attrs)
    latents = encode_images(glow_from_checkpoint(ckpt), images)
    return ckpt, rows, latents


class TestConfig:
    def test_defaults_follow_reference_settings(self):
        c = TrainConfig()
        assert (c.lr_glow, c.lr_ictm, c.lr_disc) == (1e-5, 1e-5, 1e-4)
        assert (c.micro_batch, c.accumulation, c.effective_batch) == (16, 4, 64)
        assert c.ictm.flows == 32 and c.ictm.n_groups == 4 and c.s == 1.0
        w = c.weights
        assert (w.akd, w.al, w.acl, w.cl, w.acl_d) == (1.0, 1.0, 1.0, 0.01, 0.1)

    def test_nested_round_trip(self):
        c = tiny_config(weights={"cl": 0.5})
        assert TrainConfig.from_dict(c.to_dict()) == c
        assert c.weights.cl == 0.5 and c.glow.in_shape == (1, 8, 8)

    @pytest.mark.parametrize("bad", [{"lr": 1}, {"glow": {"depth": 2}}, {"lr_glow": 0}, {"accumulation": 0},
                                     {"weights": {"al": -1}}])
    def test_rejects_bad_values(self, bad):
        with pytest.raises(ConfigError):
            TrainConfig.from_dict(bad)


class TestStageOne:
    def test_zero_iterations_is_data_initialized_model(self, toy):
        images, _, _ = toy
        cfg = tiny_config(glow_iters=0)
        ckpt, rows = train_glow(cfg, images)
        assert rows == []
        ref = Glow(cfg.glow, nx.make_rng(cfg.seed, _STREAM_GLOW_INIT))
        rng = nx.make_rng(cfg.seed, _STREAM_GLOW_DATA)
        idx = rng.integers(0, len(images), size=cfg.effective_batch)
        with nx.no_grad():
            ref.forward(preprocess(images[idx], rng)[0], init=True)
        state = ref.state_dict()
        assert set(state) == set(ckpt.group("glow"))
        for k, v in state.items():
            np.testing.assert_array_equal(ckpt.group("glow")[k], v)

    def test_log_and_determinism(self, toy, stage1, tmp_path):
        images, _, _ = toy
        _, rows, _ = stage1
        assert [r[0] for r in rows] == [1, 2, 3]
        path = tmp_path / "log.csv"
        train_glow(tiny_config(), images, log_path=path)
        text = path.read_text()
        assert text.splitlines()[0] == "iter,loss,nll,bpd"
        again = tmp_path / "again.csv"
        train_glow(tiny_config(), images, log_path=again)
        assert again.read_text() == text
        assert all(np.isfinite(r[1:]).all() for r in rows)

    def test_bits_per_dim_column(self, stage1):
        _, rows, _ = stage1
        for _, loss, nll, bpd in rows:
            assert bpd == pytest.approx(nll / (64 * np.log(2)), rel=1e-12)

    def test_accumulated_step_equals_big_batch_step(self, toy, f64):
        images, _, _ = toy
        cfg = GlowConfig(**TINY_GLOW)
        x, ld = preprocess(images[:16], noise=0.5)

        def fresh():
            g = Glow(cfg, nx.make_rng(1))
            with nx.no_grad():
                g.forward(x, init=True)
            return g

        big, acc = fresh(), fresh()
        opt_big = nx.Adam(big.parameters(), 1e-3)
        nx.mean(big.nll(x, ld)).backward()
        opt_big.step()
        opt_acc = nx.Adam(acc.parameters(), 1e-3)
        for k in range(4):
            sl = slice(4 * k, 4 * k + 4)
            nx.mean(acc.nll(x[sl], ld[sl])).backward()
        opt_acc.step(scale=0.25)
        for (name, a), (_, b) in zip(big.named_parameters(), acc.named_parameters()):
            assert np.abs(a.data - b.data).max() <= 1e-5, name

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_returns_last_good(self, toy):
        images, _, _ = toy
        with pytest.raises(TrainingDiverged) as info:
            train_glow(tiny_config(lr_glow=1e30, glow_iters=5), images)
        assert info.value.iteration >= 0
        assert info.value.checkpoint.meta["glow_iter"] == info.value.iteration
        for v in info.value.checkpoint.group("glow").values():
            assert np.all(np.isfinite(v))

    def test_shape_mismatch(self):
        with pytest.raises(nx.ShapeError):
            train_glow(tiny_config(), np.zeros((4, 1, 16, 16), np.uint8))


class TestStageTwo:
    def test_prototypes_stored(self, stage1, toy):
        ckpt, _, latents = stage1
        _, groups, attrs = toy
        table = prototypes_from_checkpoint(ckpt)
        mask = (groups == 2) & (attrs == 1)
        np.testing.assert_allclose(table.cell(2, 1), latents[mask].mean(0), atol=1e-6)

    def test_first_loss_is_closed_form_distillation(self, stage1, toy):
        ckpt, _, latents = stage1
        _, groups, attrs = toy
        cfg = tiny_config(ictm_iters=1, weights={"al": 0, "acl": 0, "cl": 0})
        _, rows = train_ictm(cfg, ckpt, latents, groups, attrs)
        table = prototypes_from_checkpoint(ckpt)
        rng = nx.make_rng(cfg.seed, _STREAM_ICTM_DATA)
        expected = 0.0
        for _ in range(cfg.accumulation):
            idx = rng.integers(0, len(latents), size=cfg.micro_batch)
            g_t = (groups[idx] + rng.integers(1, 4, size=cfg.micro_batch)) % 4
            target = akd_target(latents[idx], table, groups[idx], g_t, attrs[idx], cfg.s)
            expected += np.abs(latents[idx].astype(np.float64) - target).mean() / cfg.accumulation
        assert rows[0][1] == pytest.approx(expected, abs=1e-6)
        assert rows[0][2] == pytest.approx(expected, abs=1e-6)

    def test_order_frozen_flow_and_logs(self, stage1, toy, tmp_path):
        ckpt, _, latents = stage1
        _, groups, attrs = toy
        events = []
        log = tmp_path / "ictm.csv"
        out, rows = train_ictm(tiny_config(), ckpt, latents, groups, attrs, log_path=log, events=events)
        assert events == [("T", 1), ("D", 1), ("T", 2), ("D", 2), ("T", 3), ("D", 3)]
        for k, v in ckpt.group("glow").items():
            np.testing.assert_array_equal(out.group("glow")[k], v)
        assert log.read_text().splitlines()[0] == "iter,loss,akd,al,acl,cl,d_loss"
        assert all(np.isfinite(r[1:]).all() for r in rows)
        ictm, prior, disc = translator_from_checkpoint(out)
        assert disc is not None and out.meta["ictm_iter"] == 3
        # training moved the translator away from the identity
        assert any(np.abs(p.data).max() > 0 for n, p in ictm.named_parameters() if n.endswith("w_out"))

    def test_deterministic(self, stage1, toy):
        ckpt, _, latents = stage1
        _, groups, attrs = toy
        _, a = train_ictm(tiny_config(), ckpt, latents, groups, attrs)
        _, b = train_ictm(tiny_config(), ckpt, latents, groups, attrs)
        assert a == b

    def test_missing_prototype_cell(self, stage1, toy):
        ckpt, _, latents = stage1
        _, groups, attrs = toy
        broken = ckpt.copy()
        broken.tensors["proto_count/1/0"] = np.zeros(1)
        with pytest.raises(MissingPrototype, match=r"\(1, 0\)"):
            train_ictm(tiny_config(), broken, latents, groups, attrs)

    def test_latent_channels_checked(self, stage1, toy):
        ckpt, _, latents = stage1
        _, groups, attrs = toy
        with pytest.raises(nx.ShapeError):
            train_ictm(tiny_config(ictm=dict(TINY_ICTM, latent_channels=8)), ckpt, latents, groups, attrs)
