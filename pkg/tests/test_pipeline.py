import numpy as np
import pytest

from flowshift import numerics as nx
from flowshift.checkpoint import ModelCheckpoint
from flowshift.glow import Glow, GlowConfig, preprocess
from flowshift.ictm import ICTM, ICTMConfig, PriorGenerator
from flowshift.pipeline import (MISSING_CENTROID_PX, EvalReport, PairStats, Translator, evaluate, evaluate_fn,
                                translate_image)
from flowshift.semantics import compute_prototypes
from flowshift.toydata import ToyDataset, oracle_attr, synth_image
from flowshift.training import encode_images

GLOW = GlowConfig(levels=3, steps=1, hidden=8)
ICTM_CFG = ICTMConfig(flows=2, hidden=8)


def toy_set(n=24, seed=0, noise=True):
    rng = nx.make_rng(seed)
    samples = []
    for i in range(n):
        g, a = divmod(i % 8, 2)
        dx, dy = (int(v) for v in rng.integers(-2, 3, 2))
        samples.append(synth_image(g, a, dx, dy, rng, noise=noise))
    return ToyDataset(np.stack([s.image for s in samples]), np.array([s.g for s in samples]),
                      np.array([s.a for s in samples]), np.array([s.dx for s in samples]),
                      np.array([s.dy for s in samples]), [f"{i}" for i in range(n)])


@pytest.fixture(scope="module")
def data():
    return toy_set()


def make_checkpoint(data, with_ictm=True, randomize=False):
    rng = nx.make_rng(4)
    glow = Glow(GLOW, rng)
    x, _ = preprocess(data.images, noise=0.5)
    with nx.no_grad():
        glow.forward(x, init=True)
    ckpt = ModelCheckpoint(meta={"glow": GLOW.to_dict(), "train": {"s": 1.0}})
    ckpt.put("glow", glow.state_dict())
    table = compute_prototypes(encode_images(glow, data.images), data.g, data.a)
    ckpt.tensors.update(table.to_tensors())
    if with_ictm:
        ictm = ICTM(ICTM_CFG, rng)
        prior = PriorGenerator(4, ICTM_CFG.cond_channels, rng=rng)
        if randomize:
            for _, p in ictm.named_parameters():
                p.data = (p.data + 0.05 * rng.standard_normal(p.shape)).astype(p.dtype)
        ckpt.put("ictm", ictm.state_dict())
        ckpt.put("prior", prior.state_dict())
        ckpt.meta["ictm"] = ICTM_CFG.to_dict()
    return ckpt


@pytest.fixture(scope="module")
def identity_ckpt(data):
    return make_checkpoint(data)


@pytest.fixture(scope="module")
def random_ckpt(data):
    return make_checkpoint(data, randomize=True)


class TestTranslate:
    def test_zero_strength_edit_reproduces_input(self, data, identity_ckpt):
        out, _ = translate_image(data.images, 2, "glow-manip", identity_ckpt, s=0.0)
        np.testing.assert_array_equal(out, data.images)
        single, _ = translate_image(data.images[0], 3, "glow-attr-manip", identity_ckpt, s=0.0)
        np.testing.assert_array_equal(single, data.images[0])

    def test_untrained_translator_same_group_is_reconstruction(self, data, identity_ckpt):
        tr = Translator(identity_ckpt)
        x, _ = preprocess(data.images[:6], noise=0.5)
        recon = tr.decode(tr.encode(x))
        out, rec = tr.translate_x(x, data.g[:6], "ictm")
        assert np.abs(out - recon).max() <= 1e-2
        np.testing.assert_array_equal(tr.recovered_group(rec), data.g[:6])

    def test_cycle_through_inverse(self, data, random_ckpt):
        tr = Translator(random_ckpt)
        x, _ = preprocess(data.images[:8], noise=0.5)
        targets = (data.g[:8] + 1) % 4
        x_t, rec = tr.translate_x(x, targets, "ictm")
        back, _ = tr.translate_x(x_t, data.g[:8], "ictm-inverse", cond=rec)
        assert np.abs(back - x).max() <= 5e-2

    def test_prototype_modes_use_nearest_cell_by_default(self, data, identity_ckpt):
        tr = Translator(identity_ckpt, s=1.0)
        z = encode_images(tr.glow, data.images[:4])
        z_out, assumed = tr.translate_latent(z, 0, "glow-manip")
        g, _ = tr.nearest_cell(z)
        np.testing.assert_array_equal(assumed, g)
        assert z_out.shape == z.shape

    def test_missing_modules(self, data):
        tr = Translator(make_checkpoint(data, with_ictm=False))
        with pytest.raises(nx.NumericsError):
            tr.translate_image(data.images[:1], 1, "ictm")
        with pytest.raises(ValueError):
            tr.translate_image(data.images[:1], 1, "warp")


class TestEvaluate:
    def test_identity_translator(self, data):
        report = evaluate_fn(lambda im, t, s: im, data.images, data.g, "identity")
        assert report.age_accuracy == 0.0
        consistent = np.mean([oracle_attr(im) == oracle_attr(im) for im in data.images]) * 100
        assert report.attr_preservation == consistent
        assert report.displacement == 0.0
        assert report.cosine == pytest.approx(1.0)

    def test_resynthesizing_translator(self, data):
        def cheat(images, targets, sources):
            # full-set batches arrive in dataset order
            rng = nx.make_rng(0)
            return np.stack([synth_image(int(t), int(data.a[i]), int(data.dx[i]), int(data.dy[i]), rng).image
                             for i, t in enumerate(targets)])
        report = evaluate_fn(cheat, data.images, data.g, "cheat")
        assert report.age_accuracy == 100.0
        assert report.attr_preservation == 100.0

    def test_blank_output_is_penalized(self, data):
        report = evaluate_fn(lambda im, t, s: np.zeros_like(im), data.images, data.g, "blank")
        assert report.age_accuracy == 0.0 and report.attr_preservation == 0.0
        assert report.displacement == MISSING_CENTROID_PX

    def test_layout(self, data, identity_ckpt):
        report = evaluate(identity_ckpt, data, "glow-manip")
        assert sorted(report.pairs) == [(g, t) for g in range(4) for t in range(4) if g != t]
        assert sum(st.count for st in report.pairs.values()) == 3 * len(data)
        lines = report.to_csv().splitlines()
        assert lines[0] == "source,target,count,age_acc,attr_pres,displacement_px,cosine"
        assert len(lines) == 14
        table = report.to_table()
        assert "src\\tgt" in table and "attribute preservation" in table
        for key in ("age_accuracy", "attr_preservation"):
            assert 0.0 <= report.summary()[key] <= 100.0

    def test_deterministic(self, data, random_ckpt):
        a = evaluate(random_ckpt, data, "ictm").to_csv()
        b = evaluate(random_ckpt, data, "ictm").to_csv()
        assert a == b

    def test_empty_split(self, identity_ckpt):
        empty = ToyDataset(np.zeros((0, 1, 32, 32), np.uint8), *(np.zeros(0, int),) * 4, [])
        with pytest.raises(ValueError):
            evaluate(identity_ckpt, empty, "glow-manip")

    def test_report_mean_over_pairs(self):
        report = EvalReport("x")
        for i, k in enumerate(report.pair_keys()):
            report.pairs[k] = PairStats(count=1 + i, age_hits=1 + i if i % 2 else 0)
        assert report.age_accuracy == pytest.approx(50.0)
