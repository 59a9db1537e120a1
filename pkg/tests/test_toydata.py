import csv
import os

import numpy as np
import pytest

from flowshift import numerics as nx
from flowshift.toydata import (MAX_SHIFT, RADII, OracleError, dataset_generate, load_dataset, oracle_age,
                               oracle_attr, oracle_center, oracle_radius, rasterize, read_pgm, split_of,
                               synth_image, write_pgm)


class TestSynthesis:
    def test_clean_values_and_shape(self, rng):
        s = synth_image(2, 0, 0, 0, rng, noise=False, jitter=False)
        assert s.image.shape == (1, 32, 32) and s.image.dtype == np.uint8
        assert set(np.unique(s.image)) == {0, 255}
        assert s.radius == RADII[2]

    def test_ring_has_hole(self, rng):
        img = synth_image(3, 1, 0, 0, rng, noise=False, jitter=False).image[0]
        assert img[16, 16] == 0
        assert img[16, 16 + 12] == 255  # inside the 2-px band at distance 12

    def test_ring_band_width(self):
        d = np.hypot(*(np.mgrid[0:32, 0:32] - 16))
        mask = rasterize(10, 1, 16, 16)
        assert np.all((d[mask] >= 8) & (d[mask] < 10))

    def test_jitter_bounded(self, rng):
        radii = [synth_image(1, 0, 0, 0, rng).radius for _ in range(200)]
        assert min(radii) >= RADII[1] - 0.5 and max(radii) <= RADII[1] + 0.5

    @pytest.mark.parametrize("args", [(4, 0, 0, 0), (0, 2, 0, 0), (0, 0, MAX_SHIFT + 1, 0)])
    def test_invalid_arguments(self, rng, args):
        with pytest.raises(ValueError):
            synth_image(*args, rng)


class TestOracles:
    def test_recover_labels_on_noisy_samples(self):
        rng = nx.make_rng(11)
        hits = dict(age=0, attr=0)
        worst_center = 0.0
        for i in range(400):
            g, a = divmod(i % 8, 2)
            dx, dy = (int(v) for v in rng.integers(-MAX_SHIFT, MAX_SHIFT + 1, 2))
            s = synth_image(g, a, dx, dy, rng)
            hits["age"] += oracle_age(s.image) == g
            hits["attr"] += oracle_attr(s.image) == a
            cx, cy = oracle_center(s.image)
            worst_center = max(worst_center, abs(cx - 16 - dx), abs(cy - 16 - dy))
        assert hits == dict(age=400, attr=400)
        # the largest discs at the largest shifts touch the border and get clipped
        assert worst_center < 1.0

    def test_radius_estimates(self, rng):
        for g, r in enumerate(RADII):
            for a in (0, 1):
                est = oracle_radius(synth_image(g, a, 0, 0, rng, noise=False, jitter=False).image)
                assert abs(est - r) < 1.0

    def test_empty_image(self):
        with pytest.raises(OracleError):
            oracle_center(np.zeros((1, 32, 32), np.uint8))


class TestFiles:
    def test_pgm_round_trip(self, rng, tmp_path):
        img = rng.integers(0, 256, (1, 32, 32)).astype(np.uint8)
        path = tmp_path / "x.pgm"
        write_pgm(path, img)
        assert path.read_bytes().startswith(b"P5")
        np.testing.assert_array_equal(read_pgm(path), img)

    def test_split_is_deterministic_and_near_fraction(self):
        splits = [split_of(i) for i in range(5000)]
        assert splits == [split_of(i) for i in range(5000)]
        assert 0.17 < splits.count("test") / 5000 < 0.23

    def test_generate_balanced_deterministic(self, tmp_path):
        rows = dataset_generate(64, 3, tmp_path / "a")
        dataset_generate(64, 3, tmp_path / "b")
        for name in sorted(os.listdir(tmp_path / "a")):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        counts = np.zeros((4, 2), int)
        for r in rows:
            counts[r["g"], r["a"]] += 1
        assert np.all(counts == 8)
        with open(tmp_path / "a" / "manifest.csv") as fh:
            assert next(csv.reader(fh)) == ["file", "g", "a", "dx", "dy", "split"]

    def test_labels_match_images(self, tmp_path):
        dataset_generate(32, 5, tmp_path)
        ds = load_dataset(tmp_path)
        assert [oracle_age(im) for im in ds.images] == list(ds.g)
        assert [oracle_attr(im) for im in ds.images] == list(ds.a)

    def test_splits_disjoint(self, tmp_path):
        dataset_generate(80, 1, tmp_path)
        train, test = load_dataset(tmp_path, "train"), load_dataset(tmp_path, "test")
        assert not set(train.files) & set(test.files)
        assert len(train) + len(test) == 80

    def test_bad_count(self, tmp_path):
        with pytest.raises(ValueError):
            dataset_generate(10, 0, tmp_path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path)
