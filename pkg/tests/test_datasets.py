"""Dataset generators: determinism, balance, fixture goldens."""

import numpy as np
import pytest

from polyformer.datasets import CharDataset, ImageDataset, make_dataset
from polyformer.errors import ConfigError

GOLDEN_VOCAB = ["\n", " ", ",", "."] + list("abcdefghijklmnopqrstuvwxy")


class TestCharDataset:
    def test_same_seed_identical_splits(self):
        a = make_dataset("char_lm", 5)
        b = make_dataset("char_lm", 5)
        assert a.fingerprint() == b.fingerprint()

    def test_vocab_golden(self):
        ds = make_dataset("char_lm", 0)
        assert ds.vocab == GOLDEN_VOCAB
        assert ds.vocab_size == 29

    def test_corpus_fingerprint_golden(self):
        ds = make_dataset("char_lm", 0)
        assert ds.fingerprint() == (
            "bc924084845d04d2f881462f102c8f991e854dd34c3520e61847a422f15a4dce"
        )

    def test_batch_shapes_and_shift(self):
        ds = CharDataset(context=16, seed=0)
        rng = np.random.default_rng(0)
        x, y = ds.sample_batch(rng, "train", 4)
        assert x.shape == (4, 16) and y.shape == (4, 16)
        np.testing.assert_array_equal(x[:, 1:], y[:, :-1])

    def test_test_batches_deterministic(self):
        ds = CharDataset(context=16, seed=0)
        a = list(ds.test_batches(4, limit=2))
        b = list(ds.test_batches(4, limit=2))
        assert len(a) == 2
        for (xa, ya), (xb, yb) in zip(a, b):
            np.testing.assert_array_equal(xa, xb)
            np.testing.assert_array_equal(ya, yb)


class TestImageDataset:
    def test_same_seed_identical(self):
        a = make_dataset("synth_image", 3)
        b = make_dataset("synth_image", 3)
        assert a.fingerprint() == b.fingerprint()

    def test_different_seed_differs(self):
        assert make_dataset("synth_image", 1).fingerprint() != \
            make_dataset("synth_image", 2).fingerprint()

    def test_label_balance_within_one_percent(self):
        for classes in (2, 8):
            ds = ImageDataset(num_classes=classes, seed=0)
            counts = np.bincount(ds.train_labels, minlength=classes)
            frac = counts / counts.sum()
            assert np.abs(frac - 1.0 / classes).max() <= 0.01

    def test_classes_are_separable_by_orientation(self):
        # mean images of different classes should differ clearly
        ds = ImageDataset(num_classes=2, seed=0, noise=0.1)
        m0 = ds.train_images[ds.train_labels == 0].mean(axis=0)
        m1 = ds.train_images[ds.train_labels == 1].mean(axis=0)
        assert np.abs(m0 - m1).max() > 0.3

    def test_min_classes(self):
        with pytest.raises(ConfigError):
            ImageDataset(num_classes=1, seed=0)


def test_unknown_task():
    with pytest.raises(ConfigError):
        make_dataset("nope", 0)
