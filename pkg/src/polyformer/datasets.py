"""Desk-scale datasets: an embedded character corpus and synthetic images.

The character corpus is generated once from a fixed internal seed (the
user seed only affects batch sampling), so every install sees the same
~100 KB text and the same vocabulary. Synthetic images are oriented bars
with additive noise, class-balanced by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

_CORPUS_SEED = 0x5EED_C0DE
_CORPUS_CHARS = 100_000

_WORDS = (
    "the of and to in is was for on that with as his they at be this have from "
    "or one had by word but not what all were when your can said there use an "
    "each which she do how their if will up other about out many then them so "
    "these would make like him into time has look two more write go see number "
    "no way could people my than first water been call who oil its now find "
    "long down day did get come made may part over new sound take only little "
    "work know place year live me back give most very after thing our just "
    "name good sentence man think say great where help through much before "
    "line right too mean old any same tell boy follow came want show also "
    "around form three small set put end does another well large must big "
    "even such because turn here why ask went men read need land different "
    "home us move try kind hand picture again change off play spell air away "
    "animal house point page letter mother answer found study still learn "
    "should world high every near add food between own below country plant "
    "last school father keep tree never start city earth eye light thought "
    "head under story saw left dont few while along might close something "
    "seem next hard open example begin life always those both paper together "
    "got group often run important until children side feet car mile night "
    "walk white sea began grow took river four carry state once book hear "
    "stop without second later miss idea enough eat face watch far really "
    "almost let above girl sometimes mountain cut young talk soon list song "
    "being leave family body music color stand sun questions fish area mark "
    "dog horse birds problem complete room knew since ever piece told usually "
    "didnt friends easy heard order red door sure become top ship across "
    "today during short better best however low hours black products happened "
    "whole measure remember early waves reached"
).split()


def _build_corpus() -> str:
    rng = np.random.default_rng(_CORPUS_SEED)
    words = np.array(_WORDS)
    # Zipf-flavored weights give the text learnable regularities.
    weights = 1.0 / np.arange(1, len(words) + 1) ** 0.8
    weights /= weights.sum()
    parts: list[str] = []
    total = 0
    while total < _CORPUS_CHARS:
        n = int(rng.integers(4, 12))
        sent = " ".join(rng.choice(words, size=n, p=weights))
        sent += "." if rng.random() < 0.8 else ","
        tail = "\n" if rng.random() < 0.2 else " "
        parts.append(sent + tail)
        total += len(sent) + 1
    return "".join(parts)


_corpus_cache: str | None = None


def corpus_text() -> str:
    global _corpus_cache
    if _corpus_cache is None:
        _corpus_cache = _build_corpus()
    return _corpus_cache


@dataclass
class CharDataset:
    """Character-level next-token-prediction corpus with a fixed vocab."""

    context: int
    seed: int

    def __post_init__(self):
        text = corpus_text()
        self.vocab = sorted(set(text))
        self.stoi = {c: i for i, c in enumerate(self.vocab)}
        ids = np.array([self.stoi[c] for c in text], dtype=np.int64)
        split = int(0.9 * len(ids))
        self.train_ids = ids[:split]
        self.test_ids = ids[split:]

    @property
    def task(self) -> str:
        return "char_lm"

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def sample_batch(self, rng: np.random.Generator, split: str, batch_size: int):
        ids = self.train_ids if split == "train" else self.test_ids
        starts = rng.integers(0, len(ids) - self.context - 1, batch_size)
        x = np.stack([ids[s: s + self.context] for s in starts])
        y = np.stack([ids[s + 1: s + self.context + 1] for s in starts])
        return x, y

    def test_batches(self, batch_size: int, limit: int | None = None):
        """Deterministic, non-overlapping evaluation windows."""
        ids = self.test_ids
        step = self.context
        windows = []
        for s in range(0, len(ids) - self.context - 1, step):
            windows.append((ids[s: s + self.context], ids[s + 1: s + self.context + 1]))
        if limit is not None:
            windows = windows[:limit * batch_size]
        for i in range(0, len(windows), batch_size):
            chunk = windows[i: i + batch_size]
            if len(chunk) < batch_size:
                break
            yield np.stack([c[0] for c in chunk]), np.stack([c[1] for c in chunk])

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256()
        h.update(self.train_ids.tobytes())
        h.update(self.test_ids.tobytes())
        return h.hexdigest()


def _oriented_bar(rng: np.random.Generator, size: int, angle: float,
                  noise: float) -> np.ndarray:
    """One bar through a jittered center at the class angle, plus noise."""
    ys, xs = np.mgrid[0:size, 0:size]
    cy = (size - 1) / 2 + rng.uniform(-2.0, 2.0)
    cx = (size - 1) / 2 + rng.uniform(-2.0, 2.0)
    nx, ny = -np.sin(angle), np.cos(angle)
    dist = np.abs((xs - cx) * nx + (ys - cy) * ny)
    img = np.exp(-(dist ** 2) / 2.0)
    return img + rng.normal(0.0, noise, (size, size))


@dataclass
class ImageDataset:
    """Oriented-bar classification at 16x16, class-balanced by construction."""

    num_classes: int = 8
    seed: int = 0
    size: int = 16
    train_count: int = 1024
    test_count: int = 256
    noise: float = 0.25

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")
        rng = np.random.default_rng(self.seed)
        self.train_images, self.train_labels = self._generate(rng, self.train_count)
        self.test_images, self.test_labels = self._generate(rng, self.test_count)

    def _generate(self, rng, count):
        labels = np.arange(count) % self.num_classes  # exact balance
        perm = rng.permutation(count)
        labels = labels[perm]
        images = np.stack([
            _oriented_bar(rng, self.size, np.pi * lab / self.num_classes, self.noise)
            for lab in labels
        ])
        return images, labels.astype(np.int64)

    @property
    def task(self) -> str:
        return "synth_image"

    def sample_batch(self, rng: np.random.Generator, split: str, batch_size: int):
        imgs = self.train_images if split == "train" else self.test_images
        labs = self.train_labels if split == "train" else self.test_labels
        idx = rng.integers(0, len(labs), batch_size)
        return imgs[idx], labs[idx]

    def test_batches(self, batch_size: int, limit: int | None = None):
        n = len(self.test_labels)
        if limit is not None:
            n = min(n, limit * batch_size)
        for i in range(0, n - batch_size + 1, batch_size):
            yield self.test_images[i: i + batch_size], self.test_labels[i: i + batch_size]

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256()
        h.update(self.train_images.tobytes())
        h.update(self.train_labels.tobytes())
        h.update(self.test_images.tobytes())
        h.update(self.test_labels.tobytes())
        return h.hexdigest()


def make_dataset(task: str, seed: int, **kwargs):
    """Build the train/test splits for a named desk-scale task."""
    if task == "char_lm":
        return CharDataset(context=kwargs.get("context", 64), seed=seed)
    if task == "synth_image":
        return ImageDataset(
            num_classes=kwargs.get("num_classes", 8),
            seed=seed,
            size=kwargs.get("size", 16),
        )
    raise ConfigError(f"unknown task {task!r}")
