"""Seeded synthetic datasets: blob images for classification, planted mixtures for GMM/KL checks."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidSpec
from .gmm import DiagGmm
from .tensorio import DatasetManifest, Sample, write_manifest, write_pgm

SPLITS = ("train", "val", "test")


@dataclass
class BlobSpec:
    """Gaussian-intensity blobs whose size and position depend on the class.

    ``centers`` are (row, col) fractions of the image size, ``spreads`` blob
    standard deviations in pixels, one per class.
    """

    n_classes: int = 2
    size: int = 28
    counts: dict = field(default_factory=lambda: {"train": 100, "val": 20, "test": 40})
    centers: list | None = None
    spreads: list | None = None
    jitter: float = 2.0
    noise: float = 0.05
    background: float = 0.1
    seed: int = 0
    kind: str = "blob_images"

    def __post_init__(self):
        if self.n_classes < 2:
            raise InvalidSpec("blob datasets need at least two classes")
        if self.size < 1:
            raise InvalidSpec("image size must be positive")
        if set(self.counts) - set(SPLITS) or any(int(v) < 1 for v in self.counts.values()):
            raise InvalidSpec(f"counts must map {SPLITS} to positive integers, got {self.counts}")
        if self.centers is None:
            angles = 2 * np.pi * np.arange(self.n_classes) / self.n_classes
            self.centers = [[0.5 + 0.2 * np.sin(a), 0.5 + 0.2 * np.cos(a)] for a in angles]
        if self.spreads is None:
            self.spreads = list(np.linspace(2.0, 6.0, self.n_classes))
        if len(self.centers) != self.n_classes or len(self.spreads) != self.n_classes:
            raise InvalidSpec("need one center and one spread per class")
        if any(s <= 0 for s in self.spreads) or self.noise < 0 or self.jitter < 0:
            raise InvalidSpec("spreads must be positive; noise and jitter nonnegative")


@dataclass
class MixtureSpec:
    """A planted diagonal mixture; ``counts`` fixes how many rows each component emits."""

    means: list
    stds: list
    counts: list | None = None
    n: int | None = None
    weights: list | None = None
    seed: int = 0
    kind: str = "planted_mixture"

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        K, d = self.means.shape
        stds = np.asarray(self.stds, dtype=np.float64)
        if stds.ndim == 0:
            stds = np.full((K, d), float(stds))
        elif stds.ndim == 1:
            if stds.size != K:
                raise InvalidSpec("need one std per component")
            stds = np.repeat(stds[:, None], d, axis=1)
        if stds.shape != (K, d) or np.any(stds <= 0):
            raise InvalidSpec("stds must be positive, one per component (or per component and dim)")
        self.stds = stds
        if self.counts is None:
            if self.n is None or self.n < 1:
                raise InvalidSpec("give per-component counts or a positive total n")
            w = np.full(K, 1.0 / K) if self.weights is None else np.asarray(self.weights, float)
            if w.size != K or np.any(w < 0) or not np.isclose(w.sum(), 1.0):
                raise InvalidSpec("weights must be K nonnegative values summing to 1")
            self.weights = w
        else:
            if len(self.counts) != K or any(int(c) < 0 for c in self.counts) or sum(self.counts) < 1:
                raise InvalidSpec("counts must be K nonnegative integers with a positive total")
            self.counts = [int(c) for c in self.counts]


def load_spec(path):
    doc = json.loads(Path(path).read_text())
    kind = doc.get("kind")
    if kind == "blob_images":
        return BlobSpec(**doc)
    if kind == "planted_mixture":
        return MixtureSpec(**doc)
    raise InvalidSpec(f"unknown synth kind {kind!r}")


def blob_image(rng, spec: BlobSpec, label: int) -> np.ndarray:
    n = spec.size
    cy, cx = np.asarray(spec.centers[label]) * n + rng.uniform(-spec.jitter, spec.jitter, 2)
    s = spec.spreads[label]
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    img = spec.background + (1 - spec.background) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
    if spec.noise:
        img = img + rng.normal(0.0, spec.noise, img.shape)
    return np.clip(img, 0.0, 1.0)


def gen_blob_images(spec: BlobSpec, out_dir) -> dict:
    """Write PGM files under ``out_dir/<split>/`` plus one manifest per split.

    Returns ``{split: DatasetManifest}``. Classes alternate within each split so
    every split is balanced.
    """
    out_dir = Path(out_dir)
    task = "binary" if spec.n_classes == 2 else "multiclass"
    num_labels = 1 if task == "binary" else spec.n_classes
    manifests = {}
    for si, split in enumerate(SPLITS):
        count = int(spec.counts.get(split, 0))
        if count == 0:
            continue
        (out_dir / split).mkdir(parents=True, exist_ok=True)
        samples = []
        for i in range(count):
            label = i % spec.n_classes
            rng = np.random.default_rng([spec.seed, si, i])
            sid = f"{split}-{i:05d}"
            path = out_dir / split / f"{sid}.pgm"
            write_pgm(path, blob_image(rng, spec, label))
            samples.append(Sample(sid, (label,), path))
        m = DatasetManifest(task, num_labels, tuple(samples), out_dir)
        write_manifest(m, out_dir / f"{split}.json")
        manifests[split] = m
    return manifests


def gen_planted_mixture(spec: MixtureSpec) -> tuple[np.ndarray, DiagGmm]:
    """Rows drawn from the planted components, shuffled, with the exact generating mixture."""
    rng = np.random.default_rng(spec.seed)
    K, d = spec.means.shape
    if spec.counts is not None:
        counts = np.asarray(spec.counts)
        weights = counts / counts.sum()
    else:
        weights = spec.weights
        counts = rng.multinomial(spec.n, weights)
    comp = np.repeat(np.arange(K), counts)
    X = spec.means[comp] + spec.stds[comp] * rng.standard_normal((comp.size, d))
    X = X[rng.permutation(comp.size)]
    return X, DiagGmm(weights, spec.means, spec.stds ** 2)
