"""Histogram entropy of image brightness and entropy-ranked sample selection."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import EmptyImage, FvattnError
from .tensorio import DatasetManifest, GrayImage, load_image

DEFAULT_BINS = 256


def bin_edges(lo: float, hi: float, k: int) -> np.ndarray:
    """Edges ``X_i = (i/k)(hi - lo) + lo`` for ``i = 0..k``."""
    return np.arange(k + 1, dtype=np.float64) / k * (hi - lo) + lo


def bin_counts(values, k: int) -> np.ndarray:
    """Count values per half-open bin ``(X_{i-1}, X_i]``.

    The minimum lands in the first bin, and anything above the last computed
    edge (possible by one ulp of rounding) in the last.
    """
    x = np.asarray(values, dtype=np.float64).ravel()
    lo, hi = x.min(), x.max()
    edges = bin_edges(lo, hi, k)
    idx = np.searchsorted(edges, x, side="left")
    idx = np.clip(idx, 1, k) - 1
    return np.bincount(idx, minlength=k)


def image_entropy(image, k: int = DEFAULT_BINS) -> float:
    """Shannon entropy (nats) of the brightness histogram with ``k`` even bins.

    Each occupied bin contributes ``-p log p`` once, with ``p`` its relative
    frequency. A constant image has entropy 0.
    """
    if k < 1:
        raise ValueError("bin count must be at least 1")
    px = image.pixels if isinstance(image, GrayImage) else np.asarray(image, dtype=np.float64)
    if px.size == 0:
        raise EmptyImage("image has no pixels")
    if px.max() == px.min():
        return 0.0
    counts = bin_counts(px, k)
    p = counts[counts > 0] / px.size
    return float(max(0.0, -np.sum(p * np.log(p))))


@dataclass(frozen=True)
class RankEntry:
    sample_id: str
    entropy: float
    position: int


@dataclass(frozen=True)
class EntropyRanking:
    entries: tuple
    bin_count: int

    @property
    def ids(self) -> list[str]:
        return [e.sample_id for e in self.entries]

    @property
    def positions(self) -> list[int]:
        return [e.position for e in self.entries]

    def to_json(self) -> dict:
        return {
            "bin_count": self.bin_count,
            "entries": [
                {"sample_id": e.sample_id, "entropy": e.entropy, "position": e.position}
                for e in self.entries
            ],
        }


def rank_entropies(entropies, ids=None, bins: int = DEFAULT_BINS, n: int | None = None) -> EntropyRanking:
    """Sort by entropy descending, ties by original position; keep the first ``n``."""
    ent = [float(e) for e in entropies]
    ids = [str(i) for i in range(len(ent))] if ids is None else list(ids)
    order = sorted(range(len(ent)), key=lambda i: (-ent[i], i))
    if n is not None:
        if n < 1:
            raise ValueError("sample cap must be at least 1")
        order = order[:n]
    return EntropyRanking(tuple(RankEntry(ids[i], ent[i], i) for i in order), bins)


def rank_and_select(manifest: DatasetManifest, k: int = DEFAULT_BINS, n: int = 5000,
                    threads: int = 1) -> EntropyRanking:
    """Entropy-rank the manifest's images and keep the top ``n`` (without replacement)."""
    if n < 1:
        raise ValueError("sample cap must be at least 1")

    def one(sample):
        if sample.image_path is None:
            raise FvattnError(f"sample {sample.id!r}: no image_path to rank")
        try:
            return image_entropy(load_image(sample.image_path), k)
        except Exception as exc:
            try:
                tagged = type(exc)(f"sample {sample.id!r}: {exc}")
            except Exception:
                tagged = FvattnError(f"sample {sample.id!r}: {exc}")
            raise tagged from exc

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            ent = list(pool.map(one, manifest.samples))
    else:
        ent = [one(s) for s in manifest.samples]
    return rank_entropies(ent, manifest.ids, k, n)
