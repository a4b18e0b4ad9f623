"""Lossless merging of multi-stage local features into one common-dimension set."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .backbone import StageFeatures
from .errors import PlanMismatch, SizeMismatch


@dataclass(frozen=True)
class SplitPlan:
    stage_dims: tuple
    common_dim: int
    chunk_counts: tuple

    def rows(self, token_counts) -> int:
        return sum(n * c for n, c in zip(token_counts, self.chunk_counts))


def make_plan(stage_dims, common_dim: int | None = None) -> SplitPlan:
    """Split plan over the gcd of ``stage_dims`` (or an explicit common divisor)."""
    dims = tuple(int(d) for d in stage_dims)
    if not dims or any(d < 1 for d in dims):
        raise ValueError(f"stage dims must be positive, got {dims}")
    d = math.gcd(*dims) if common_dim is None else int(common_dim)
    if d < 1 or any(di % d for di in dims):
        raise ValueError(f"common dim {d} does not divide every stage dim {dims}")
    return SplitPlan(dims, d, tuple(di // d for di in dims))


def _as_matrices(features):
    return [f.tokens if isinstance(f, StageFeatures) else np.asarray(f) for f in features]


def merge(features, plan: SplitPlan) -> np.ndarray:
    """Cut each token into contiguous width-``d`` chunks; rows ordered (stage, token, chunk)."""
    mats = _as_matrices(features)
    if len(mats) != len(plan.stage_dims):
        raise PlanMismatch(f"{len(mats)} stages given, plan has {len(plan.stage_dims)}")
    for m, d in zip(mats, plan.stage_dims):
        if m.ndim != 2 or m.shape[1] != d:
            raise PlanMismatch(f"stage features of shape {m.shape} do not match plan dim {d}")
    return np.concatenate([m.reshape(-1, plan.common_dim) for m in mats], axis=0)


def unmerge(merged, plan: SplitPlan, token_counts, stage_indices=None) -> list[StageFeatures]:
    merged = np.asarray(merged)
    counts = [int(n) for n in token_counts]
    if len(counts) != len(plan.stage_dims):
        raise SizeMismatch(f"{len(counts)} token counts for {len(plan.stage_dims)} stages")
    if merged.ndim != 2 or merged.shape[1] != plan.common_dim:
        raise SizeMismatch(f"merged matrix of shape {merged.shape} is not T x {plan.common_dim}")
    expected = plan.rows(counts)
    if merged.shape[0] != expected:
        raise SizeMismatch(f"merged matrix has {merged.shape[0]} rows, plan expects {expected}")
    if stage_indices is None:
        stage_indices = range(1, len(counts) + 1)
    out = []
    start = 0
    for idx, n, c, d in zip(stage_indices, counts, plan.chunk_counts, plan.stage_dims):
        block = merged[start:start + n * c]
        out.append(StageFeatures(idx, block.reshape(n, d).copy()))
        start += n * c
    return out
