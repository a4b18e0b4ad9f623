"""Seeded toy multi-stage feature extractor with softmax and ReLU linear attention.

Each stage cuts the image into non-overlapping patches, embeds every patch with
a fixed random projection and runs one residual attention block over the
resulting tokens. Later stages use larger patches and wider tokens, so they see
fewer, higher-dimensional local features.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BadConfig, IndivisibleImage, ShapeMismatch
from .tensorio import GrayImage

RELU_EPS = 1e-8

# stage index -> (patch size, token dim); widths follow the hierarchical
# backbone family where one, two and three stages give common dims 384, 192, 96
STAGE_TABLE = {2: (4, 96), 3: (7, 192), 4: (14, 384)}


@dataclass(frozen=True)
class AttentionParams:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    seed: int = 0

    @classmethod
    def random(cls, f: int, d: int, seed: int) -> "AttentionParams":
        rng = np.random.default_rng(seed)
        bound = 1.0 / math.sqrt(f)
        w = rng.uniform(-bound, bound, size=(3, f, d))
        return cls(w[0], w[1], w[2], seed)

    def project(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.w_q.shape[0]:
            raise ShapeMismatch(
                f"input of shape {x.shape} does not match projections of shape {self.w_q.shape}"
            )
        if not (self.w_q.shape == self.w_k.shape == self.w_v.shape):
            raise ShapeMismatch("W_Q, W_K, W_V must share one shape")
        return x @ self.w_q, x @ self.w_k, x @ self.w_v


def softmax_similarity(q, k) -> np.ndarray:
    s = q @ k.T / math.sqrt(q.shape[1])
    s -= s.max(axis=1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=1, keepdims=True)
    return s


def relu_similarity(q, k, eps: float = RELU_EPS) -> np.ndarray:
    rq = np.maximum(q, 0.0)
    rk = np.maximum(k, 0.0)
    num = rq @ rk.T
    return num / np.maximum(num.sum(axis=1, keepdims=True), eps)


def softmax_attention(x, params: AttentionParams) -> np.ndarray:
    q, k, v = params.project(x)
    return softmax_similarity(q, k) @ v


def relu_linear_attention(x, params: AttentionParams, eps: float = RELU_EPS) -> np.ndarray:
    """ReLU linear attention, computed in linear time via ``ReLU(K)^T V``.

    Row ``i`` of the output is ``sum_j s_ij V_j`` where
    ``s_ij = ReLU(Q_i).ReLU(K_j) / max(sum_j ReLU(Q_i).ReLU(K_j), eps)``. The
    floor only matters for rows whose ReLU terms all (nearly) vanish; every
    other row is normalized exactly.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    q, k, v = params.project(x)
    rq = np.maximum(q, 0.0)
    rk = np.maximum(k, 0.0)
    kv = rk.T @ v
    denom = np.maximum(rq @ rk.sum(axis=0), eps)
    return (rq @ kv) / denom[:, None]


ATTENTION = {"softmax": softmax_attention, "relu_linear": relu_linear_attention}


@dataclass(frozen=True)
class StageFeatures:
    stage_index: int
    tokens: np.ndarray

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[0]

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]


@dataclass(frozen=True)
class StageSpec:
    index: int
    patch: int
    dim: int


@dataclass(frozen=True)
class BackboneConfig:
    stages: tuple = field(default_factory=lambda: stage_specs(2))
    seed: int = 0
    attention: str = "relu_linear"

    def __post_init__(self):
        stages = tuple(s if isinstance(s, StageSpec) else StageSpec(**s) for s in self.stages)
        object.__setattr__(self, "stages", stages)
        if not stages:
            raise BadConfig("at least one stage is required")
        if self.attention not in ATTENTION:
            raise BadConfig(f"attention must be one of {sorted(ATTENTION)}, got {self.attention!r}")
        idx = [s.index for s in stages]
        if len(set(idx)) != len(idx):
            raise BadConfig(f"duplicate stage indices {idx}")
        for s in stages:
            if not 1 <= s.index <= 4:
                raise BadConfig(f"stage index {s.index} outside 1..4")
            if s.patch < 1 or s.dim < 1:
                raise BadConfig(f"stage {s.index}: patch and dim must be positive")
        if math.gcd(*(s.dim for s in stages)) <= 1:
            raise BadConfig("stage dims must share a common divisor > 1")

    @property
    def dims(self) -> list[int]:
        return [s.dim for s in self.stages]

    def to_json(self) -> dict:
        return {
            "stages": [{"index": s.index, "patch": s.patch, "dim": s.dim} for s in self.stages],
            "seed": self.seed,
            "attention": self.attention,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "BackboneConfig":
        return cls(tuple(doc["stages"]), int(doc.get("seed", 0)), doc.get("attention", "relu_linear"))


def stage_specs(n: int) -> tuple:
    """The last ``n`` stages of the default table (1 -> {4}, 2 -> {3, 4}, 3 -> {2, 3, 4})."""
    if n not in (1, 2, 3):
        raise BadConfig(f"stage count must be 1, 2 or 3, got {n}")
    return tuple(StageSpec(i, *STAGE_TABLE[i]) for i in range(5 - n, 5))


def patchify(pixels: np.ndarray, p: int) -> np.ndarray:
    """Split a 2D image or 3D volume into non-overlapping ``p``-sized patches, row-major."""
    shape = pixels.shape
    if any(n % p for n in shape):
        raise IndivisibleImage(f"image of shape {shape} is not divisible by patch size {p}")
    if pixels.ndim == 2:
        h, w = shape
        x = pixels.reshape(h // p, p, w // p, p).transpose(0, 2, 1, 3)
    else:
        z, h, w = shape
        x = pixels.reshape(z // p, p, h // p, p, w // p, p).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(-1, p ** pixels.ndim)


def _stage_params(config: BackboneConfig, spec: StageSpec, f: int):
    ss = np.random.SeedSequence([config.seed, spec.index, spec.patch, spec.dim, f])
    embed_seed, attn_seed = (int(s.generate_state(1, np.uint64)[0]) for s in ss.spawn(2))
    rng = np.random.default_rng(embed_seed)
    bound = 1.0 / math.sqrt(f)
    embed = rng.uniform(-bound, bound, size=(f, spec.dim))
    attn = AttentionParams.random(spec.dim, spec.dim, attn_seed)
    return embed, attn


def extract_stages(image, config: BackboneConfig | None = None) -> list[StageFeatures]:
    """Run every configured stage on one image; output is a pure function of (image, config)."""
    config = config or BackboneConfig()
    px = image.pixels if isinstance(image, GrayImage) else np.asarray(image, dtype=np.float64)
    for s in config.stages:
        if any(n % s.patch for n in px.shape):
            raise IndivisibleImage(
                f"image of shape {px.shape} is not divisible by stage {s.index} patch size {s.patch}"
            )
    attend = ATTENTION[config.attention]
    out = []
    for s in config.stages:
        patches = patchify(px, s.patch)
        embed, attn = _stage_params(config, s, patches.shape[1])
        z = patches @ embed
        out.append(StageFeatures(s.index, z + attend(z, attn)))
    return out
