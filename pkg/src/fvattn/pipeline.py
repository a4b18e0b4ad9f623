"""End-to-end orchestration: extract -> rank -> gmm-fit -> encode -> train -> eval, plus the
subsampling study.

Every artifact name carries a hash of the configuration that produced it, so a
rerun with unchanged inputs reuses what is already on disk.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import classifier as clf
from .backbone import BackboneConfig, extract_stages, stage_specs
from .entropy import EntropyRanking, RankEntry, rank_and_select
from .errors import BadConfig, FvattnError, StageError
from .fisher import encode_batch, fv_length
from .gmm import fit_em, load_gmm, save_gmm
from .kl import kl_mc
from .metrics import MetricsReport, evaluate
from .stagecat import SplitPlan, make_plan, merge
from .tensorio import (
    DatasetManifest,
    Sample,
    load_image,
    load_manifest,
    read_tensor,
    write_manifest,
    write_tensor,
)

log = logging.getLogger(__name__)

HASH_LEN = 12


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True).encode()


def config_hash(obj) -> str:
    """SHA-256 over canonical JSON (sorted keys, no whitespace), truncated to 12 hex digits."""
    return hashlib.sha256(canonical_json(obj)).hexdigest()[:HASH_LEN]


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:HASH_LEN]


@dataclass
class GmmOptions:
    K: int = 16
    seed: int = 0
    reg_scale: float = 1e-4
    max_iters: int = 100
    rel_tol: float = 1e-6


@dataclass
class PipelineConfig:
    manifests: dict
    out_dir: str = "run"
    stages: int = 2
    backbone: dict = field(default_factory=dict)
    bins: int = 256
    cap: int = 5000
    gmm: GmmOptions = field(default_factory=GmmOptions)
    alpha: float = 0.5
    classifier: clf.TrainConfig = field(default_factory=clf.TrainConfig)
    tie_policy: str = "half"
    threads: int = 1
    base_dir: Path = Path(".")

    def __post_init__(self):
        if isinstance(self.gmm, dict):
            self.gmm = GmmOptions(**self.gmm)
        if isinstance(self.classifier, dict):
            self.classifier = clf.TrainConfig(**self.classifier)
        missing = {"train", "val", "test"} - set(self.manifests)
        if missing:
            raise BadConfig(f"manifests missing splits {sorted(missing)}")
        if self.stages not in (1, 2, 3):
            raise BadConfig(f"stages must be 1, 2 or 3, got {self.stages}")
        if self.cap < self.gmm.K:
            raise BadConfig(f"sample cap {self.cap} is below the component count {self.gmm.K}")
        if self.bins < 1:
            raise BadConfig("bins must be positive")
        if self.tie_policy not in ("half", "paper"):
            raise BadConfig(f"unknown tie policy {self.tie_policy!r}")
        self.backbone_config()

    def backbone_config(self) -> BackboneConfig:
        doc = dict(self.backbone)
        if "stages" in doc:
            cfg = BackboneConfig.from_json(doc)
            if len(cfg.stages) != self.stages:
                raise BadConfig(f"backbone lists {len(cfg.stages)} stages, config asks for {self.stages}")
            return cfg
        return BackboneConfig(stage_specs(self.stages), int(doc.get("seed", 0)),
                              doc.get("attention", "relu_linear"))

    def manifest_path(self, split: str) -> Path:
        return self.base_dir / self.manifests[split]

    @property
    def out_path(self) -> Path:
        return self.base_dir / self.out_dir

    def to_json(self) -> dict:
        return {
            "manifests": dict(self.manifests),
            "out_dir": self.out_dir,
            "stages": self.stages,
            "backbone": self.backbone_config().to_json(),
            "bins": self.bins,
            "cap": self.cap,
            "gmm": asdict(self.gmm),
            "alpha": self.alpha,
            "classifier": self.classifier.to_json(),
            "tie_policy": self.tie_policy,
        }

    @classmethod
    def from_json(cls, doc: dict, base_dir=".") -> "PipelineConfig":
        doc = dict(doc)
        fv = doc.pop("fv", None)
        if fv is not None:
            doc.setdefault("alpha", fv.get("alpha", 0.5))
        metrics = doc.pop("metrics", None)
        if metrics is not None:
            doc.setdefault("tie_policy", metrics.get("tie_policy", "half"))
        return cls(**doc, base_dir=Path(base_dir))

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        path = Path(path)
        return cls.from_json(json.loads(path.read_text()), base_dir=path.parent)

    def with_seed(self, seed: int) -> "PipelineConfig":
        """Copy with one master seed applied to backbone, GMM and classifier."""
        new = copy.deepcopy(self)
        new.backbone = dict(new.backbone, seed=seed)
        new.gmm.seed = seed
        new.classifier.seed = seed
        return new


class AccessLog:
    """Records which dataset splits each stage touched."""

    def __init__(self):
        self.entries = []

    def read(self, stage: str, split: str, what: str):
        self.entries.append({"stage": stage, "split": split, "what": what})

    def splits_read_by(self, stage: str) -> set:
        return {e["split"] for e in self.entries if e["stage"] == stage}


# ---------------------------------------------------------------------------
# stage building blocks (also used by the CLI subcommands)
# ---------------------------------------------------------------------------


def _pmap(fn, items, threads: int):
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def extract_manifest(manifest: DatasetManifest, config: BackboneConfig, out_dir,
                     threads: int = 1) -> DatasetManifest:
    """Write one FVT1 tensor per (sample, stage) and return the augmented manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def one(sample: Sample) -> Sample:
        if sample.image_path is None:
            raise FvattnError(f"sample {sample.id!r} has no image_path")
        feats = extract_stages(load_image(sample.image_path), config)
        paths = {}
        for f in feats:
            p = out_dir / f"{sample.id}-s{f.stage_index}.fvt"
            write_tensor(p, f.tokens)
            paths[f.stage_index] = p
        return Sample(sample.id, sample.labels, sample.image_path, paths)

    samples = _pmap(one, manifest.samples, threads)
    aug = DatasetManifest(manifest.task, manifest.num_labels, tuple(samples), out_dir)
    write_manifest(aug, out_dir / "manifest.json")
    return aug


def sample_features(sample: Sample, stage_indices) -> list[np.ndarray]:
    return [read_tensor(sample.stage_feature_paths[i]) for i in stage_indices]


def merged_sets(manifest: DatasetManifest, plan: SplitPlan, stage_indices, threads: int = 1):
    """Per-sample merged ``T x d`` feature matrices in manifest order."""
    return _pmap(lambda s: merge(sample_features(s, stage_indices), plan), manifest.samples, threads)


def plan_for(config: BackboneConfig) -> SplitPlan:
    return make_plan(config.dims)


def fit_gmm_on(sets, opts: GmmOptions):
    return fit_em(np.concatenate(sets, axis=0), opts.K, opts.max_iters, opts.rel_tol, opts.seed,
                  opts.reg_scale)


# ---------------------------------------------------------------------------
# full run
# ---------------------------------------------------------------------------


@dataclass
class PipelineResult:
    report: MetricsReport
    artifacts: dict
    access: AccessLog
    cached: dict


def _stage(name):
    def wrap(fn):
        def run(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except StageError:
                raise
            except Exception as exc:
                raise StageError(name, exc) from exc
        return run
    return wrap


def run_pipeline(config: PipelineConfig) -> PipelineResult:
    """Run every stage in order, reusing artifacts whose config hash already exists on disk."""
    out = config.out_path
    out.mkdir(parents=True, exist_ok=True)
    bb = config.backbone_config()
    stage_idx = [s.index for s in bb.stages]
    plan = plan_for(bb)
    access = AccessLog()
    artifacts = {}
    cached = {}
    manifests = {}

    def manifest(stage, split):
        access.read(stage, split, "manifest")
        if split not in manifests:
            manifests[split] = load_manifest(config.manifest_path(split))
        return manifests[split]

    def split_key(split):
        return {"manifest": file_hash(config.manifest_path(split))}

    @_stage("extract")
    def extract(stage, split):
        key = config_hash({"split": split_key(split), "backbone": bb.to_json()})
        d = out / f"features-{split}-{key}"
        m = manifest(stage, split)
        if (d / "manifest.json").exists():
            cached[f"extract:{split}"] = True
            aug = load_manifest(d / "manifest.json")
        else:
            cached[f"extract:{split}"] = False
            access.read(stage, split, "images")
            aug = extract_manifest(m, bb, d, config.threads)
        artifacts[f"features:{split}"] = str(d)
        return aug, key

    @_stage("rank")
    def rank(train_key):
        key = config_hash({"split": split_key("train"), "bins": config.bins, "cap": config.cap})
        p = out / f"ranking-{key}.json"
        m = manifest("rank", "train")
        if p.exists():
            cached["rank"] = True
            doc = json.loads(p.read_text())
            ranking = EntropyRanking(
                tuple(RankEntry(e["sample_id"], e["entropy"], e["position"]) for e in doc["entries"]),
                doc["bin_count"],
            )
        else:
            cached["rank"] = False
            access.read("rank", "train", "images")
            ranking = rank_and_select(m, config.bins, config.cap, config.threads)
            p.write_text(json.dumps(ranking.to_json(), indent=1) + "\n")
        artifacts["ranking"] = str(p)
        return ranking, key

    @_stage("gmm-fit")
    def gmm_fit(aug, feat_key, ranking, rank_key):
        key = config_hash({"features": feat_key, "ranking": rank_key, "gmm": asdict(config.gmm),
                           "plan": [plan.common_dim, list(plan.stage_dims)]})
        p = out / f"gmm-{key}.bin"
        if p.exists():
            cached["gmm-fit"] = True
            gmm, _ = load_gmm(p)
        else:
            cached["gmm-fit"] = False
            access.read("gmm-fit", "train", "features")
            chosen = DatasetManifest(aug.task, aug.num_labels,
                                     tuple(aug.samples[i] for i in ranking.positions), aug.root)
            fit = fit_gmm_on(merged_sets(chosen, plan, stage_idx, config.threads), config.gmm)
            save_gmm(p, fit)
            gmm = fit.gmm
        artifacts["gmm"] = str(p)
        return gmm, key

    @_stage("encode")
    def encode(stage, split, aug, feat_key, gmm, gmm_key):
        key = config_hash({"features": feat_key, "gmm": gmm_key, "alpha": config.alpha})
        p = out / f"fv-{split}-{key}.fvt"
        if p.exists():
            cached[f"encode:{split}"] = True
            fv = read_tensor(p)
        else:
            cached[f"encode:{split}"] = False
            access.read(stage, split, "features")
            fv = encode_batch(gmm, merged_sets(aug, plan, stage_idx, config.threads), config.alpha)
            write_tensor(p, fv)
        artifacts[f"fv:{split}"] = str(p)
        return fv, key

    @_stage("train")
    def train(fv_tr, y_tr, fv_va, y_va, task, n_out, keys):
        key = config_hash({"fv": keys, "classifier": config.classifier.to_json()})
        p = out / f"model-{key}.bin"
        lp = out / f"trainlog-{key}.jsonl"
        if p.exists():
            cached["train"] = True
            params, _ = clf.load_head(p)
        else:
            cached["train"] = False
            result = clf.train(fv_tr, y_tr, fv_va, y_va, task, config.classifier, n_out)
            params = result.params
            clf.save_head(p, params, {"task": task, "n_out": n_out, "best_epoch": result.best_epoch,
                                      "config": config.classifier.to_json()})
            lp.write_text("".join(json.dumps(e, sort_keys=True) + "\n" for e in result.log))
        artifacts["model"] = str(p)
        artifacts["train_log"] = str(lp)
        return params, key

    @_stage("eval")
    def evaluate_test(params, gmm, gmm_key, model_key, task):
        aug, feat_key = extract("eval", "test")
        fv, fv_key = encode("eval", "test", aug, feat_key, gmm, gmm_key)
        access.read("eval", "test", "labels")
        probs = clf.predict_proba(params, fv, task)
        report = evaluate(probs, aug.label_array(), task, config.tie_policy)
        key = config_hash({"model": model_key, "fv": fv_key, "tie_policy": config.tie_policy})
        text = json.dumps(report.to_json(), indent=1, sort_keys=True) + "\n"
        p = out / f"report-{key}.json"
        p.write_text(text)
        (out / "report.json").write_text(text)
        artifacts["report"] = str(p)
        return report

    train_aug, train_fk = extract("extract", "train")
    val_aug, val_fk = extract("extract", "val")
    ranking, rank_key = rank(train_fk)
    gmm, gmm_key = gmm_fit(train_aug, train_fk, ranking, rank_key)
    fv_tr, k_tr = encode("encode", "train", train_aug, train_fk, gmm, gmm_key)
    fv_va, k_va = encode("encode", "val", val_aug, val_fk, gmm, gmm_key)
    task = train_aug.task
    n_out = clf.num_outputs(task, train_aug.num_labels)
    params, model_key = train(fv_tr, train_aug.label_array(), fv_va, val_aug.label_array(), task,
                              n_out, [k_tr, k_va])
    report = evaluate_test(params, gmm, gmm_key, model_key, task)

    run_log = {
        "config": config.to_json(),
        "config_hash": config_hash(config.to_json()),
        "cached": cached,
        "access": access.entries,
        "artifacts": artifacts,
        "fv_length": fv_length(gmm.n_components, gmm.dim),
    }
    (out / "run_log.json").write_text(json.dumps(run_log, indent=1, sort_keys=True) + "\n")
    return PipelineResult(report, artifacts, access, cached)


# ---------------------------------------------------------------------------
# subsampling study
# ---------------------------------------------------------------------------


@dataclass
class StudyRow:
    ratio: float
    seed: int
    n_samples: int
    kl_to_full: float
    std_error: float

    def to_json(self):
        return asdict(self)


def subset_size(ratio: float, n: int) -> int:
    return max(1, min(n, math.ceil(ratio * n - 1e-9)))


def run_subsample_study(sets, ratios, seeds, opts: GmmOptions | None = None, n_kl: int = 1_000_000,
                        base_seed: int | None = None, threads: int = 1) -> list[StudyRow]:
    """KL(base || subset) for GMMs fitted on leading fractions of ranked samples.

    ``sets`` lists per-sample feature matrices in selection order (highest
    entropy first); a plain ``T x d`` matrix treats every row as a sample. The
    base GMM is fitted on everything with ``base_seed`` (default: first seed);
    each (ratio, seed) cell refits on the first ``ceil(ratio * n)`` samples
    with that seed.
    """
    ratios = [float(r) for r in ratios]
    seeds = [int(s) for s in seeds]
    if not ratios:
        raise BadConfig("ratio list is empty")
    if any(not 0 < r <= 1 for r in ratios):
        raise BadConfig(f"ratios must lie in (0, 1], got {ratios}")
    if len(seeds) < 2:
        raise BadConfig("the study needs at least two seeds")
    opts = opts or GmmOptions()
    if isinstance(sets, np.ndarray) and sets.ndim == 2:
        sets = [sets[i:i + 1] for i in range(sets.shape[0])]
    sets = list(sets)
    base_seed = seeds[0] if base_seed is None else int(base_seed)
    base = fit_gmm_on(sets, GmmOptions(**{**asdict(opts), "seed": base_seed})).gmm

    def cell(rs):
        ratio, seed = rs
        m = subset_size(ratio, len(sets))
        try:
            sub = fit_gmm_on(sets[:m], GmmOptions(**{**asdict(opts), "seed": seed})).gmm
            est = kl_mc(base, sub, n_kl, seed)
        except Exception as exc:
            raise FvattnError(f"study cell ratio={ratio} seed={seed}: {exc}") from exc
        return StudyRow(ratio, seed, m, est.value, est.std_error)

    return _pmap(cell, [(r, s) for r in ratios for s in seeds], threads)


def write_study(rows, out_dir, stem: str = "study") -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jp = out_dir / f"{stem}.json"
    cp = out_dir / f"{stem}.csv"
    jp.write_text(json.dumps([r.to_json() for r in rows], indent=1) + "\n")
    with open(cp, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["ratio", "seed", "n_samples", "kl_to_full", "std_error"])
        w.writeheader()
        for r in rows:
            w.writerow(r.to_json())
    return jp, cp


def study_sets_from_config(config: PipelineConfig) -> list[np.ndarray]:
    """Merged train features ordered by entropy rank (the cap applied)."""
    bb = config.backbone_config()
    plan = plan_for(bb)
    m = load_manifest(config.manifest_path("train"))
    key = config_hash({"split": {"manifest": file_hash(config.manifest_path("train"))},
                       "backbone": bb.to_json()})
    d = config.out_path / f"features-train-{key}"
    aug = load_manifest(d / "manifest.json") if (d / "manifest.json").exists() else \
        extract_manifest(m, bb, d, config.threads)
    ranking = rank_and_select(m, config.bins, config.cap, config.threads)
    chosen = DatasetManifest(aug.task, aug.num_labels,
                             tuple(aug.samples[i] for i in ranking.positions), aug.root)
    return merged_sets(chosen, plan, [s.index for s in bb.stages], config.threads)
