"""Command-line entry point: ``fvattn <subcommand> ...``."""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click
import numpy as np

from . import classifier as clf
from .backbone import BackboneConfig, stage_specs
from .entropy import rank_and_select
from .errors import FvattnError
from .fisher import encode_batch
from .gmm import fit_em, load_gmm, save_gmm
from .kl import kl_mc
from .metrics import evaluate
from .pipeline import (
    GmmOptions,
    PipelineConfig,
    extract_manifest,
    merged_sets,
    run_pipeline,
    run_subsample_study,
    study_sets_from_config,
    write_study,
)
from .stagecat import make_plan
from .synthgen import BlobSpec, gen_blob_images, gen_planted_mixture, load_spec
from .tensorio import DatasetManifest, load_manifest, read_tensor, write_tensor


def _dump(obj):
    click.echo(json.dumps(obj, indent=1, sort_keys=True))


def _backbone_from(path, seed=None) -> BackboneConfig:
    """Backbone settings from a standalone backbone JSON or from a pipeline config."""
    if path is None:
        cfg = BackboneConfig()
    else:
        doc = json.loads(Path(path).read_text())
        if "manifests" in doc:
            cfg = PipelineConfig.load(path).backbone_config()
        elif "stages" in doc and isinstance(doc["stages"], int):
            cfg = BackboneConfig(stage_specs(doc["stages"]), int(doc.get("seed", 0)),
                                 doc.get("attention", "relu_linear"))
        else:
            cfg = BackboneConfig.from_json(doc)
    if seed is not None:
        cfg = BackboneConfig(cfg.stages, seed, cfg.attention)
    return cfg


def _features_of(manifest: DatasetManifest):
    stage_ids = sorted(manifest.samples[0].stage_feature_paths)
    dims = [read_tensor(manifest.samples[0].stage_feature_paths[i]).shape[1] for i in stage_ids]
    return make_plan(dims), stage_ids


@click.group()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              help="Pipeline or backbone JSON configuration.")
@click.option("--seed", type=int, default=None, help="Master seed overriding config seeds.")
@click.option("--threads", type=int, default=1, show_default=True, help="Per-sample worker threads.")
@click.option("--out-dir", type=click.Path(file_okay=False), default=None, help="Output directory.")
@click.option("-v", "--verbose", is_flag=True)
@click.pass_context
def main(ctx, config_path, seed, threads, out_dir, verbose):
    """Fisher Vector encoding of multi-stage attention features."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    ctx.obj = {"config": config_path, "seed": seed, "threads": threads, "out_dir": out_dir}


def _opt(ctx, local, key):
    return local if local is not None else ctx.obj.get(key)


@main.command()
@click.option("--spec", "spec_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out-dir", type=click.Path(file_okay=False), default=None)
@click.pass_context
def synth(ctx, spec_path, out_dir):
    """Generate a synthetic dataset (blob images or a planted mixture)."""
    out = Path(_opt(ctx, out_dir, "out_dir") or ".")
    spec = load_spec(spec_path)
    if isinstance(spec, BlobSpec):
        ms = gen_blob_images(spec, out)
        _dump({split: {"manifest": str(out / f"{split}.json"), "n": len(m)} for split, m in ms.items()})
    else:
        X, gmm = gen_planted_mixture(spec)
        out.mkdir(parents=True, exist_ok=True)
        write_tensor(out / "features.fvt", X)
        save_gmm(out / "planted_gmm.bin", gmm)
        _dump({"features": str(out / "features.fvt"), "gmm": str(out / "planted_gmm.bin"),
               "shape": list(X.shape)})


@main.command()
@click.option("--manifest", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--out-dir", type=click.Path(file_okay=False), default=None)
@click.pass_context
def extract(ctx, manifest, config_path, out_dir):
    """Write per-stage token tensors and an augmented manifest."""
    bb = _backbone_from(_opt(ctx, config_path, "config"), ctx.obj["seed"])
    out = Path(_opt(ctx, out_dir, "out_dir") or "features")
    aug = extract_manifest(load_manifest(manifest), bb, out, ctx.obj["threads"])
    _dump({"manifest": str(out / "manifest.json"), "n": len(aug), "stages": [s.index for s in bb.stages]})


@main.command()
@click.option("--manifest", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--bins", type=int, default=256, show_default=True)
@click.option("--cap", type=int, default=5000, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None)
@click.pass_context
def rank(ctx, manifest, bins, cap, out):
    """Rank images by brightness entropy and keep the top CAP."""
    ranking = rank_and_select(load_manifest(manifest), bins, cap, ctx.obj["threads"])
    text = json.dumps(ranking.to_json(), indent=1) + "\n"
    if out:
        Path(out).write_text(text)
    else:
        click.echo(text, nl=False)


@main.command("gmm-fit")
@click.option("--features", "features", required=True, type=click.Path(exists=True, dir_okay=False),
              help="Augmented manifest from `extract`, or an FVT1 T x d matrix.")
@click.option("--ranking", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Restrict to the samples of an entropy ranking.")
@click.option("--k", "K", type=int, default=16, show_default=True)
@click.option("--reg-scale", type=float, default=1e-4, show_default=True)
@click.option("--max-iters", type=int, default=100, show_default=True)
@click.option("--rel-tol", type=float, default=1e-6, show_default=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.pass_context
def gmm_fit(ctx, features, ranking, K, reg_scale, max_iters, rel_tol, out):
    """Fit a diagonal GMM by EM."""
    seed = ctx.obj["seed"] or 0
    if features.endswith((".fvt", ".fvt1")):
        X = read_tensor(features)
    else:
        m = load_manifest(features)
        if ranking:
            pos = [e["position"] for e in json.loads(Path(ranking).read_text())["entries"]]
            m = DatasetManifest(m.task, m.num_labels, tuple(m.samples[i] for i in pos), m.root)
        plan, stage_ids = _features_of(m)
        X = np.concatenate(merged_sets(m, plan, stage_ids, ctx.obj["threads"]), axis=0)
    fit = fit_em(X, K, max_iters, rel_tol, seed, reg_scale)
    save_gmm(out, fit)
    _dump({"out": out, "K": K, "d": X.shape[1], "T": X.shape[0], "n_iter": fit.n_iter,
           "converged": fit.converged, "final_loglik": fit.loglik_trace[-1]})


@main.command()
@click.option("--gmm", "gmm_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--manifest", required=True, type=click.Path(exists=True, dir_okay=False),
              help="Augmented manifest from `extract`.")
@click.option("--alpha", type=float, default=0.5, show_default=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.pass_context
def encode(ctx, gmm_path, manifest, alpha, out):
    """Encode every sample as a normalized Fisher Vector (one row per sample)."""
    gmm, _ = load_gmm(gmm_path)
    m = load_manifest(manifest)
    plan, stage_ids = _features_of(m)
    fv = encode_batch(gmm, merged_sets(m, plan, stage_ids, ctx.obj["threads"]), alpha)
    write_tensor(out, fv)
    _dump({"out": out, "shape": list(fv.shape)})


@main.command()
@click.option("--features", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--manifest", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--val-features", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--val-manifest", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="JSON of training settings (or a pipeline config with a 'classifier' block).")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--log", "log_path", type=click.Path(dir_okay=False), default=None)
@click.pass_context
def train(ctx, features, manifest, val_features, val_manifest, config_path, out, log_path):
    """Train the classifier head on encoded Fisher Vectors."""
    doc = {}
    if config_path:
        doc = json.loads(Path(config_path).read_text())
        doc = doc.get("classifier", doc)
    if ctx.obj["seed"] is not None:
        doc["seed"] = ctx.obj["seed"]
    cfg = clf.TrainConfig(**doc)
    tm = load_manifest(manifest, check_paths=False)
    vm = load_manifest(val_manifest, check_paths=False)
    n_out = clf.num_outputs(tm.task, tm.num_labels)
    result = clf.train(read_tensor(features), tm.label_array(), read_tensor(val_features),
                       vm.label_array(), tm.task, cfg, n_out)
    clf.save_head(out, result.params, {"task": tm.task, "n_out": n_out,
                                       "best_epoch": result.best_epoch, "config": cfg.to_json()})
    lines = "".join(json.dumps(e, sort_keys=True) + "\n" for e in result.log)
    Path(log_path or str(out) + ".log.jsonl").write_text(lines)
    _dump({"out": out, "best_epoch": result.best_epoch, "epochs_run": len(result.log)})


@main.command("eval")
@click.option("--model", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--features", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--manifest", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--tie-policy", type=click.Choice(["half", "paper"]), default="half", show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None)
def eval_cmd(model, features, manifest, tie_policy, out):
    """Compute ACC/AUC and ROC points on an encoded split."""
    params, meta = clf.load_head(model)
    m = load_manifest(manifest, check_paths=False)
    probs = clf.predict_proba(params, read_tensor(features), m.task)
    report = evaluate(probs, m.label_array(), m.task, tie_policy)
    text = json.dumps(report.to_json(), indent=1, sort_keys=True) + "\n"
    if out:
        Path(out).write_text(text)
    click.echo(json.dumps({"acc": report.acc, "auc": report.auc}))


@main.command()
@click.option("--gmm-f", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--gmm-g", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--samples", type=int, default=1_000_000, show_default=True)
@click.option("--seed", "local_seed", type=int, default=None)
@click.pass_context
def kl(ctx, gmm_f, gmm_g, samples, local_seed):
    """Monte Carlo KL(f || g) between two saved mixtures."""
    f, _ = load_gmm(gmm_f)
    g, _ = load_gmm(gmm_g)
    seed = _opt(ctx, local_seed, "seed") or 0
    est = kl_mc(f, g, samples, seed)
    _dump(est.to_json())


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--matrix", type=click.Path(exists=True, dir_okay=False), default=None,
              help="FVT1 T x d matrix; rows are taken in stored order.")
@click.option("--ratios", default="0.02,0.1,0.5,1.0", show_default=True)
@click.option("--seeds", default="0,1,2,3,4,5,6,7,8,9", show_default=True)
@click.option("--k", "K", type=int, default=16, show_default=True)
@click.option("--samples", type=int, default=1_000_000, show_default=True)
@click.option("--out-dir", type=click.Path(file_okay=False), default=None)
@click.pass_context
def study(ctx, config_path, matrix, ratios, seeds, K, samples, out_dir):
    """KL between the full-data GMM and GMMs fitted on entropy-top fractions."""
    config_path = _opt(ctx, config_path, "config")
    ratio_list = [float(r) for r in ratios.split(",") if r.strip()]
    seed_list = [int(s) for s in seeds.split(",") if s.strip()]
    if matrix:
        sets = read_tensor(matrix)
        opts = GmmOptions(K=K)
        out = Path(_opt(ctx, out_dir, "out_dir") or ".")
    elif config_path:
        cfg = PipelineConfig.load(config_path)
        sets = study_sets_from_config(cfg)
        opts = cfg.gmm
        out = Path(_opt(ctx, out_dir, "out_dir") or cfg.out_path)
    else:
        raise click.UsageError("give --config or --matrix")
    rows = run_subsample_study(sets, ratio_list, seed_list, opts, samples, threads=ctx.obj["threads"])
    jp, cp = write_study(rows, out)
    _dump({"json": str(jp), "csv": str(cp), "rows": len(rows)})


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.pass_context
def pipeline(ctx, config_path):
    """Run extract, rank, gmm-fit, encode, train and eval from one config."""
    config_path = _opt(ctx, config_path, "config")
    if not config_path:
        raise click.UsageError("--config is required")
    cfg = PipelineConfig.load(config_path)
    if ctx.obj["seed"] is not None:
        cfg = cfg.with_seed(ctx.obj["seed"])
    if ctx.obj["out_dir"]:
        cfg.out_dir = str(Path(ctx.obj["out_dir"]).resolve())
    cfg.threads = ctx.obj["threads"]
    result = run_pipeline(cfg)
    _dump({"acc": result.report.acc, "auc": result.report.auc, "report": result.artifacts["report"]})


def run():
    try:
        main(standalone_mode=False)
    except FvattnError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    except click.ClickException as exc:
        exc.show()
        sys.exit(exc.exit_code)


if __name__ == "__main__":
    run()
