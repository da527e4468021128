#!/usr/bin/env python3
"""
run_pad.py
----------
Command-line front end: one subcommand per stage of the workflow.

    synth → split → train-phase1 → extract-attention → train-phase2
          → train-fusion → predict → evaluate      (+ visualize, ablate, acceptance)

All randomness flows from --seed.  Every stage that trains or reads models
works on an explicit checkpoint directory (--ckpt) holding phase1.ckpt,
patch_<region>.ckpt, fusion.ckpt, attention.csv, norm_stats.txt and
config_snapshot.  The configuration is, in order of precedence:
--set / flag overrides, --config, the checkpoint's config_snapshot, defaults.

Exit codes: 0 success, 1 invalid input, 2 runtime failure.
"""
import functools
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import click
import torch
from dotenv import load_dotenv
from pydantic import ValidationError
from pythonjsonlogger import jsonlogger

import pad_metrics
import run_ablations
import run_plots
from checkpoints import CheckpointDir, load_model, read_norm_stats, save_model, write_norm_stats
from compose_folds import DEFAULT_FOLDS, holdout_subject_split, kfold_subject_split, write_folds
from face_manifest import load_manifest, write_manifest
from generate_faces import SynthConfig, generate_synthetic
from gradcam_attention import read_attention_table, write_attention_table
from pad_errors import PadError, ValidationFailure
from patch_geometry import REGION_NAMES
from train_config import FUSION_MODES, TrainConfig, load_config, override_help, write_config
from train_phases import (
    TrainedSystem, TrainingData, extract_attention, planted_attention_sanity, predict, predict_manifest,
    train_fusion, train_phase1, train_phase2, write_training_log,
)

log = logging.getLogger("run_pad")

OVERRIDES_EPILOG = ("Config overrides (--set section.key=value), defaults shown:\n\n\b\n"
                    + override_help())


# ------------------------------------------------------------------ environment
def setup_logging(json_logs: bool = False, level: int = logging.INFO) -> None:
    handler = logging.StreamHandler(sys.stderr)
    if json_logs:
        handler.setFormatter(jsonlogger.JsonFormatter("%(asctime)s %(levelname)s %(name)s %(message)s"))
    else:
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(level)


def device_from_env() -> str:
    threads = os.getenv("PAD_NUM_THREADS")
    if threads:
        torch.set_num_threads(int(threads))
    return os.getenv("PAD_DEVICE", "cpu")


def resolve_config(config_path: Optional[str], overrides: Sequence[str], seed: Optional[int] = None,
                   ckpt: Optional[CheckpointDir] = None, extra: Sequence[str] = ()) -> TrainConfig:
    path = config_path
    if path is None and ckpt is not None and ckpt.config_snapshot.exists():
        path = ckpt.config_snapshot
    merged = list(overrides) + list(extra)
    if seed is not None:
        merged.append(f"run.seed={seed}")
    return load_config(path, merged)


def common_options(func):
    """--config / --set / --seed / --log-json on every subcommand."""
    @click.option("--config", "config_path", type=click.Path(dir_okay=False),
                  help="Config file ([section] key = value).")
    @click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
                  help="Override one config key, e.g. phase1.epochs=5 (repeatable).")
    @click.option("--seed", type=int, default=None, help="Seed for every random stream.")
    @click.option("--log-json", is_flag=True, help="Emit log records as JSON lines.")
    @functools.wraps(func)
    def wrapper(*args, log_json: bool, **kwargs):
        setup_logging(log_json)
        return func(*args, **kwargs)
    return wrapper


# ------------------------------------------------------------------ commands
@click.group(context_settings={"help_option_names": ["-h", "--help"]})
def cli():
    """Two-phase disguise-makeup presentation attack detection."""


@cli.command(epilog=OVERRIDES_EPILOG)
@common_options
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--n-live", type=int, default=None, help="synth.n_subjects_live")
@click.option("--n-attack", type=int, default=None, help="synth.n_subjects_attack")
@click.option("--image-size", type=int, default=None, help="synth.image_size")
@click.option("--images-per-subject", type=int, default=None, help="synth.images_per_subject")
@click.option("--artifact-regions", type=int, default=None, help="synth.artifact_region_count")
@click.option("--style-jitter", type=float, default=None, help="synth.style_jitter")
def synth(config_path, overrides, seed, out_dir, n_live, n_attack, image_size, images_per_subject,
          artifact_regions, style_jitter):
    """Render a synthetic live/attack face set with landmarks and a manifest."""
    flags = {"n_subjects_live": n_live, "n_subjects_attack": n_attack, "image_size": image_size,
             "images_per_subject": images_per_subject, "artifact_region_count": artifact_regions,
             "style_jitter": style_jitter}
    extra = [f"synth.{key}={value}" for key, value in flags.items() if value is not None]
    cfg = resolve_config(config_path, overrides, seed, extra=extra)
    manifest = generate_synthetic(SynthConfig(**cfg.synth.model_dump(), seed=cfg.seed), out_dir)
    n_attack_samples = int(manifest.labels.sum())
    click.echo(f"✅ {len(manifest)} faces ({len(manifest) - n_attack_samples} live, "
               f"{n_attack_samples} attack) → {Path(out_dir) / 'manifest.csv'}")


@cli.command(epilog=OVERRIDES_EPILOG)
@common_options
@click.option("--manifest", "manifest_path", required=True, type=click.Path(dir_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--folds", type=int, default=DEFAULT_FOLDS, show_default=True,
              help="Number of subject-disjoint folds.")
@click.option("--holdout", is_flag=True, help="Write a single 80/20 train/test split instead.")
def split(config_path, overrides, seed, manifest_path, out_dir, folds, holdout):
    """Subject-disjoint k-fold (or 80/20 holdout) split of a manifest."""
    cfg = resolve_config(config_path, overrides, seed)
    manifest = load_manifest(manifest_path)
    out = Path(out_dir)
    if holdout:
        train, test = holdout_subject_split(manifest, seed=cfg.seed)
        write_manifest(train, out / "train.csv")
        write_manifest(test, out / "test.csv")
        click.echo(f"✅ holdout split: {len(train)} train / {len(test)} test → {out}")
    else:
        parts = kfold_subject_split(manifest, folds, cfg.seed)
        write_folds(parts, out)
        click.echo(f"✅ {len(parts)} subject-disjoint folds → {out}")


@cli.command("train-phase1", epilog=OVERRIDES_EPILOG)
@common_options
@click.option("--train", "train_path", required=True, type=click.Path(dir_okay=False))
@click.option("--ckpt", "ckpt_dir", required=True, type=click.Path(file_okay=False))
def train_phase1_cmd(config_path, overrides, seed, train_path, ckpt_dir):
    """Phase 1: full-face model with CSA, AIAW and triplet focal losses."""
    ckpt = CheckpointDir(ckpt_dir)
    cfg = resolve_config(config_path, overrides, seed)
    data = TrainingData(load_manifest(train_path), cfg.phase2.input_size)
    model, table = train_phase1(cfg, data, device=device_from_env())
    save_model(model, ckpt.phase1)
    mean, std = data.norm_stats
    write_norm_stats(mean, std, ckpt.norm_stats)
    write_config(cfg, ckpt.config_snapshot)
    write_training_log(table, ckpt.log("phase1"))
    click.echo(f"✅ phase 1 trained for {cfg.phase1.epochs} epochs → {ckpt.phase1}")


@cli.command("extract-attention", epilog=OVERRIDES_EPILOG)
@common_options
@click.option("--manifest", "manifest_path", required=True, type=click.Path(dir_okay=False))
@click.option("--ckpt", "ckpt_dir", required=True, type=click.Path(file_okay=False))
@click.option("--k-percent", type=float, default=None, help="Top-k% pooling (default from config).")
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default=None,
              help="Attention CSV (default <ckpt>/attention.csv).")
def extract_attention_cmd(config_path, overrides, seed, manifest_path, ckpt_dir, k_percent, out_path):
    """Grad-CAM region attention scores for every sample of a manifest."""
    ckpt = CheckpointDir(ckpt_dir)
    extra = [] if k_percent is None else [f"attention.k_percent={k_percent}"]
    cfg = resolve_config(config_path, overrides, seed, ckpt, extra)
    model = load_model(ckpt.phase1, "fullface", device_from_env())
    table = extract_attention(model, load_manifest(manifest_path), cfg.attention.k_percent,
                              cfg.attention.batch_size, device=device_from_env())
    out = write_attention_table(table, out_path or ckpt.attention)
    write_config(cfg, ckpt.config_snapshot)
    click.echo(f"✅ attention for {len(table)} samples (k={cfg.attention.k_percent:g}%) → {out}")


@cli.command("train-phase2", epilog=OVERRIDES_EPILOG)
@common_options
@click.option("--train", "train_path", required=True, type=click.Path(dir_okay=False))
@click.option("--ckpt", "ckpt_dir", required=True, type=click.Path(file_okay=False))
def train_phase2_cmd(config_path, overrides, seed, train_path, ckpt_dir):
    """Phase 2: one patch model per facial region."""
    ckpt = CheckpointDir(ckpt_dir)
    cfg = resolve_config(config_path, overrides, seed, ckpt)
    norm = read_norm_stats(ckpt.norm_stats)
    models, table = train_phase2(cfg, load_manifest(train_path), device=device_from_env(), norm=norm)
    for region, model in zip(REGION_NAMES, models):
        save_model(model, ckpt.patch(region))
    write_config(cfg, ckpt.config_snapshot)
    write_training_log(table, ckpt.log("phase2"))
    click.echo(f"✅ {len(models)} patch models trained → {ckpt.root}")


@cli.command("train-fusion", epilog=OVERRIDES_EPILOG)
@common_options
@click.option("--train", "train_path", required=True, type=click.Path(dir_okay=False))
@click.option("--ckpt", "ckpt_dir", required=True, type=click.Path(file_okay=False))
@click.option("--fusion-mode", type=click.Choice(FUSION_MODES), default=None)
@click.option("--attention", "attention_path", type=click.Path(dir_okay=False), default=None,
              help="Attention CSV for the training manifest (default <ckpt>/attention.csv).")
def train_fusion_cmd(config_path, overrides, seed, train_path, ckpt_dir, fusion_mode, attention_path):
    """Fuse the patch embeddings (weighted/unweighted MLP or majority vote)."""
    ckpt = CheckpointDir(ckpt_dir)
    extra = [] if fusion_mode is None else [f"fusion.mode={fusion_mode}"]
    cfg = resolve_config(config_path, overrides, seed, ckpt, extra)
    device = device_from_env()
    patches = [load_model(ckpt.patch(r), "patch", device) for r in REGION_NAMES]
    attention = None
    if cfg.fusion.mode == "weighted_mlp":
        attention = read_attention_table(attention_path or ckpt.attention)
    model, table = train_fusion(cfg, patches, attention, load_manifest(train_path), device=device)
    if model is None:
        if ckpt.fusion.exists():
            ckpt.fusion.unlink()
        click.echo("✅ majority-vote fusion selected; nothing to train")
    else:
        save_model(model, ckpt.fusion)
        write_training_log(table, ckpt.log("fusion"))
        click.echo(f"✅ fusion MLP ({cfg.fusion.mode}) trained → {ckpt.fusion}")
    write_config(cfg, ckpt.config_snapshot)


@cli.command("predict", epilog=OVERRIDES_EPILOG)
@common_options
@click.option("--manifest", "manifest_path", required=True, type=click.Path(dir_okay=False))
@click.option("--ckpt", "ckpt_dir", required=True, type=click.Path(file_okay=False))
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default=None,
              help="Score CSV to write.")
@click.option("--sample-id", "sample_ids", multiple=True, help="Print the score of these samples only.")
@click.option("--k-percent", type=float, default=None)
def predict_cmd(config_path, overrides, seed, manifest_path, ckpt_dir, out_path, sample_ids, k_percent):
    """Attack probability for every sample (or the chosen ones)."""
    ckpt = CheckpointDir(ckpt_dir)
    extra = [] if k_percent is None else [f"attention.k_percent={k_percent}"]
    cfg = resolve_config(config_path, overrides, seed, ckpt, extra)
    system = TrainedSystem.load(ckpt, cfg, device=device_from_env())
    manifest = load_manifest(manifest_path)
    if sample_ids:
        for sid in sample_ids:
            score, label = predict(system, manifest[sid])
            click.echo(f"{sid}\t{score:.6f}\t{'attack' if label else 'live'}")
        return
    scores = predict_manifest(system, manifest)
    out = pad_metrics.write_scores(scores, out_path or ckpt.root / "scores.csv")
    click.echo(f"✅ {len(scores)} scores → {out}")


@cli.command("evaluate", epilog=OVERRIDES_EPILOG)
@common_options
@click.option("--scores", "score_paths", multiple=True, type=click.Path(dir_okay=False),
              help="Score CSV (repeat for several folds).")
@click.option("--folds", "folds_dir", type=click.Path(file_okay=False), default=None,
              help="Directory with fold_<i>/scores.csv; reports mean ± std across folds.")
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default="report.json",
              show_default=True)
@click.option("--attention", "attention_path", type=click.Path(dir_okay=False), default=None,
              help="Attention CSV of the evaluated manifest; adds the planted-region sanity check.")
@click.option("--manifest", "manifest_path", type=click.Path(dir_okay=False), default=None,
              help="Manifest whose planted/ sidecars the attention CSV is checked against.")
def evaluate_cmd(config_path, overrides, seed, score_paths, folds_dir, out_path, attention_path, manifest_path):
    """APCER / BPCER / ACER / EER / TDR@FDR report from score files."""
    cfg = resolve_config(config_path, overrides, seed)
    paths: List[Path] = [Path(p) for p in score_paths]
    if folds_dir:
        paths += sorted(Path(folds_dir).glob("fold_*/scores.csv"))
    if not paths:
        raise click.UsageError("give --scores or --folds")
    if (attention_path is None) != (manifest_path is None):
        raise click.UsageError("--attention and --manifest go together")
    sanity = None
    if attention_path:
        sanity = planted_attention_sanity(read_attention_table(attention_path),
                                          load_manifest(manifest_path).samples).as_dict()
    pad_metrics.main([str(p) for p in paths], out_path, cfg.evaluate.threshold, cfg.evaluate.fdr, sanity)


@cli.command("visualize", epilog=OVERRIDES_EPILOG)
@common_options
@click.option("--manifest", "manifest_path", required=True, type=click.Path(dir_okay=False))
@click.option("--ckpt", "ckpt_dir", required=True, type=click.Path(file_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--limit", type=int, default=8, show_default=True)
@click.option("--sample-id", "sample_ids", multiple=True)
@click.option("--logs", is_flag=True, help="Also plot loss curves from the training logs.")
def visualize_cmd(config_path, overrides, seed, manifest_path, ckpt_dir, out_dir, limit, sample_ids, logs):
    """Heatmap overlays, patch-box debug images and loss curves."""
    ckpt = CheckpointDir(ckpt_dir)
    cfg = resolve_config(config_path, overrides, seed, ckpt)
    model = load_model(ckpt.phase1, "fullface")
    written = run_plots.visualize_samples(model, load_manifest(manifest_path), Path(out_dir),
                                          sample_ids, limit, cfg.attention.k_percent)
    if logs:
        found = [ckpt.log(p) for p in ("phase1", "phase2", "fusion") if ckpt.log(p).exists()]
        written += run_plots.plot_loss_curves(found, Path(out_dir))
    click.echo(f"✅ {len(written)} images → {out_dir}")


@cli.command("ablate", epilog=OVERRIDES_EPILOG)
@common_options
@click.option("--manifest", "manifest_path", required=True, type=click.Path(dir_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--seeds", default="1,2,3,4,5", show_default=True, help="Comma-separated seeds.")
def ablate_cmd(config_path, overrides, seed, manifest_path, out_dir, seeds):
    """Multi-seed ablation grid and ordering checks."""
    cfg = resolve_config(config_path, overrides, seed)
    try:
        seed_list = [int(s) for s in seeds.split(",") if s.strip()]
    except ValueError:
        raise click.BadParameter(f"not a comma-separated list of integers: {seeds!r}", param_hint="--seeds")
    run_ablations.main(cfg, manifest_path, out_dir, seed_list)


@cli.command("acceptance", epilog=OVERRIDES_EPILOG)
@common_options
@click.option("--manifest", "manifest_path", required=True, type=click.Path(dir_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
def acceptance_cmd(config_path, overrides, seed, manifest_path, out_dir):
    """Default pipeline on an 80/20 holdout, checked against the ACER, EER and attention targets."""
    cfg = resolve_config(config_path, overrides, seed)
    run_ablations.acceptance(cfg, manifest_path, out_dir)


# ------------------------------------------------------------------ entry point
def run(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv(override=False)
    try:
        rv = cli.main(args=list(argv) if argv is not None else None, prog_name="run_pad",
                      standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("error: aborted", err=True)
        return 1
    except click.ClickException as exc:
        click.echo(f"error: {exc.format_message()}", err=True)
        return 1
    except ValidationFailure as exc:
        click.echo(f"error: {exc}", err=True)
        return 1
    except ValidationError as exc:
        first = exc.errors()[0]
        click.echo(f"error: {'.'.join(str(p) for p in first['loc'])}: {first['msg']}", err=True)
        return 1
    except PadError as exc:
        click.echo(f"error: {exc}", err=True)
        return 2
    except Exception as exc:
        log.debug("unhandled failure", exc_info=True)
        click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
        return 2
    return rv if isinstance(rv, int) else 0


if __name__ == "__main__":
    sys.exit(run())
