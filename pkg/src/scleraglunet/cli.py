"""Command-line surface: synth, preprocess, train-eval, ablate, saliency.

Every command is a pure function of (config file, input directory); rerunning
with the same inputs reproduces the outputs byte for byte. Exit codes:
0 success, 2 configuration error, 3 I/O error, 4 leakage detected,
5 non-finite loss.
"""

from __future__ import annotations

import csv
import os
import sys

import click
import numpy as np

from . import imgproc
from .config import RunConfig, parse_config
from .errors import (InvalidConfig, InvalidParam, IoFailure, LeakageDetected,
                     ManifestSchemaError, NonFiniteLoss, PipelineError)
from .evalkit import canonical_json, convert_glucose, group_kfold
from .model import VARIANTS, ModelConfig
from .mrfo import MrfoConfig, save_mask
from .pipeline import (build_report, load_fold_data, preprocess_manifest,
                       run_fold, run_protocol, write_history_csv)
from .saliency import grad_cam, grad_cam_pp, overlay
from .synthcohort import (VIEWS, read_manifest, render_rasters, sample_cohort,
                          write_manifest)

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_LEAKAGE = 4
EXIT_NONFINITE = 5


def _load_config(path) -> RunConfig:
    try:
        return parse_config(path)
    except (InvalidConfig, ValueError) as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    except OSError as exc:
        click.echo(f"cannot read config: {exc}", err=True)
        sys.exit(EXIT_IO)


def _guard(fn):
    try:
        fn()
    except LeakageDetected as exc:
        click.echo(f"leakage detected: {exc}", err=True)
        sys.exit(EXIT_LEAKAGE)
    except NonFiniteLoss as exc:
        click.echo(f"non-finite loss: {exc}", err=True)
        sys.exit(EXIT_NONFINITE)
    except (IoFailure, OSError) as exc:
        click.echo(f"I/O error: {exc}", err=True)
        sys.exit(EXIT_IO)
    except (InvalidConfig, InvalidParam, ManifestSchemaError, PipelineError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)


def _write_atomic(path, text: str):
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


@click.group()
def main():
    """Multiview scleral-vessel glucose pipeline."""


@main.command()
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--out", "out_dir", type=click.Path(), required=True)
def synth(config_path, out_dir):
    """Generate the synthetic cohort: manifest, truth table, and images."""
    cfg = _load_config(config_path)

    def run():
        manifest = sample_cohort(cfg.counts, cfg.seed)
        os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
        write_manifest(manifest, out_dir)
        for rec in manifest.records:
            rasters = render_rasters(rec, cfg.seed)
            for view in VIEWS:
                rel_path, _ = rec.view_images[view]
                imgproc.save_image(rasters[view], os.path.join(out_dir, rel_path))
        click.echo(f"wrote {len(manifest.records)} participants, "
                   f"{len(manifest.records) * len(VIEWS)} images to {out_dir}")

    _guard(run)


@main.command()
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--data", "data_dir", type=click.Path(), required=True,
              help="Directory produced by `synth`.")
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--masks/--no-masks", default=False,
              help="Also write binary vessel masks.")
def preprocess(config_path, data_dir, out_dir, masks):
    """Enhance all images (crop, normalize, CLAHE, vesselness) with QC."""
    cfg = _load_config(config_path)

    def run():
        manifest = read_manifest(data_dir)
        os.makedirs(out_dir, exist_ok=True)
        kept, failures = preprocess_manifest(manifest, data_dir, out_dir,
                                             cfg.preprocess, write_masks=masks)
        with open(os.path.join(out_dir, "qc_failures.csv"), "w", newline="",
                  encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["participant_id", "view", "blur_score",
                             "specular_fraction", "mean_intensity"])
            for pid, view, rep in failures:
                writer.writerow([pid, view, repr(rep.blur_score),
                                 repr(rep.specular_fraction),
                                 repr(rep.mean_intensity)])
        with open(os.path.join(out_dir, "kept.csv"), "w", newline="",
                  encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["participant_id", "view", "enhanced_path"])
            for pid in sorted(kept):
                for view in VIEWS:
                    writer.writerow([pid, view, kept[pid][view]])
        click.echo(f"enhanced {sum(len(v) for v in kept.values())} images, "
                   f"{len(failures)} QC failures")

    _guard(run)


def _read_kept(out_dir):
    kept: dict = {}
    with open(os.path.join(out_dir, "kept.csv"), newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    for pid, view, path in rows[1:]:
        kept.setdefault(pid, {})[view] = path
    return kept


def _mrfo_config(cfg: RunConfig, dim: int) -> MrfoConfig:
    return MrfoConfig(pop_size=cfg.mrfo_pop, iters=cfg.mrfo_iters, dim=dim,
                      bounds=((0.0, 1.0),) * dim, seed=cfg.seed)


def _emit_report(report: dict, out_dir: str, prefix: str = ""):
    from . import svgplot

    plot = report.pop("_plot_data")
    _write_atomic(os.path.join(out_dir, prefix + "report.json"),
                  canonical_json(report))

    curves = {f"{name} (AUC={auc:.3f})" if auc is not None else name: pts
              for name, auc, pts in zip(("normal", "controlled", "high_glucose"),
                                        report["auc_ovr"], plot["roc_curves"])
              if pts}
    _write_atomic(os.path.join(out_dir, prefix + "roc.svg"), svgplot.roc_svg(curves))
    for i, pts in enumerate(plot["roc_curves"]):
        with open(os.path.join(out_dir, f"{prefix}roc_class{i}.csv"), "w",
                  newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["fpr", "tpr"])
            writer.writerows([[repr(a), repr(b)] for a, b in pts])

    truth = [a for a, _ in plot["scatter"]]
    pred = [b for _, b in plot["scatter"]]
    _write_atomic(os.path.join(out_dir, prefix + "scatter.svg"),
                  svgplot.scatter_svg(pred, truth, "Predicted vs true glucose",
                                      "mg/dL"))
    with open(os.path.join(out_dir, prefix + "scatter.csv"), "w", newline="",
              encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fpg_true_mgdl", "fpg_pred_mgdl"])
        writer.writerows([[repr(a), repr(b)] for a, b in plot["scatter"]])

    _write_atomic(os.path.join(out_dir, prefix + "bland_altman.svg"),
                  svgplot.bland_altman_svg(plot["bland_altman_points"],
                                           report["bland_altman"], "mg/dL"))
    with open(os.path.join(out_dir, prefix + "bland_altman.csv"), "w",
              newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mean_mgdl", "difference_mgdl"])
        writer.writerows([[repr(a), repr(b)]
                          for a, b in plot["bland_altman_points"]])

    rows = [[r["fold"], r["participants"], f"{r['accuracy']:.3f}",
             f"{r['mae_mgdl']:.2f}"] for r in report["fold_breakdown"]]
    rows.append(["mean±sd", "",
                 f"{report['fold_accuracy_mean']:.3f}±{report['fold_accuracy_sd']:.3f}",
                 ""])
    _write_atomic(os.path.join(out_dir, prefix + "fold_table.svg"),
                  svgplot.table_svg(["fold", "participants", "accuracy",
                                     "MAE (mg/dL)"], rows, "Per-fold results"))
    with open(os.path.join(out_dir, prefix + "fold_table.csv"), "w", newline="",
              encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fold", "participants", "accuracy", "mae_mgdl"])
        for r in report["fold_breakdown"]:
            writer.writerow([r["fold"], r["participants"], repr(r["accuracy"]),
                             repr(r["mae_mgdl"])])


@main.command(name="train-eval")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--data", "data_dir", type=click.Path(), required=True,
              help="Directory produced by `synth`.")
@click.option("--processed", "processed_dir", type=click.Path(), required=True,
              help="Directory produced by `preprocess`.")
@click.option("--out", "out_dir", type=click.Path(), required=True)
def train_eval(config_path, data_dir, processed_dir, out_dir):
    """Grouped k-fold training + full evaluation report."""
    cfg = _load_config(config_path)

    def run():
        manifest = read_manifest(data_dir)
        kept = _read_kept(processed_dir)
        data = load_fold_data(manifest, processed_dir, kept)
        participants = [(rec.participant_id, rec.class_index)
                        for rec in manifest.records
                        if rec.participant_id in kept]
        folds = group_kfold(participants, cfg.folds, cfg.seed)
        mrfo_cfg = _mrfo_config(cfg, cfg.model.mask_dim)
        report, artifacts, _ = run_protocol(data, folds, cfg.model, cfg.hyper,
                                            mrfo_cfg, cfg.seed, cfg.bootstrap_b)
        os.makedirs(out_dir, exist_ok=True)
        for art in artifacts:
            art["store"].save(os.path.join(out_dir, f"fold{art['fold']}.ckpt"))
            write_history_csv(art["history"],
                              os.path.join(out_dir, f"fold{art['fold']}_history.csv"))
            save_mask(art["mask"], os.path.join(out_dir, f"fold{art['fold']}_mask.txt"),
                      cfg.seed)
        _emit_report(report, out_dir)
        click.echo(f"accuracy={report['accuracy']:.3f} "
                   f"mae={report['mae_mgdl']:.2f} mg/dL -> {out_dir}")

    _guard(run)


@main.command()
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--data", "data_dir", type=click.Path(), required=True)
@click.option("--processed", "processed_dir", type=click.Path(), required=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
def ablate(config_path, data_dir, processed_dir, out_dir):
    """Run the four architecture variants under identical folds."""
    from . import svgplot
    from .pipeline import run_ablation

    cfg = _load_config(config_path)

    def run():
        manifest = read_manifest(data_dir)
        kept = _read_kept(processed_dir)
        data = load_fold_data(manifest, processed_dir, kept)
        participants = [(rec.participant_id, rec.class_index)
                        for rec in manifest.records
                        if rec.participant_id in kept]
        folds = group_kfold(participants, cfg.folds, cfg.seed)
        mrfo_cfg = _mrfo_config(cfg, cfg.model.mask_dim)
        reports = run_ablation(data, folds, cfg.model, cfg.hyper, mrfo_cfg,
                               cfg.seed, cfg.bootstrap_b)
        os.makedirs(out_dir, exist_ok=True)
        for variant in VARIANTS:
            _emit_report(reports[variant], out_dir, prefix=f"{variant}_")
        mmol = [reports[v]["mae_mmol"] for v in VARIANTS]
        _write_atomic(os.path.join(out_dir, "ablation_mae.svg"),
                      svgplot.bar_svg(VARIANTS, mmol, "Ablation: regression error",
                                      "MAE (mmol/L)"))
        with open(os.path.join(out_dir, "ablation.csv"), "w", newline="",
                  encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["variant", "accuracy", "mae_mgdl", "mae_mmol"])
            for v in VARIANTS:
                writer.writerow([v, repr(reports[v]["accuracy"]),
                                 repr(reports[v]["mae_mgdl"]),
                                 repr(reports[v]["mae_mmol"])])
        click.echo(f"ablation complete -> {out_dir}")

    _guard(run)


@main.command()
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--data", "data_dir", type=click.Path(), required=True)
@click.option("--processed", "processed_dir", type=click.Path(), required=True)
@click.option("--checkpoint", type=click.Path(), required=True)
@click.option("--participants", "pids", type=str, required=True,
              help="Comma-separated participant ids.")
@click.option("--out", "out_dir", type=click.Path(), required=True)
def saliency(config_path, data_dir, processed_dir, checkpoint, pids, out_dir):
    """Grad-CAM and Grad-CAM++ overlays for all five views."""
    from .autonn import ParamStore

    cfg = _load_config(config_path)

    def run():
        manifest = read_manifest(data_dir)
        kept = _read_kept(processed_dir)
        data = load_fold_data(manifest, processed_dir, kept)
        store = ParamStore.load(checkpoint)
        requested = [p.strip() for p in pids.split(",") if p.strip()]
        missing = [p for p in requested if p not in data.views_x]
        if missing:
            click.echo(f"unknown participant ids: {missing}", err=True)
            sys.exit(EXIT_CONFIG)
        os.makedirs(out_dir, exist_ok=True)
        for pid in requested:
            x = data.views_x[pid]
            for view_i, view in enumerate(cfg.model.views):
                base = imgproc.gray_from_array(x[view_i])
                for method, fn in (("gradcam", grad_cam), ("gradcampp", grad_cam_pp)):
                    hm = fn(store, x, cfg.model, "predicted", view)
                    img = overlay(hm, base, cfg.saliency_alpha)
                    imgproc.save_image(img, os.path.join(
                        out_dir, f"{pid}_{view}_{method}.ppm"))
        click.echo(f"wrote {len(requested) * len(cfg.model.views) * 2} overlays")

    _guard(run)


if __name__ == "__main__":
    main()
