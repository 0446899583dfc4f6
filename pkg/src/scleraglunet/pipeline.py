"""End-to-end protocol: preprocessing, per-fold training with optional MRFO
feature selection, out-of-fold aggregation into a metrics report, and the
four-variant ablation harness.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, replace

import numpy as np

from . import imgproc
from .errors import LeakageDetected
from .evalkit import (MGDL_PER_MMOL, FoldAssignment, accuracy, bland_altman,
                      bootstrap_ci, confusion_and_prf1, convert_glucose,
                      group_kfold, regression_metrics, roc_auc_ovr)
from .model import (FoldData, Hyper, ModelConfig, VARIANTS, extract_embeddings,
                    predict, train_fold)
from .mrfo import MrfoConfig, all_ones_mask, feature_select
from .synthcohort import CLASS_NAMES, VIEWS, CohortManifest

WORK_SIZE = 64


@dataclass(frozen=True)
class PreprocessParams:
    p_low: float = 1.0
    p_high: float = 99.0
    tiles_x: int = 8
    tiles_y: int = 8
    clip_limit: float = 4.0
    scales: tuple = (1.0, 2.0, 4.0)
    beta: float = 0.5
    qc: imgproc.QcThresholds = imgproc.QcThresholds()


def enhance_image(gray: imgproc.GrayImage, roi: tuple,
                  params: PreprocessParams) -> imgproc.GrayImage:
    """ROI crop -> working resolution -> percentile stretch -> CLAHE ->
    multi-scale vesselness, all on [0,1] grayscale."""
    x, y, w, h = roi
    cropped = imgproc.crop(gray, x, y, w, h)
    small = imgproc.resize_area(cropped, WORK_SIZE, WORK_SIZE)
    norm = imgproc.normalize_intensity(small, params.p_low, params.p_high)
    eq = imgproc.clahe(norm, params.tiles_x, params.tiles_y, params.clip_limit)
    vmap = imgproc.frangi(eq, params.scales, params.beta)
    return imgproc.gray_from_array(vmap.data)


def preprocess_manifest(manifest: CohortManifest, image_root: str, out_dir: str,
                        params: PreprocessParams, write_masks: bool = False):
    """Enhance every view image; QC failures are recorded and excluded.

    Returns (fold_data_paths, qc_failures): a map pid -> view -> enhanced
    image path for participants whose five views all pass QC, and the list
    of failing (pid, view, report) tuples.
    """
    enhanced_dir = os.path.join(out_dir, "enhanced")
    os.makedirs(enhanced_dir, exist_ok=True)
    if write_masks:
        os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)
    kept: dict = {}
    failures = []
    for rec in manifest.records:
        views_ok = {}
        for view in VIEWS:
            rel_path, roi = rec.view_images[view]
            raster = imgproc.load_image(os.path.join(image_root, rel_path))
            gray = imgproc.to_gray(raster)
            report = imgproc.quality_check(gray, params.qc)
            if not report.passed:
                failures.append((rec.participant_id, view, report))
                continue
            vessel = enhance_image(gray, roi, params)
            out_name = f"{rec.participant_id}_{view}.pgm"
            imgproc.save_image(imgproc.raster_from_gray(vessel),
                               os.path.join(enhanced_dir, out_name))
            if write_masks:
                mask = imgproc.binarize(imgproc.VesselnessMap(
                    width=vessel.width, height=vessel.height,
                    data=vessel.data, scales_used=params.scales))
                mask_img = imgproc.gray_from_array(mask.bits.astype(np.float64))
                imgproc.save_image(imgproc.raster_from_gray(mask_img),
                                   os.path.join(out_dir, "masks", out_name))
            views_ok[view] = os.path.join("enhanced", out_name)
        if len(views_ok) == len(VIEWS):
            kept[rec.participant_id] = views_ok
    return kept, failures


def load_fold_data(manifest: CohortManifest, processed_dir: str,
                   kept: dict) -> FoldData:
    views_x = {}
    labels = {}
    fpg = {}
    for rec in manifest.records:
        if rec.participant_id not in kept:
            continue
        arrs = []
        for view in VIEWS:
            img = imgproc.load_image(os.path.join(processed_dir,
                                                  kept[rec.participant_id][view]))
            arrs.append(imgproc.to_gray(img).data)
        views_x[rec.participant_id] = np.stack(arrs)
        labels[rec.participant_id] = rec.class_index
        fpg[rec.participant_id] = rec.fpg
    return FoldData(views_x=views_x, labels=labels, fpg=fpg)


def _views_for_variant(x: np.ndarray, config: ModelConfig) -> np.ndarray:
    # branch order follows config.views; the straight view is VIEWS[0]
    return x[:1] if config.variant == "single_view" else x


@dataclass
class OofPrediction:
    participant_id: str
    fold: int
    y_true: int
    probs: np.ndarray
    fpg_true: float
    fpg_pred: float

    @property
    def y_pred(self) -> int:
        return int(self.probs.argmax())


def run_fold(data: FoldData, folds: FoldAssignment, fold: int,
             config: ModelConfig, hyper: Hyper, mrfo_cfg: MrfoConfig | None,
             seed: int):
    """Train one cross-validation round and predict its test participants.

    For MRFO variants: train with an all-ones mask, select a mask on frozen
    train/validation embeddings, then fine-tune with the mask applied. Test
    participants never reach training or selection.
    """
    train_ids, val_ids, test_ids = folds.roles(fold)
    train_ids = [p for p in train_ids if p in data.views_x]
    val_ids = [p for p in val_ids if p in data.views_x]
    test_ids = [p for p in test_ids if p in data.views_x]
    fold_seed = seed * 1000 + fold

    subset = FoldData(
        views_x={p: _views_for_variant(data.views_x[p], config)
                 for p in train_ids + val_ids + test_ids},
        labels=data.labels, fpg=data.fpg)

    mask_vec = all_ones_mask(config.mask_dim).as_array()
    store, history = train_fold(subset, train_ids, val_ids, test_ids, config,
                                hyper, fold_seed, mask=mask_vec)
    mask = all_ones_mask(config.mask_dim)
    if config.uses_mrfo:
        if mrfo_cfg is None:
            mrfo_cfg = MrfoConfig(pop_size=12, iters=15, dim=config.mask_dim,
                                  bounds=((0.0, 1.0),) * config.mask_dim,
                                  seed=fold_seed)
        if set(test_ids) & (set(train_ids) | set(val_ids)):
            raise LeakageDetected("fold roles overlap")
        train_emb = extract_embeddings(store, subset, train_ids, config)
        val_emb = extract_embeddings(store, subset, val_ids, config)
        y_train = np.array([data.labels[p] for p in train_ids])
        y_val = np.array([data.labels[p] for p in val_ids])
        mask = feature_select(train_emb, y_train, val_emb, y_val,
                              replace(mrfo_cfg, dim=config.mask_dim,
                                      bounds=((0.0, 1.0),) * config.mask_dim,
                                      seed=fold_seed))
        store, tail = train_fold(subset, train_ids, val_ids, test_ids, config,
                                 hyper, fold_seed, mask=mask.as_array(),
                                 initial=store, epochs=hyper.finetune_epochs)
        history = history + tail

    preds = []
    for pid in test_ids:
        p = predict(store, subset.views_x[pid], config, mask.as_array())
        preds.append(OofPrediction(
            participant_id=pid, fold=fold, y_true=data.labels[pid],
            probs=p.class_probs, fpg_true=data.fpg[pid], fpg_pred=p.glucose_mgdl))
    return store, mask, history, preds


def build_report(oof: list, k: int, bootstrap_b: int, seed: int,
                 variant: str) -> dict:
    """Aggregate out-of-fold participant predictions into the full report."""
    oof = sorted(oof, key=lambda p: p.participant_id)
    y_true = [p.y_true for p in oof]
    y_pred = [p.y_pred for p in oof]
    scores = np.stack([p.probs for p in oof])
    fpg_true = [p.fpg_true for p in oof]
    fpg_pred = [p.fpg_pred for p in oof]

    confusion, per_class, macro, weighted = confusion_and_prf1(y_true, y_pred)
    aucs, curves = roc_auc_ovr(scores, y_true)
    reg = regression_metrics(fpg_pred, fpg_true)
    ba_stats, ba_points = bland_altman(fpg_pred, fpg_true)

    def ci(stat):
        return bootstrap_ci(stat, oof, bootstrap_b, seed)

    acc_ci = ci(lambda ps: accuracy([p.y_true for p in ps], [p.y_pred for p in ps]))
    for c, pc in enumerate(per_class):
        def prf(ps, c=c):
            _, pcs, _, _ = confusion_and_prf1([p.y_true for p in ps],
                                              [p.y_pred for p in ps])
            return pcs[c]["f1"]
        pc["f1_ci"] = ci(prf)
    mae_ci = ci(lambda ps: float(np.mean([abs(p.fpg_pred - p.fpg_true) for p in ps])))

    fold_rows = []
    for f in range(k):
        members = [p for p in oof if p.fold == f]
        if not members:
            continue
        fold_rows.append({
            "fold": f,
            "participants": len(members),
            "accuracy": accuracy([p.y_true for p in members],
                                 [p.y_pred for p in members]),
            "mae_mgdl": float(np.mean([abs(p.fpg_pred - p.fpg_true)
                                       for p in members])),
        })
    fold_acc = [r["accuracy"] for r in fold_rows]

    return {
        "variant": variant,
        "participants": len(oof),
        "confusion": confusion.tolist(),
        "per_class": [dict(pc, name=CLASS_NAMES[i]) for i, pc in enumerate(per_class)],
        "macro": macro,
        "weighted": weighted,
        "accuracy": accuracy(y_true, y_pred),
        "accuracy_ci": list(acc_ci),
        "auc_ovr": aucs,
        "mae_mgdl": reg["mae"],
        "mae_mmol": convert_glucose(reg["mae"], to_mmol=True),
        "mae_ci_mgdl": list(mae_ci),
        "rmse_mgdl": reg["rmse"],
        "pearson_r": reg["pearson_r"],
        "r2": reg["r2"],
        "bland_altman": ba_stats,
        "fold_breakdown": fold_rows,
        "fold_accuracy_mean": float(np.mean(fold_acc)),
        "fold_accuracy_sd": float(np.std(fold_acc, ddof=1)) if len(fold_acc) > 1 else 0.0,
        "bootstrap_resamples": bootstrap_b,
        "_plot_data": {"roc_curves": curves, "bland_altman_points": ba_points,
                       "scatter": list(zip(fpg_true, fpg_pred))},
    }


def run_protocol(data: FoldData, folds: FoldAssignment, config: ModelConfig,
                 hyper: Hyper, mrfo_cfg: MrfoConfig | None, seed: int,
                 bootstrap_b: int = 1000):
    """Full grouped k-fold protocol; returns (report, per-fold artifacts)."""
    oof = []
    artifacts = []
    for fold in range(folds.k):
        store, mask, history, preds = run_fold(data, folds, fold, config,
                                               hyper, mrfo_cfg, seed)
        oof.extend(preds)
        artifacts.append({"fold": fold, "store": store, "mask": mask,
                          "history": history})
    report = build_report(oof, folds.k, bootstrap_b, seed, config.variant)
    return report, artifacts, oof


def run_ablation(data: FoldData, folds: FoldAssignment, base_config: ModelConfig,
                 hyper: Hyper, mrfo_cfg: MrfoConfig | None, seed: int,
                 bootstrap_b: int = 200):
    """Train and evaluate the four variants under identical folds and seeds."""
    reports = {}
    digest = folds.digest()
    for variant in VARIANTS:
        config = replace(base_config, variant=variant)
        report, _, _ = run_protocol(data, folds, config, hyper, mrfo_cfg,
                                    seed, bootstrap_b)
        report["fold_digest_equal"] = folds.digest() == digest
        reports[variant] = report
    return reports


def write_history_csv(history: list, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss", "val_accuracy"])
        for row in history:
            writer.writerow([row["epoch"], repr(row["train_loss"]),
                             repr(row["val_loss"]), repr(row["val_accuracy"])])
