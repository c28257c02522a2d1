"""Batch pipeline stages: preprocess, train, evaluate.

Stage artifacts are plain files under the configured output directory so
each stage is independently re-runnable. Every artifact embeds the config
hash and seed; with a fixed seed and single-threaded mode, re-running a
stage is byte-identical.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
import torch

from . import gating, imgproc, metrics, probe, tileio
from .imgproc import ChannelImage, InstanceMask, QCThresholds
from .model import (
    LoRAConfig,
    LossConfig,
    TrainConfig,
    Translator,
    ViTConfig,
    apply_lora,
    compute_sigma,
    init_weights,
    load_checkpoint,
    predict_tile,
    save_checkpoint,
    scale_targets,
)
from .model.training import load_state_from_numpy, state_to_numpy, train
from .panel import PanelConfig, load_manifest


class UserError(Exception):
    """Configuration or input error; maps to exit code 2."""


DEFAULT_CONFIG: dict = {
    "manifest": "",
    "panel": "",
    "out_dir": "",
    "seed": 0,
    "preprocess": {
        "qc": {
            "enabled": True,
            "density_pearson": 0.25,
            "tissue_iou": 0.5,
            "tissue_fraction": 0.40,
            "empty_intensity": 200.0,
            "empty_fraction": 0.01,
        },
        "dilate_um": 2.0,
        "posterior_cutoff": 0.5,
        "gating_intensity": "corrected",
        "density_grid": 32,
    },
    "train": {
        "epochs": 10,
        "batch_size": 16,
        "lr": 2e-4,
        "warmup_iters": 400,
        "weight_decay": 1e-5,
        "grad_clip_norm": 1.0,
        "dropout": 0.1,
        "augment": True,
        "val_every": 50,
        "lam": 1.0,
        "resume": "",
        "vit": {"patch_size": 8, "depth": 4, "width": 128, "heads": 4, "mlp_ratio": 4.0},
        "lora": {"enabled": False, "rank": 8, "alpha": 1.0},
    },
    "evaluate": {
        "checkpoint": "",
        "bootstrap": {"n_samples": 1000, "seed": 0},
        "probe": {"protocol": "auto", "reg_strength": 1.0, "train_fraction": 0.2, "seed": 0},
        "random_baseline_runs": 100,
        "baselines": True,
        "plots": True,
    },
    "serve": {"port": 8000, "host": "127.0.0.1"},
}


def _deep_merge(base: dict, override: dict) -> dict:
    # always copy nested dicts so callers never share state with the defaults
    out = {k: (_deep_merge(v, {}) if isinstance(v, dict) else v) for k, v in base.items()}
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path: str, env: Optional[dict] = None) -> dict:
    """Load a TOML or JSON run config, apply STAINFORGE_ env overrides."""
    if not os.path.exists(path):
        raise UserError(f"config file not found: {path}")
    if path.endswith(".toml"):
        try:
            import tomllib
        except ModuleNotFoundError:
            import tomli as tomllib

        with open(path, "rb") as f:
            raw = tomllib.load(f)
    else:
        with open(path) as f:
            raw = json.load(f)
    cfg = _deep_merge(DEFAULT_CONFIG, raw)

    env = dict(env if env is not None else os.environ)
    for key, value in env.items():
        if not key.startswith("STAINFORGE_"):
            continue
        path_parts = key[len("STAINFORGE_") :].lower().split("__")
        node = cfg
        for part in path_parts[:-1]:
            node = node.setdefault(part, {})
        leaf = path_parts[-1]
        try:
            node[leaf] = json.loads(value)
        except json.JSONDecodeError:
            node[leaf] = value
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def substream_seed(root_seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{root_seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def _require_file(path: str, what: str):
    if not path or not os.path.exists(path):
        raise UserError(f"{what} not found: {path!r}")


SPLITS = ("train", "val", "test")


# ---------------------------------------------------------------------------
# preprocess


def _mif_tissue_mask(af_pixels: np.ndarray) -> np.ndarray:
    """Bright-side Otsu on the AF channel: autofluorescence marks tissue."""
    lo, hi = float(af_pixels.min()), float(af_pixels.max())
    if hi <= lo:
        return np.ones(af_pixels.shape, dtype=bool)
    scaled = np.clip((af_pixels - lo) / (hi - lo) * 255.0, 0, 255).astype(np.int64)
    hist = np.bincount(scaled.ravel(), minlength=256)[:256]
    t = imgproc.otsu_threshold(hist)
    return scaled >= t


def run_preprocess(cfg: dict) -> dict:
    pcfg = cfg["preprocess"]
    _require_file(cfg["manifest"], "manifest")
    _require_file(cfg["panel"], "panel config")
    records = load_manifest(cfg["manifest"])
    panel = PanelConfig.load(cfg["panel"])
    out_dir = os.path.join(cfg["out_dir"], "preprocess")
    os.makedirs(out_dir, exist_ok=True)

    thresholds = QCThresholds(
        density_pearson=pcfg["qc"]["density_pearson"],
        tissue_iou=pcfg["qc"]["tissue_iou"],
        tissue_fraction=pcfg["qc"]["tissue_fraction"],
    )
    grid = pcfg["density_grid"]
    n_channels = len(panel.channel_names)

    kept: Dict[str, list] = {s: [] for s in SPLITS}
    dropped: List[dict] = []
    qc_rows: List[dict] = []
    train_fg: Dict[str, List[np.ndarray]] = {m: [] for m in panel.markers}

    for rec in records:
        for p, what in ((rec.he_path, "H&E tile"), (rec.mif_path, "mIF tile"), (rec.mask_path, "instance mask")):
            _require_file(p, f"{what} for {rec.tile_id}")
        he = tileio.read_he_png(rec.he_path)
        mif = tileio.read_mif_tiff(rec.mif_path).astype(np.float64)
        if mif.shape[0] != n_channels:
            raise UserError(
                f"tile {rec.tile_id}: mIF has {mif.shape[0]} channels, panel defines {n_channels}"
            )
        mask = InstanceMask(tileio.read_mask_png(rec.mask_path), mpp=rec.mpp)

        tissue_he, _ = imgproc.tissue_mask(he)
        if panel.af_channel:
            af_pixels = mif[len(panel.markers)]
            tissue_mif = _mif_tissue_mask(af_pixels)
        else:
            af_pixels = None
            tissue_mif = np.ones(mif.shape[1:], dtype=bool)

        he_mask = (
            InstanceMask(tileio.read_mask_png(rec.he_mask_path), mpp=rec.mpp)
            if rec.he_mask_path
            else mask
        )
        he_density = imgproc.nuclei_density_map(he_mask, grid=grid)
        mif_density = imgproc.nuclei_density_map(mask, grid=grid)

        empty_pass = True
        if panel.empty_channel and panel.empty_channel in panel.channel_names:
            idx = panel.channel_names.index(panel.empty_channel)
            empty_pass = imgproc.empty_channel_qc(
                ChannelImage(mif[idx], mpp=rec.mpp),
                pcfg["qc"]["empty_intensity"],
                pcfg["qc"]["empty_fraction"],
            )

        report = imgproc.consecutive_alignment_qc(
            he_density, mif_density, tissue_he, tissue_mif, thresholds, empty_pass
        )
        accepted = report.accepted or not pcfg["qc"]["enabled"]
        qc_rows.append(
            {
                "tile_id": rec.tile_id,
                "tissue_fraction": report.tissue_fraction,
                "density_pearson": None if math.isnan(report.density_pearson) else report.density_pearson,
                "tissue_iou": report.tissue_iou,
                "empty_channel_pass": report.empty_channel_pass,
                "accepted": accepted,
                "reasons": report.reasons,
            }
        )
        if not accepted:
            dropped.append({"tile_id": rec.tile_id, "reasons": report.reasons})
            continue

        corrected = []
        for i, m in enumerate(panel.markers):
            ch = ChannelImage(mif[i], mpp=rec.mpp)
            if af_pixels is not None:
                ch = imgproc.af_subtract(ch, ChannelImage(af_pixels, mpp=rec.mpp), panel.af_params(m))
            corrected.append(ch.pixels)
        corrected = np.stack(corrected)

        if rec.split == "train":
            for i, m in enumerate(panel.markers):
                fg = corrected[i][corrected[i] > 0]
                train_fg[m].append(fg)

        if rec.split not in kept:
            raise UserError(f"tile {rec.tile_id}: unknown split {rec.split!r}")
        kept[rec.split].append(
            {"record": rec, "he": he, "corrected": corrected, "mask": mask}
        )

    if not kept["train"]:
        raise UserError("no accepted training tiles; cannot fit channel statistics")
    q999 = imgproc.fit_channel_stats({m: np.concatenate(v) for m, v in train_fg.items()})
    panel_fitted = PanelConfig.from_dict({**panel.to_dict(), "q999": q999})
    panel_fitted.save(os.path.join(out_dir, "panel_fitted.json"))

    dilate_um = pcfg["dilate_um"]
    cell_frames = []
    for split in SPLITS:
        if not kept[split]:
            continue
        hes, mifs, masks_d, masks_raw, tiles_meta = [], [], [], [], []
        for item in kept[split]:
            rec, he, corrected, mask = item["record"], item["he"], item["corrected"], item["mask"]
            normalized = np.stack(
                [
                    imgproc.normalize_channel(
                        ChannelImage(corrected[i], mpp=rec.mpp), q999[m], log_base=panel.log_base
                    ).pixels
                    for i, m in enumerate(panel.markers)
                ]
            )
            dilated = imgproc.dilate_nuclei(mask, dilate_um)
            space = pcfg["gating_intensity"]
            if space == "corrected":
                expr_stack = corrected
            elif space == "normalized":
                expr_stack = normalized
            else:
                raise UserError(f"unknown gating_intensity {space!r}")
            channels = {
                m: ChannelImage(expr_stack[i], mpp=rec.mpp) for i, m in enumerate(panel.markers)
            }
            table = gating.extract_cell_expression(channels, dilated, tile_id=rec.tile_id)
            table.insert(1, "slide_id", rec.slide_id)
            table.insert(2, "split", split)
            cell_frames.append(table)

            hes.append(he.transpose(2, 0, 1).astype(np.uint8))
            mifs.append(normalized.astype(np.float32))
            masks_d.append(dilated.labels.astype(np.int32))
            masks_raw.append(mask.labels.astype(np.int32))
            tiles_meta.append({"tile_id": rec.tile_id, "slide_id": rec.slide_id, "mpp": rec.mpp})

        np.save(os.path.join(out_dir, f"he_{split}.npy"), np.stack(hes))
        np.save(os.path.join(out_dir, f"mif_{split}.npy"), np.stack(mifs))
        np.save(os.path.join(out_dir, f"mask_{split}.npy"), np.stack(masks_d))
        np.save(os.path.join(out_dir, f"maskraw_{split}.npy"), np.stack(masks_raw))
        with open(os.path.join(out_dir, f"tiles_{split}.json"), "w") as f:
            json.dump(tiles_meta, f, indent=2, sort_keys=True)

    cells = pd.concat(cell_frames, ignore_index=True)

    gmm_seed = substream_seed(cfg["seed"], "gating")
    fit_mask = cells["split"].isin(["train", "val"])
    gmm_params = {}
    for m in panel.markers:
        values = cells.loc[fit_mask, f"expr_{m}"].to_numpy()
        fit = gating.fit_gmm_1d(values)
        gmm_params[m] = {
            "means": fit.means.tolist(),
            "variances": fit.variances.tolist(),
            "weights": fit.weights.tolist(),
            "positive_component": fit.positive_component,
            "loglik": fit.loglik,
            "n_iter": fit.n_iter,
        }
        cells = gating.gate_marker(cells, m, fit, pcfg["posterior_cutoff"])
    cells = gating.apply_hierarchy(cells, panel.hierarchy)

    cells.to_csv(os.path.join(out_dir, "cells.csv"), index=False)
    with open(os.path.join(out_dir, "cells.jsonl"), "w") as f:
        for row in cells.to_dict(orient="records"):
            f.write(json.dumps(row, sort_keys=True, default=bool) + "\n")
    with open(os.path.join(out_dir, "qc.jsonl"), "w") as f:
        for row in qc_rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")

    summary = {
        "config_hash": config_hash(cfg),
        "seed": cfg["seed"],
        "gmm_seed": gmm_seed,
        "n_tiles_input": len(records),
        "n_tiles_kept": {s: len(kept[s]) for s in SPLITS},
        "dropped": dropped,
        "q999": q999,
        "gmm": gmm_params,
        "n_cells": int(len(cells)),
    }
    with open(os.path.join(out_dir, "summary.json"), "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    return summary


# ---------------------------------------------------------------------------
# train


def _build_model(n_markers: int, tcfg: dict) -> Translator:
    vit = ViTConfig(**tcfg["vit"])
    vit.dropout = tcfg.get("dropout", 0.0)
    model = Translator(n_markers, vit)
    return model


def _optimizer_tensors(opt: torch.optim.Optimizer) -> Dict[str, np.ndarray]:
    out = {}
    for idx, state in opt.state_dict()["state"].items():
        for key, value in state.items():
            if isinstance(value, torch.Tensor):
                out[f"opt/{idx}/{key}"] = value.detach().cpu().numpy().astype(np.float64)
            else:
                out[f"opt/{idx}/{key}"] = np.asarray([float(value)], dtype=np.float64)
    return out


def _optimizer_state_from_tensors(tensors: Dict[str, np.ndarray], param_groups: list) -> dict:
    state: Dict[int, dict] = {}
    for name, arr in tensors.items():
        _, idx, key = name.split("/", 2)
        entry = state.setdefault(int(idx), {})
        if key == "step":
            entry[key] = torch.tensor(float(arr.ravel()[0]))
        else:
            entry[key] = torch.from_numpy(np.asarray(arr, dtype=np.float32))
    return {"state": state, "param_groups": param_groups}


def _predictions_for(model: Translator, he: np.ndarray) -> np.ndarray:
    return np.stack([predict_tile(model, tile) for tile in he])


def _macro_pearson(pred: np.ndarray, target: np.ndarray) -> dict:
    per_channel = []
    for c in range(pred.shape[1]):
        acc = metrics.PearsonAccumulator()
        acc.update(pred[:, c], target[:, c])
        per_channel.append(acc.result())
    finite = [v for v in per_channel if not math.isnan(v)]
    return {
        "pearson_per_channel": per_channel,
        "pearson_macro": float(np.mean(finite)) if finite else float("nan"),
    }


def run_train(cfg: dict) -> dict:
    tcfg = cfg["train"]
    pre_dir = os.path.join(cfg["out_dir"], "preprocess")
    _require_file(os.path.join(pre_dir, "he_train.npy"), "preprocessed training data")
    panel = PanelConfig.load(os.path.join(pre_dir, "panel_fitted.json"))
    out_dir = os.path.join(cfg["out_dir"], "train")
    os.makedirs(out_dir, exist_ok=True)
    torch.set_num_threads(1)

    he = np.load(os.path.join(pre_dir, "he_train.npy"))
    mif = np.load(os.path.join(pre_dir, "mif_train.npy"))
    sigma = compute_sigma(scale_targets(mif))
    loss_config = LossConfig(sigma=sigma, lam=tcfg["lam"])

    seed = substream_seed(cfg["seed"], "train")
    train_config = TrainConfig(
        lr=tcfg["lr"],
        warmup_iters=tcfg["warmup_iters"],
        weight_decay=tcfg["weight_decay"],
        grad_clip_norm=tcfg["grad_clip_norm"],
        dropout=tcfg["dropout"],
        batch_size=tcfg["batch_size"],
        seed=seed,
        epochs=tcfg["epochs"],
        augment=tcfg["augment"],
        val_every=tcfg["val_every"],
    )

    model = _build_model(panel.n_markers, tcfg)
    init_weights(model, seed=substream_seed(cfg["seed"], "init"))
    if tcfg["lora"]["enabled"]:
        apply_lora(
            model,
            LoRAConfig(rank=tcfg["lora"]["rank"], alpha=tcfg["lora"]["alpha"]),
            seed=substream_seed(cfg["seed"], "lora"),
        )

    start_epoch = 0
    optimizer_state = None
    if tcfg["resume"]:
        _require_file(tcfg["resume"], "resume checkpoint")
        tensors, meta = load_checkpoint(tcfg["resume"])
        model_tensors = {k: v for k, v in tensors.items() if not k.startswith("opt/")}
        load_state_from_numpy(model, model_tensors)
        opt_tensors = {k: v for k, v in tensors.items() if k.startswith("opt/")}
        if opt_tensors:
            optimizer_state = _optimizer_state_from_tensors(opt_tensors, meta["param_groups"])
        start_epoch = int(meta.get("epochs_completed", 0))

    val_fn = None
    best = {"pearson": -np.inf, "state": None}
    val_path = os.path.join(pre_dir, "he_val.npy")
    if os.path.exists(val_path):
        he_val = np.load(val_path)
        mif_val = np.load(os.path.join(pre_dir, "mif_val.npy"))

        def val_fn(m, step):
            scores = _macro_pearson(_predictions_for(m, he_val), mif_val)
            if scores["pearson_macro"] > best["pearson"]:
                best["pearson"] = scores["pearson_macro"]
                best["state"] = state_to_numpy(m)
            return scores

    result = train(
        model, he, mif, train_config, loss_config,
        val=val_fn, start_epoch=start_epoch, optimizer_state=optimizer_state,
    )

    meta = {
        "config_hash": config_hash(cfg),
        "seed": cfg["seed"],
        "panel_hash": hashlib.sha256(
            json.dumps(panel.to_dict(), sort_keys=True).encode()
        ).hexdigest()[:16],
        "n_markers": panel.n_markers,
        "vit": tcfg["vit"],
        "dropout": tcfg["dropout"],
        "lora": tcfg["lora"],
        "lam": tcfg["lam"],
        "sigma": [float(s) for s in sigma],
        "epochs_completed": tcfg["epochs"],
        "total_steps": result.total_steps,
        "param_groups": result.optimizer.state_dict()["param_groups"] if result.optimizer else [],
    }
    tensors = state_to_numpy(model)
    if result.optimizer is not None:
        tensors.update(_optimizer_tensors(result.optimizer))
    final_path = os.path.join(out_dir, "checkpoint_final.bin")
    save_checkpoint(final_path, tensors, meta)

    # best = highest validation macro Pearson seen, else the final weights
    best_path = os.path.join(out_dir, "checkpoint_best.bin")
    best_tensors = best["state"] if best["state"] is not None else state_to_numpy(model)
    save_checkpoint(best_path, best_tensors, meta)

    with open(os.path.join(out_dir, "loss_curve.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "lr", "loss"] + [f"mse_{m}" for m in panel.markers])
        for row in result.loss_curve:
            writer.writerow(
                [row["step"], repr(row["lr"]), repr(row["loss"])]
                + [repr(v) for v in row["per_marker_mse"]]
            )
    train_summary = {
        "config_hash": config_hash(cfg),
        "seed": cfg["seed"],
        "total_steps": result.total_steps,
        "final_loss": result.loss_curve[-1]["loss"] if result.loss_curve else None,
        "val_curve": result.val_curve,
        "checkpoint_final": final_path,
        "checkpoint_best": best_path,
    }
    with open(os.path.join(out_dir, "summary.json"), "w") as f:
        json.dump(train_summary, f, indent=2, sort_keys=True)
    return train_summary


def load_model_from_checkpoint(path: str) -> Translator:
    tensors, meta = load_checkpoint(path)
    tcfg = {"vit": meta["vit"], "dropout": meta.get("dropout", 0.0), "lora": meta["lora"]}
    model = _build_model(meta["n_markers"], tcfg)
    if meta["lora"]["enabled"]:
        apply_lora(model, LoRAConfig(rank=meta["lora"]["rank"], alpha=meta["lora"]["alpha"]))
    load_state_from_numpy(model, {k: v for k, v in tensors.items() if not k.startswith("opt/")})
    model.eval()
    return model


# ---------------------------------------------------------------------------
# evaluate


def _extract_pred_expression(
    pred: np.ndarray, masks: np.ndarray, tiles_meta: List[dict], markers: List[str]
) -> pd.DataFrame:
    frames = []
    for i, meta in enumerate(tiles_meta):
        channels = {
            m: ChannelImage(pred[i, c], mpp=meta["mpp"]) for c, m in enumerate(markers)
        }
        table = gating.extract_cell_expression(
            channels, InstanceMask(masks[i], mpp=meta["mpp"]), tile_id=meta["tile_id"]
        )
        frames.append(table)
    out = pd.concat(frames, ignore_index=True)
    return out.rename(columns={f"expr_{m}": f"pred_expr_{m}" for m in markers})


def _load_split(pre_dir: str, split: str):
    he = np.load(os.path.join(pre_dir, f"he_{split}.npy"))
    mif = np.load(os.path.join(pre_dir, f"mif_{split}.npy"))
    mask = np.load(os.path.join(pre_dir, f"mask_{split}.npy"))
    maskraw = np.load(os.path.join(pre_dir, f"maskraw_{split}.npy"))
    with open(os.path.join(pre_dir, f"tiles_{split}.json")) as f:
        tiles = json.load(f)
    return he, mif, mask, maskraw, tiles


def _probe_metrics_for_features(
    cells_fit: pd.DataFrame,
    cells_eval: pd.DataFrame,
    feature_cols: List[str],
    marker: str,
    reg_strength: float,
):
    """Fit one probe and return (scores, labels, flags) on the eval cells."""
    labels_fit = cells_fit[f"label_{marker}"].to_numpy(dtype=bool)
    labels_eval = cells_eval[f"label_{marker}"].to_numpy(dtype=bool)
    if labels_fit.sum() == 0 or (~labels_fit).sum() == 0:
        return None, labels_eval, "single_class_fit_split"
    x_fit = cells_fit[feature_cols].to_numpy(dtype=np.float64)
    x_eval = cells_eval[feature_cols].to_numpy(dtype=np.float64)
    model = probe.train_probe(x_fit, labels_fit, reg_strength=reg_strength)
    return model.predict_proba(x_eval), labels_eval, None


def _marker_cell_metrics(
    scores: Optional[np.ndarray],
    labels: np.ndarray,
    tile_ids: np.ndarray,
    test_tile_order: List[str],
    bootstrap_cfg: metrics.BootstrapConfig,
    runs: int,
    baseline_seed: int,
) -> dict:
    if scores is None:
        return {
            "auprc": None, "f1": None, "skipped": True,
            "auprc_ci": [None, None], "f1_ci": [None, None],
            "random_f1": None, "prevalence": None,
        }
    pred_labels = scores > 0.5
    auprc_val = metrics.auprc(scores, labels)
    f1_val = metrics.f1_binary(pred_labels, labels)
    prevalence = float(np.mean(labels))

    cells_by_tile = {t: np.flatnonzero(tile_ids == t) for t in test_tile_order}

    def closure(metric_fn):
        def run(idx_list):
            sel = np.concatenate(
                [cells_by_tile[test_tile_order[i]] for i in idx_list]
            ) if idx_list else np.array([], dtype=int)
            if sel.size == 0:
                return float("nan")
            return metric_fn(sel)
        return run

    auprc_ci = metrics.bootstrap_ci(
        closure(lambda sel: metrics.auprc(scores[sel], labels[sel])),
        len(test_tile_order), bootstrap_cfg,
    )
    f1_ci = metrics.bootstrap_ci(
        closure(lambda sel: metrics.f1_binary(pred_labels[sel], labels[sel])),
        len(test_tile_order), bootstrap_cfg,
    )
    random_f1 = metrics.random_baseline_f1(labels, prevalence, runs=runs, seed=baseline_seed)
    return {
        "auprc": None if math.isnan(auprc_val) else auprc_val,
        "f1": f1_val,
        "skipped": False,
        "auprc_ci": [auprc_ci.low, auprc_ci.high],
        "f1_ci": [f1_ci.low, f1_ci.high],
        "bootstrap_skipped": {"auprc": auprc_ci.n_skipped, "f1": f1_ci.n_skipped},
        "random_f1": random_f1,
        "prevalence": prevalence,
    }


def run_evaluate(cfg: dict) -> dict:
    ecfg = cfg["evaluate"]
    pre_dir = os.path.join(cfg["out_dir"], "preprocess")
    ckpt = ecfg["checkpoint"] or os.path.join(cfg["out_dir"], "train", "checkpoint_final.bin")
    _require_file(ckpt, "checkpoint")
    _require_file(os.path.join(pre_dir, "cells.csv"), "cell table")
    _require_file(os.path.join(pre_dir, "he_test.npy"), "preprocessed test data")
    out_dir = os.path.join(cfg["out_dir"], "evaluate")
    os.makedirs(out_dir, exist_ok=True)
    torch.set_num_threads(1)

    panel = PanelConfig.load(os.path.join(pre_dir, "panel_fitted.json"))
    markers = panel.markers
    model = load_model_from_checkpoint(ckpt)
    cells = pd.read_csv(os.path.join(pre_dir, "cells.csv"))
    for m in markers:
        cells[f"label_{m}"] = cells[f"label_{m}"].astype(bool)

    he_test, mif_test, mask_test, maskraw_test, tiles_test = _load_split(pre_dir, "test")
    pred_test = _predictions_for(model, he_test)

    # pixel metrics per channel over the test tiles
    pixel = {}
    for c, m in enumerate(markers):
        psnrs = [metrics.psnr(pred_test[i, c], mif_test[i, c]) for i in range(len(tiles_test))]
        ssims = [metrics.ssim(pred_test[i, c], mif_test[i, c]) for i in range(len(tiles_test))]
        acc = metrics.PearsonAccumulator()
        acc.update(pred_test[:, c], mif_test[:, c])
        r = acc.result()
        pixel[m] = {
            "psnr": float(np.mean(psnrs)),
            "ssim": float(np.mean(ssims)),
            "pearson": None if math.isnan(r) else r,
        }

    pred_expr_test = _extract_pred_expression(pred_test, mask_test, tiles_test, markers)
    cells_test = cells[cells["split"] == "test"].merge(
        pred_expr_test, on=["tile_id", "cell_id"], suffixes=("", "_pred")
    )

    protocol = ecfg["probe"]["protocol"]
    has_val = os.path.exists(os.path.join(pre_dir, "he_val.npy")) and (cells["split"] == "val").any()
    if protocol == "auto":
        protocol = "indomain" if has_val else "external"
    if protocol == "indomain" and not has_val:
        raise UserError("in-domain probe protocol requires a validation split")

    pred_cols = [f"pred_expr_{m}" for m in markers]
    real_cols = [f"expr_{m}" for m in markers]
    morph_cols = [f"morph_{name}" for name in probe.MORPHOMETRY_FEATURE_NAMES]

    def attach_morphometry(frame: pd.DataFrame, he, maskraw, tiles_meta):
        feats = {}
        for i, meta in enumerate(tiles_meta):
            per_cell = probe.morphometry_features(
                InstanceMask(maskraw[i], mpp=meta["mpp"]), he[i].transpose(1, 2, 0)
            )
            for cid, vec in per_cell.items():
                feats[(meta["tile_id"], cid)] = vec
        mat = np.stack(
            [
                feats.get((t, c), np.zeros(len(morph_cols)))
                for t, c in zip(frame["tile_id"], frame["cell_id"])
            ]
        )
        for j, col in enumerate(morph_cols):
            frame[col] = mat[:, j]
        return frame

    if protocol == "indomain":
        he_val, mif_val, mask_val, maskraw_val, tiles_val = _load_split(pre_dir, "val")
        pred_val = _predictions_for(model, he_val)
        pred_expr_val = _extract_pred_expression(pred_val, mask_val, tiles_val, markers)
        cells_fit = cells[cells["split"] == "val"].merge(
            pred_expr_val, on=["tile_id", "cell_id"], suffixes=("", "_pred")
        )
        cells_fit = attach_morphometry(cells_fit, he_val, maskraw_val, tiles_val)
        cells_eval = attach_morphometry(cells_test.copy(), he_test, maskraw_test, tiles_test)
    else:
        cells_all = attach_morphometry(cells_test.copy(), he_test, maskraw_test, tiles_test)
        fit_sel, eval_sel = probe.split_cells_external(
            len(cells_all), ecfg["probe"]["train_fraction"],
            seed=substream_seed(cfg["seed"], "probe_split"),
        )
        cells_fit = cells_all[fit_sel].reset_index(drop=True)
        cells_eval = cells_all[eval_sel].reset_index(drop=True)

    bootstrap_cfg = metrics.BootstrapConfig(
        n_samples=ecfg["bootstrap"]["n_samples"], seed=ecfg["bootstrap"]["seed"]
    )
    test_tile_order = [t["tile_id"] for t in tiles_test]
    eval_tile_ids = cells_eval["tile_id"].to_numpy()
    runs = ecfg["random_baseline_runs"]
    reg = ecfg["probe"]["reg_strength"]
    baseline_seed = substream_seed(cfg["seed"], "random_baseline")

    def suite(feature_cols):
        out = {}
        count_corr = {}
        for m in markers:
            scores, labels, flag = _probe_metrics_for_features(
                cells_fit, cells_eval, feature_cols, m, reg
            )
            out[m] = _marker_cell_metrics(
                scores, labels, eval_tile_ids, test_tile_order,
                bootstrap_cfg, runs, baseline_seed,
            )
            if flag:
                out[m]["flag"] = flag
            if scores is not None:
                pred_counts, ref_counts = [], []
                for t in test_tile_order:
                    sel = eval_tile_ids == t
                    pred_counts.append(float((scores[sel] > 0.5).sum()))
                    ref_counts.append(float(labels[sel].sum()))
                try:
                    r, slope, intercept = metrics.cellcount_correlation(pred_counts, ref_counts)
                except metrics.MetricError:
                    r, slope, intercept = float("nan"), float("nan"), float("nan")
                count_corr[m] = {
                    "pearson": None if math.isnan(r) else r,
                    "slope": None if math.isnan(slope) else slope,
                    "intercept": None if math.isnan(intercept) else intercept,
                    "pred_counts": pred_counts,
                    "ref_counts": ref_counts,
                }
        return out, count_corr

    cell_metrics, count_corr = suite(pred_cols)
    baselines = {}
    if ecfg["baselines"]:
        upper, _ = suite(real_cols)
        morph, _ = suite(morph_cols)
        baselines = {"upper_bound": upper, "morphometry": morph}

    def macro(values):
        vals = [v for v in values if v is not None and not (isinstance(v, float) and math.isnan(v))]
        return float(np.mean(vals)) if vals else None

    report = {
        "config_hash": config_hash(cfg),
        "seed": cfg["seed"],
        "checkpoint": ckpt,
        "probe_protocol": protocol,
        "probe": {
            "reg_strength": reg,
            "standardized": True,
            "refit_per_resample": False,
            "train_fraction": ecfg["probe"]["train_fraction"],
        },
        "markers": markers,
        "pixel": pixel,
        "cell": cell_metrics,
        "baselines": baselines,
        "count_correlation": count_corr,
        "macro": {
            "psnr": macro([pixel[m]["psnr"] for m in markers]),
            "ssim": macro([pixel[m]["ssim"] for m in markers]),
            "pearson": macro([pixel[m]["pearson"] for m in markers]),
            "auprc": macro([cell_metrics[m]["auprc"] for m in markers]),
            "f1": macro([cell_metrics[m]["f1"] for m in markers]),
        },
    }
    if ecfg["baselines"]:
        report["macro"]["upper_bound_auprc"] = macro(
            [baselines["upper_bound"][m]["auprc"] for m in markers]
        )

    validate_report(report)
    with open(os.path.join(out_dir, "report.json"), "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)

    with open(os.path.join(out_dir, "report.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["marker", "psnr", "ssim", "pearson", "auprc", "auprc_lo", "auprc_hi",
             "f1", "f1_lo", "f1_hi", "random_f1", "prevalence"]
        )
        for m in markers:
            cm = cell_metrics[m]
            writer.writerow(
                [m, pixel[m]["psnr"], pixel[m]["ssim"], pixel[m]["pearson"],
                 cm["auprc"], cm["auprc_ci"][0], cm["auprc_ci"][1],
                 cm["f1"], cm["f1_ci"][0], cm["f1_ci"][1],
                 cm["random_f1"], cm["prevalence"]]
            )

    if ecfg["plots"]:
        _write_plots(out_dir, markers, cell_metrics, count_corr)
    return report


def validate_report(report: dict):
    import jsonschema

    schema_path = os.path.join(os.path.dirname(__file__), "schemas", "report.schema.json")
    with open(schema_path) as f:
        schema = json.load(f)
    jsonschema.validate(report, schema)


def _write_plots(out_dir: str, markers, cell_metrics, count_corr):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plots_dir = os.path.join(out_dir, "plots")
    os.makedirs(plots_dir, exist_ok=True)

    for metric_name in ("auprc", "f1"):
        fig, ax = plt.subplots(figsize=(6, 3.5))
        xs = np.arange(len(markers))
        vals = [cell_metrics[m][metric_name] or 0.0 for m in markers]
        los = [cell_metrics[m][f"{metric_name}_ci"][0] or 0.0 for m in markers]
        his = [cell_metrics[m][f"{metric_name}_ci"][1] or 0.0 for m in markers]
        err = np.array([
            [max(0.0, v - lo) for v, lo in zip(vals, los)],
            [max(0.0, hi - v) for v, hi in zip(vals, his)],
        ])
        ax.bar(xs, vals, yerr=err, capsize=3)
        ax.set_xticks(xs)
        ax.set_xticklabels(markers, rotation=45, ha="right")
        ax.set_ylabel(metric_name.upper())
        ax.set_ylim(0, 1.05)
        fig.tight_layout()
        fig.savefig(
            os.path.join(plots_dir, f"cell_{metric_name}.svg"), metadata={"Date": None}
        )
        plt.close(fig)

    for m, cc in count_corr.items():
        fig, ax = plt.subplots(figsize=(3.5, 3.5))
        ax.scatter(cc["ref_counts"], cc["pred_counts"], s=14)
        if cc["slope"] is not None:
            xs = np.array([min(cc["ref_counts"]), max(cc["ref_counts"])])
            ax.plot(xs, cc["slope"] * xs + cc["intercept"], "r-", lw=1)
        ax.set_xlabel("reference count")
        ax.set_ylabel("predicted count")
        title = f"{m}: r={cc['pearson']:.2f}" if cc["pearson"] is not None else m
        ax.set_title(title)
        fig.tight_layout()
        fig.savefig(
            os.path.join(plots_dir, f"counts_{m}.svg"), metadata={"Date": None}
        )
        plt.close(fig)
