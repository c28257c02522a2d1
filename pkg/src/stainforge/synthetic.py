"""Synthetic paired H&E / mIF dataset with planted ground truth.

Each tile carries colored cell blobs inside a tissue region; three marker
channels are deterministic functions of blob color, contaminated by a
shared autofluorescence channel. Planted per-cell positivity labels are
returned so end-to-end runs can be scored against known truth.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np

from .panel import AFParams, HierarchyRule, PanelConfig, TileRecord, save_manifest
from .tileio import write_he_png, write_mask_png, write_mif_tiff

MARKERS = ["m1", "m2", "m3"]
AF_LAMBDA = 0.5

# cell types: per-marker positivity and H&E RGB color
CELL_TYPES = {
    "A": {"pos": {"m1"}, "color": (110, 60, 150)},
    "B": {"pos": {"m2"}, "color": (200, 95, 115)},
    "C": {"pos": {"m1", "m3"}, "color": (55, 60, 135)},
    "N": {"pos": set(), "color": (150, 138, 148)},
}
TYPE_PROBS = {"A": 0.35, "B": 0.3, "C": 0.2, "N": 0.15}


@dataclass
class SyntheticTile:
    he: np.ndarray                 # (H, W, 3) uint8
    mif: np.ndarray                # (C, H, W) uint16, markers then AF
    mask: np.ndarray               # (H, W) int labels
    cell_types: Dict[int, str]     # instance id -> type key
    planted: Dict[int, Dict[str, bool]] = field(default_factory=dict)


def make_panel() -> PanelConfig:
    return PanelConfig(
        markers=list(MARKERS),
        af_channel="AF",
        af={m: AFParams(AF_LAMBDA, 0.0) for m in MARKERS},
        hierarchy=[HierarchyRule(child="m3", parent="m1")],
    )


def generate_tile(rng: np.random.Generator, size: int = 64, n_cells: Tuple[int, int] = (8, 14)) -> SyntheticTile:
    h = w = size
    # tissue occupies everything below a white margin band
    margin = int(size * rng.uniform(0.12, 0.22))
    tissue = np.zeros((h, w), dtype=bool)
    tissue[margin:, :] = True

    he = np.empty((h, w, 3), dtype=np.float64)
    he[~tissue] = 245.0
    he[tissue] = np.array([170.0, 120.0, 150.0])
    he += rng.normal(0.0, 3.0, size=he.shape)

    mask = np.zeros((h, w), dtype=np.int64)
    yy, xx = np.mgrid[0:h, 0:w]
    cell_types: Dict[int, str] = {}
    planted: Dict[int, Dict[str, bool]] = {}
    type_names = list(TYPE_PROBS)
    probs = np.array([TYPE_PROBS[t] for t in type_names])

    n_target = rng.integers(n_cells[0], n_cells[1] + 1)
    inst = 0
    attempts = 0
    while inst < n_target and attempts < 200:
        attempts += 1
        r = rng.integers(3, 6)
        cy = rng.integers(margin + r + 1, h - r - 1)
        cx = rng.integers(r + 1, w - r - 1)
        disk = (yy - cy) ** 2 + (xx - cx) ** 2 <= r**2
        # keep a 2px moat so dilation cannot merge neighbours ambiguously
        moat = (yy - cy) ** 2 + (xx - cx) ** 2 <= (r + 2) ** 2
        if mask[moat].any():
            continue
        inst += 1
        mask[disk] = inst
        ctype = rng.choice(type_names, p=probs)
        cell_types[inst] = str(ctype)
        planted[inst] = {m: (m in CELL_TYPES[ctype]["pos"]) for m in MARKERS}
        he[disk] = np.array(CELL_TYPES[ctype]["color"], dtype=np.float64) + rng.normal(
            0.0, 4.0, size=(int(disk.sum()), 3)
        )

    he = np.clip(he, 0, 255).astype(np.uint8)

    af = np.where(tissue, 800.0, 100.0) + rng.normal(0.0, 20.0, size=(h, w))
    channels = []
    for m in MARKERS:
        signal = np.full((h, w), 40.0)
        for inst_id, labels in planted.items():
            if labels[m]:
                sel = mask == inst_id
                signal[sel] = 3000.0 + rng.normal(0.0, 120.0, size=int(sel.sum()))
        noisy = signal + rng.normal(0.0, 10.0, size=(h, w))
        channels.append(np.maximum(noisy + AF_LAMBDA * af, 0.0))
    channels.append(np.maximum(af, 0.0))
    mif = np.clip(np.stack(channels), 0, 65535).astype(np.uint16)

    return SyntheticTile(he=he, mif=mif, mask=mask, cell_types=cell_types, planted=planted)


def generate_dataset(
    out_dir: str,
    n_tiles: Dict[str, int],
    seed: int = 0,
    size: int = 64,
) -> Tuple[str, str, Dict[str, Dict[str, bool]]]:
    """Write tiles, masks, a manifest and a panel under ``out_dir``.

    Returns (manifest_path, panel_path, planted labels keyed by
    "<tile_id>:<cell_id>").
    """
    rng = np.random.default_rng(seed)
    tiles_dir = os.path.join(out_dir, "tiles")
    os.makedirs(tiles_dir, exist_ok=True)
    records: List[TileRecord] = []
    planted_all: Dict[str, Dict[str, bool]] = {}
    for split, count in n_tiles.items():
        for i in range(count):
            tile = generate_tile(rng, size=size)
            tile_id = f"{split}_{i:03d}"
            he_path = os.path.join(tiles_dir, f"{tile_id}_he.png")
            mif_path = os.path.join(tiles_dir, f"{tile_id}_mif.tiff")
            mask_path = os.path.join(tiles_dir, f"{tile_id}_mask.png")
            write_he_png(he_path, tile.he)
            write_mif_tiff(mif_path, tile.mif)
            write_mask_png(mask_path, tile.mask)
            records.append(
                TileRecord(
                    slide_id=f"slide_{split}",
                    tile_id=tile_id,
                    x=0,
                    y=i * size,
                    mpp=0.5,
                    he_path=he_path,
                    mif_path=mif_path,
                    split=split,
                    mask_path=mask_path,
                )
            )
            for cid, labels in tile.planted.items():
                planted_all[f"{tile_id}:{cid}"] = labels

    manifest_path = os.path.join(out_dir, "manifest.jsonl")
    panel_path = os.path.join(out_dir, "panel.json")
    save_manifest(records, manifest_path)
    make_panel().save(panel_path)
    return manifest_path, panel_path, planted_all
