"""Local HTTP service for interactive AF-parameter tuning.

Serves channel previews with candidate (lambda, b) applied on the fly and
persists accepted parameters into the panel config. The AF math is the
library's af_subtract; only the display windowing (preview contrast
stretch) is layered on top, and it is never persisted.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import threading
import time
from typing import Optional

import numpy as np
from fastapi import FastAPI, Query
from fastapi.responses import JSONResponse, Response
from PIL import Image

from .imgproc import ChannelImage, af_subtract
from .panel import AFParams, PanelConfig, load_manifest
from .tileio import read_he_png, read_mif_tiff


def display_window(
    pixels: np.ndarray, low_pct: float = 1.0, high_pct: float = 99.0, gamma: float = 1.0
) -> np.ndarray:
    """Percentile contrast stretch to uint8 for preview rendering only."""
    lo, hi = np.percentile(pixels, [low_pct, high_pct])
    if hi <= lo:
        hi = lo + 1.0
    stretched = np.clip((pixels - lo) / (hi - lo), 0.0, 1.0)
    if gamma != 1.0:
        stretched = np.power(stretched, 1.0 / gamma)
    return (stretched * 255.0 + 0.5).astype(np.uint8)


def _png_bytes(arr: np.ndarray, mode: str = "L") -> bytes:
    buf = io.BytesIO()
    Image.fromarray(arr, mode=mode).save(buf, format="PNG")
    return buf.getvalue()


class TileStore:
    """Immutable tile access plus a guarded, audited panel file."""

    def __init__(self, manifest_path: str, panel_path: str):
        self.records = {r.tile_id: r for r in load_manifest(manifest_path)}
        self.panel_path = panel_path
        self.audit_path = panel_path + ".audit.log"
        self.write_lock = threading.Lock()
        self._file_hash = self._hash_file()
        self.panel = PanelConfig.load(panel_path)
        self._cache = {}

    def _hash_file(self) -> str:
        with open(self.panel_path, "rb") as f:
            return hashlib.sha256(f.read()).hexdigest()

    def mif_channel(self, tile_id: str, channel: str) -> Optional[np.ndarray]:
        rec = self.records.get(tile_id)
        if rec is None or channel not in self.panel.channel_names:
            return None
        if tile_id not in self._cache:
            self._cache[tile_id] = read_mif_tiff(rec.mif_path).astype(np.float64)
        return self._cache[tile_id][self.panel.channel_names.index(channel)]

    def af_pixels(self, tile_id: str) -> Optional[np.ndarray]:
        if not self.panel.af_channel:
            return None
        return self.mif_channel(tile_id, self.panel.af_channel)

    def save_params(self, channel: str, lam: float, b: float) -> int:
        """Atomic persist with audit trail. Returns an HTTP-style status:
        200 on success, 409 if the file changed under us."""
        with self.write_lock:
            if self._hash_file() != self._file_hash:
                # someone else rewrote the panel since our last load
                self.panel = PanelConfig.load(self.panel_path)
                self._file_hash = self._hash_file()
                return 409
            old = self.panel.af_params(channel)
            self.panel.af[channel] = AFParams(lam, b)
            self.panel.save(self.panel_path)
            self._file_hash = self._hash_file()
            with open(self.audit_path, "a") as f:
                f.write(
                    json.dumps(
                        {
                            "ts": time.time(),
                            "channel": channel,
                            "old": {"lambda": old.lam, "b": old.b},
                            "new": {"lambda": lam, "b": b},
                        },
                        sort_keys=True,
                    )
                    + "\n"
                )
            return 200


def create_app(cfg: dict, static_dir: Optional[str] = None) -> FastAPI:
    app = FastAPI(title="stainforge AF tuner")
    app.state.store = None
    try:
        app.state.store = TileStore(cfg["manifest"], cfg["panel"])
    except (FileNotFoundError, OSError):
        pass  # store stays unloaded; API answers 503

    def store() -> Optional[TileStore]:
        return app.state.store

    @app.get("/api/channels")
    def list_channels():
        s = store()
        if s is None:
            return JSONResponse({"detail": "store not loaded"}, status_code=503)
        panel = s.panel
        return {
            "channels": [
                {
                    "name": m,
                    "lambda": panel.af_params(m).lam,
                    "b": panel.af_params(m).b,
                }
                for m in panel.markers
            ],
            "af_channel": panel.af_channel,
            "tiles": sorted(s.records),
        }

    @app.get("/api/preview")
    def preview(
        tile: str,
        channel: str,
        lam: float = Query(0.0, alias="lambda"),
        b: float = 0.0,
        gamma: float = 1.0,
    ):
        s = store()
        if s is None:
            return JSONResponse({"detail": "store not loaded"}, status_code=503)
        if lam < 0:
            return JSONResponse({"detail": "lambda must be >= 0"}, status_code=422)
        pixels = s.mif_channel(tile, channel)
        if pixels is None:
            return JSONResponse({"detail": "unknown tile or channel"}, status_code=404)
        af = s.af_pixels(tile)
        if af is not None:
            corrected = af_subtract(
                ChannelImage(pixels), ChannelImage(af), AFParams(lam, b)
            ).pixels
        else:
            corrected = np.maximum(0.0, pixels + b)
        return Response(_png_bytes(display_window(corrected, gamma=gamma)), media_type="image/png")

    @app.get("/api/tile/{tile_id}/channel/{channel}")
    def raw_channel(tile_id: str, channel: str, gamma: float = 1.0):
        s = store()
        if s is None:
            return JSONResponse({"detail": "store not loaded"}, status_code=503)
        pixels = s.mif_channel(tile_id, channel)
        if pixels is None:
            return JSONResponse({"detail": "unknown tile or channel"}, status_code=404)
        return Response(_png_bytes(display_window(pixels, gamma=gamma)), media_type="image/png")

    @app.get("/api/tile/{tile_id}/he")
    def he_tile(tile_id: str):
        s = store()
        if s is None:
            return JSONResponse({"detail": "store not loaded"}, status_code=503)
        rec = s.records.get(tile_id)
        if rec is None:
            return JSONResponse({"detail": "unknown tile"}, status_code=404)
        return Response(_png_bytes(read_he_png(rec.he_path), mode="RGB"), media_type="image/png")

    @app.post("/api/params")
    def save_params(body: dict):
        s = store()
        if s is None:
            return JSONResponse({"detail": "store not loaded"}, status_code=503)
        channel = body.get("channel")
        lam = body.get("lambda")
        b = body.get("b")
        if (
            channel not in s.panel.markers
            or not isinstance(lam, (int, float))
            or not isinstance(b, (int, float))
            or lam < 0
        ):
            return JSONResponse({"detail": "invalid parameters"}, status_code=422)
        status = s.save_params(channel, float(lam), float(b))
        if status == 409:
            return JSONResponse({"detail": "panel changed concurrently"}, status_code=409)
        return {"channel": channel, "lambda": float(lam), "b": float(b)}

    resolved_static = static_dir or cfg.get("serve", {}).get("static_dir", "")
    if resolved_static and os.path.isdir(resolved_static):
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=resolved_static, html=True), name="ui")
    return app
