"""H&E -> mIF translator: ViT bottleneck + convolutional detail pyramid +
U-Net-style decoder with per-marker Tanh heads."""

from __future__ import annotations

from typing import Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .vit import ViTConfig, ViTEncoder


class DetailCapture(nn.Module):
    """Lightweight conv pyramid producing skip features at strides 2, 4, 8."""

    def __init__(self, channels: Sequence[int] = (16, 32, 64)):
        super().__init__()
        self.channels = tuple(channels)
        stages = []
        c_in = 3
        for c_out in self.channels:
            stages.append(
                nn.Sequential(
                    nn.Conv2d(c_in, c_out, 3, stride=2, padding=1),
                    nn.BatchNorm2d(c_out),
                    nn.ReLU(inplace=True),
                )
            )
            c_in = c_out
        self.stages = nn.ModuleList(stages)

    def forward(self, x):
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats  # strides 2, 4, 8


class DecoderStage(nn.Module):
    """Bilinear x2 upsample, optional skip concat, 3x3 conv + BN + ReLU."""

    def __init__(self, c_in: int, c_skip: int, c_out: int):
        super().__init__()
        self.conv = nn.Conv2d(c_in + c_skip, c_out, 3, padding=1)
        self.bn = nn.BatchNorm2d(c_out)

    def forward(self, x, skip=None):
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        if skip is not None:
            if skip.shape[-2:] != x.shape[-2:]:
                raise ValueError(f"skip {tuple(skip.shape)} does not match {tuple(x.shape)}")
            x = torch.cat([x, skip], dim=1)
        return F.relu(self.bn(self.conv(x)), inplace=True)


class Translator(nn.Module):
    def __init__(
        self,
        n_markers: int,
        vit_config: Optional[ViTConfig] = None,
        detail_channels: Sequence[int] = (16, 32, 64),
        decoder_channels: Sequence[int] = (128, 64, 32, 16),
    ):
        super().__init__()
        self.vit_config = vit_config or ViTConfig()
        self.n_markers = n_markers
        self.vit = ViTEncoder(self.vit_config)
        self.detail = DetailCapture(detail_channels)
        d2, d4, d8 = self.detail.channels
        c0, c1, c2, c3 = decoder_channels
        self.decoder = nn.ModuleList(
            [
                DecoderStage(self.vit_config.width, d8, c0),  # H/16 -> H/8
                DecoderStage(c0, d4, c1),                     # H/8 -> H/4
                DecoderStage(c1, d2, c2),                     # H/4 -> H/2
                DecoderStage(c2, 0, c3),                      # H/2 -> H, no skip
            ]
        )
        self.heads = nn.ModuleList(nn.Conv2d(c3, 1, 1) for _ in range(n_markers))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) -> (B, M, H, W), outputs in (-1, 1)."""
        bottleneck = self.vit(x)
        f2, f4, f8 = self.detail(x)
        y = self.decoder[0](bottleneck, f8)
        y = self.decoder[1](y, f4)
        y = self.decoder[2](y, f2)
        y = self.decoder[3](y)
        out = torch.cat([head(y) for head in self.heads], dim=1)
        return torch.tanh(out)


def init_weights(model: nn.Module, gain: float = 0.02, seed: int = 0):
    """Normal(0, gain^2) weights and zero biases; batch-norm scales are drawn
    around 1 so normalization starts near identity."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, (nn.Conv2d, nn.Linear)):
                module.weight.normal_(0.0, gain, generator=g)
                if module.bias is not None:
                    module.bias.zero_()
            elif isinstance(module, (nn.BatchNorm2d, nn.LayerNorm)):
                module.weight.normal_(1.0, gain, generator=g)
                module.bias.zero_()
            elif isinstance(module, ViTEncoder):
                module.pos_embed.normal_(0.0, gain, generator=g)


def he_to_input(he_rgb: np.ndarray) -> torch.Tensor:
    """uint8 (H, W, 3) or (3, H, W) -> float tensor in [-1, 1], shape (3, H, W)."""
    arr = np.asarray(he_rgb, dtype=np.float32)
    if arr.ndim == 3 and arr.shape[2] == 3:
        arr = arr.transpose(2, 0, 1)
    return torch.from_numpy(arr / 127.5 - 1.0)


def predict_tile(
    model: Translator,
    he_rgb: np.ndarray,
    target_scale: float = 0.9,
) -> np.ndarray:
    """Predict one tile in normalized intensity space [0, 255].

    Head outputs t in (-1, 1) are mapped by the inverse target scaling
    t -> 255 * (t/target_scale + 1) / 2 and clipped to [0, 255].
    """
    model.eval()
    with torch.no_grad():
        x = he_to_input(he_rgb).unsqueeze(0).to(next(model.parameters()).dtype)
        t = model(x)[0].cpu().numpy()
    out = 255.0 * (t / target_scale + 1.0) / 2.0
    return np.clip(out, 0.0, 255.0)
