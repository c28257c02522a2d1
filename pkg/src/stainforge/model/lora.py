"""Low-rank adapters for the encoder's attention Query/Value projections."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .vit import SelfAttention


class LoRAError(RuntimeError):
    pass


@dataclass
class LoRAConfig:
    rank: int = 8
    alpha: float = 1.0

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError(f"rank must be >= 1, got {self.rank}")


class LoRALinear(nn.Module):
    """W x + (alpha/rank) * B A x with A ~ N(0, 0.02^2) and B = 0, so the
    adapted map equals the frozen base map at initialization."""

    def __init__(self, base: nn.Linear, config: LoRAConfig, generator=None):
        super().__init__()
        self.base = base
        self.scaling = config.alpha / config.rank
        self.lora_a = nn.Parameter(torch.empty(config.rank, base.in_features))
        self.lora_b = nn.Parameter(torch.zeros(base.out_features, config.rank))
        with torch.no_grad():
            self.lora_a.normal_(0.0, 0.02, generator=generator)

    def forward(self, x):
        return self.base(x) + self.scaling * F.linear(F.linear(x, self.lora_a), self.lora_b)


def apply_lora(model, config: LoRAConfig, seed: int = 0):
    """Attach adapters to every attention Q and V projection in the encoder,
    freezing all base encoder weights. Raises on double application."""
    g = torch.Generator().manual_seed(seed)
    attentions = [m for m in model.vit.modules() if isinstance(m, SelfAttention)]
    if not attentions:
        raise LoRAError("model has no attention layers to adapt")
    for attn in attentions:
        if isinstance(attn.q, LoRALinear) or isinstance(attn.v, LoRALinear):
            raise LoRAError("LoRA adapters already applied")
    for p in model.vit.parameters():
        p.requires_grad_(False)
    for attn in attentions:
        attn.q = LoRALinear(attn.q, config, generator=g)
        attn.v = LoRALinear(attn.v, config, generator=g)
        attn.q.lora_a.requires_grad_(True)
        attn.q.lora_b.requires_grad_(True)
        attn.v.lora_a.requires_grad_(True)
        attn.v.lora_b.requires_grad_(True)
    return model


def lora_parameter_count(model) -> int:
    """Trainable adapter parameters: rank * (d_in + d_out) per adapted layer."""
    total = 0
    for m in model.modules():
        if isinstance(m, LoRALinear):
            total += m.lora_a.numel() + m.lora_b.numel()
    return total
