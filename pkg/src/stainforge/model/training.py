"""Deterministic training loop, learning-rate schedule and gradient checks."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np
import torch

from .augment import augment_pair
from .losses import LossConfig, scale_targets, weighted_mse_parts


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 2e-4
    warmup_iters: int = 400
    weight_decay: float = 1e-5
    grad_clip_norm: float = 1.0
    dropout: float = 0.1
    batch_size: int = 16
    seed: int = 0
    epochs: int = 1
    augment: bool = True
    val_every: int = 50

    def __post_init__(self):
        for name in ("lr", "grad_clip_norm", "batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0 or self.warmup_iters < 0 or self.weight_decay < 0:
            raise ValueError("negative training parameter")


def lr_at(step: int, total_steps: int, config: TrainConfig) -> float:
    """Linear warmup over the first iterations, constant through the first
    half of training, then linear decay to zero."""
    if total_steps <= 0:
        return 0.0
    warm = min(1.0, step / config.warmup_iters) if config.warmup_iters > 0 else 1.0
    half = total_steps // 2
    if step <= half:
        decay = 1.0
    else:
        decay = (total_steps - step) / (total_steps - half)
    return config.lr * warm * max(0.0, decay)


@dataclass
class TrainResult:
    loss_curve: List[dict] = field(default_factory=list)
    val_curve: List[dict] = field(default_factory=list)
    total_steps: int = 0
    optimizer: Optional[torch.optim.Optimizer] = None


def train(
    model: torch.nn.Module,
    he: np.ndarray,
    mif_norm: np.ndarray,
    train_config: TrainConfig,
    loss_config: LossConfig,
    val: Optional[Callable[[torch.nn.Module, int], dict]] = None,
    start_epoch: int = 0,
    optimizer_state: Optional[dict] = None,
) -> TrainResult:
    """Train the translator on in-memory tiles.

    ``he`` is (N, 3, H, W) in [0, 255]; ``mif_norm`` is (N, M, H, W) in
    normalized [0, 255] space. Targets are scaled to [-0.9, 0.9] internally.
    Aborts on a NaN loss. Bit-reproducible for a fixed seed in
    single-threaded mode. Sample order and augmentation parameters are
    derived from (seed, epoch) and (seed, step), so resuming from an epoch
    boundary with the saved optimizer state continues the uninterrupted run
    exactly.
    """
    n = he.shape[0]
    if n == 0:
        raise TrainingError("empty training split")
    torch.manual_seed(train_config.seed)

    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(
        params, lr=train_config.lr, weight_decay=train_config.weight_decay
    )
    if optimizer_state is not None:
        opt.load_state_dict(optimizer_state)
    steps_per_epoch = math.ceil(n / train_config.batch_size)
    total_steps = steps_per_epoch * train_config.epochs
    result = TrainResult(total_steps=total_steps)
    result.optimizer = opt

    model.train()
    step = start_epoch * steps_per_epoch
    for epoch in range(start_epoch, train_config.epochs):
        perm = np.random.default_rng([train_config.seed, epoch]).permutation(n)
        for start in range(0, n, train_config.batch_size):
            step += 1
            idx = perm[start : start + train_config.batch_size]
            xs, ys = [], []
            for j, i in enumerate(idx):
                h_i, m_i = he[i].astype(np.float32), mif_norm[i].astype(np.float32)
                if train_config.augment:
                    h_i, m_i = augment_pair(
                        h_i, m_i, seed=train_config.seed * 1_000_003 + step * 1009 + j
                    )
                xs.append(h_i / 127.5 - 1.0)
                ys.append(scale_targets(m_i))
            x = torch.from_numpy(np.stack(xs))
            y = torch.from_numpy(np.stack(ys))

            lr = lr_at(step, total_steps, train_config)
            for group in opt.param_groups:
                group["lr"] = lr
            opt.zero_grad()
            pred = model(x)
            loss, per_marker = weighted_mse_parts(pred, y, loss_config)
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss {loss.item()} at step {step} (lr={lr:.3g})"
                )
            loss.backward()
            torch.nn.utils.clip_grad_norm_(params, train_config.grad_clip_norm)
            opt.step()

            result.loss_curve.append(
                {
                    "step": step,
                    "lr": lr,
                    "loss": float(loss.item()),
                    "per_marker_mse": [float(v) for v in per_marker.detach().numpy()],
                }
            )
            if val is not None and step % train_config.val_every == 0:
                model.eval()
                result.val_curve.append({"step": step, **val(model, step)})
                model.train()
    model.eval()
    return result


def state_to_numpy(model: torch.nn.Module) -> Dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}


def load_state_from_numpy(model: torch.nn.Module, tensors: Dict[str, np.ndarray]):
    state = {k: torch.from_numpy(np.asarray(v)) for k, v in tensors.items()}
    current = model.state_dict()
    cast = {k: v.to(current[k].dtype) for k, v in state.items()}
    model.load_state_dict(cast)


def check_gradients(
    model: torch.nn.Module,
    loss_fn: Callable[[], torch.Tensor],
    n_samples: int = 200,
    h: float = 1e-5,
    seed: int = 0,
) -> dict:
    """Compare analytic gradients against central finite differences on
    randomly sampled parameters. The model should be in double precision
    with dropout disabled."""
    params = [p for p in model.parameters() if p.requires_grad]
    for p in params:
        if p.grad is not None:
            p.grad = None
    loss = loss_fn()
    loss.backward()
    grads = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for p in params]

    sizes = np.array([p.numel() for p in params])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    flat_idx = rng.choice(total, size=min(n_samples, total), replace=False)
    bounds = np.cumsum(sizes)

    max_rel = 0.0
    worst = None
    with torch.no_grad():
        for fi in flat_idx:
            pi = int(np.searchsorted(bounds, fi, side="right"))
            local = int(fi - (bounds[pi - 1] if pi > 0 else 0))
            p = params[pi]
            flat = p.view(-1)
            orig = flat[local].item()
            flat[local] = orig + h
            lp = loss_fn().item()
            flat[local] = orig - h
            lm = loss_fn().item()
            flat[local] = orig
            fd = (lp - lm) / (2.0 * h)
            an = grads[pi].view(-1)[local].item()
            rel = abs(fd - an) / max(abs(fd), abs(an), 1e-8)
            if rel > max_rel:
                max_rel = rel
                worst = {"param": pi, "index": local, "analytic": an, "fd": fd}
    return {"max_rel_error": max_rel, "n_checked": len(flat_idx), "worst": worst}
