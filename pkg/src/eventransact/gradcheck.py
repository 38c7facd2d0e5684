"""Central finite-difference validation of the autograd gradients of the full
training objective (model forward composed with the combined loss)."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch

from .losses import LossConfig, total_loss
from .model import VTN, ModelConfig, forward

TINY_CONFIG = ModelConfig(
    image_size=32,
    patch_size=16,
    in_channels=2,
    embed_dim=8,
    spatial_depth=1,
    spatial_heads=2,
    temporal_layers=2,
    temporal_heads=2,
    attention_window=1,
    clip_len=4,
    num_classes=3,
    proj_hidden=8,
    proj_dim=4,
    mlp_ratio=2,
)


@dataclass
class GradcheckReport:
    max_rel_error: float
    per_block: dict[str, float]
    coords_checked: int
    seconds: float


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """``||a - f|| / max(||a||, ||f||, floor)`` over one parameter block.

    The floor sits above central-difference round-off (about eps * |L| / h),
    so a block whose true gradient is zero, such as the key bias under
    softmax, compares round-off against round-off instead of dividing by it.
    """
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / scale)


def finite_difference_check(
    config: ModelConfig = TINY_CONFIG,
    *,
    seed: int = 0,
    step: float = 1e-5,
    loss_config: LossConfig = LossConfig(),
    max_coords_per_block: int | None = None,
    param_jitter: float = 0.2,
) -> GradcheckReport:
    """Compare autograd against central differences on every parameter block.

    Runs in float64 with dropout disabled. Parameters get Gaussian jitter on
    top of the standard init so zero-initialised tokens and biases do not make
    the check degenerate. ``max_coords_per_block`` samples coordinates from
    large blocks; ``None`` checks every scalar.
    """
    if config.dropout:
        config = ModelConfig(**{**config.__dict__, "dropout": 0.0})
    gen = torch.Generator().manual_seed(seed)
    model = VTN(config, seed=seed).double()
    with torch.no_grad():
        for p in model.parameters():
            p.add_(param_jitter * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    shape = (config.clip_len, config.image_size, config.image_size, config.in_channels)
    v1 = torch.rand(shape, generator=gen, dtype=torch.float64)
    v2 = torch.rand(shape, generator=gen, dtype=torch.float64)
    label = int(torch.randint(config.num_classes, (1,), generator=gen))

    def loss():
        out = forward(model, v1, v2, mode="train")
        return total_loss(out["logits"], label, out["proj1"], out["proj2"], loss_config)["total"]

    start = time.perf_counter()
    model.zero_grad()
    loss().backward()
    rng = np.random.default_rng(seed)
    per_block, checked = {}, 0
    with torch.no_grad():
        for name, p in model.named_parameters():
            flat = p.data.view(-1)
            analytic = p.grad.detach().view(-1).numpy().copy()
            idx = np.arange(flat.numel())
            if max_coords_per_block is not None and idx.size > max_coords_per_block:
                idx = np.sort(rng.choice(idx, max_coords_per_block, replace=False))
            numeric = np.empty(idx.size)
            for j, i in enumerate(idx):
                orig = flat[i].item()
                flat[i] = orig + step
                f_plus = loss().item()
                flat[i] = orig - step
                f_minus = loss().item()
                flat[i] = orig
                numeric[j] = (f_plus - f_minus) / (2 * step)
            per_block[name] = relative_error(analytic[idx], numeric)
            checked += idx.size
    return GradcheckReport(
        max_rel_error=max(per_block.values()),
        per_block=per_block,
        coords_checked=checked,
        seconds=time.perf_counter() - start,
    )
