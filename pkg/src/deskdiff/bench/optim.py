"""Optimizer and EMA plumbing shared by every training command."""
from __future__ import annotations

import hashlib

import numpy as np
import torch

LR_ANCHOR = 5e-5
LR_ANCHOR_BATCH = 1024
LR_FLOOR = 1e-5


def scaled_lr(batch_size: int, lr: float | None = None) -> float:
    """Linear-in-batch learning rate from the 5e-5@1024 anchor, floored at 1e-5.
    An explicit lr wins."""
    if lr is not None:
        return lr
    return max(LR_FLOOR, LR_ANCHOR * batch_size / LR_ANCHOR_BATCH)


def build_adamw(params, lr: float, weight_decay: float = 0.01, betas=(0.9, 0.999)) -> torch.optim.AdamW:
    return torch.optim.AdamW(params, lr=lr, weight_decay=weight_decay, betas=betas)


class EmaTracker:
    """Exponential moving average of named parameters."""

    def __init__(self, model: torch.nn.Module, decay: float = 0.999):
        self.decay = decay
        self.shadow = {n: p.detach().clone() for n, p in model.named_parameters() if p.requires_grad}

    @torch.no_grad()
    def update(self, model: torch.nn.Module) -> None:
        for n, p in model.named_parameters():
            if n in self.shadow:
                self.shadow[n].mul_(self.decay).add_(p.detach(), alpha=1.0 - self.decay)

    def tensors(self, prefix: str = "ema.") -> dict:
        return {prefix + n: v for n, v in self.shadow.items()}

    def load_tensors(self, tensors: dict, prefix: str = "ema.") -> None:
        for n in self.shadow:
            self.shadow[n] = torch.from_numpy(np.array(tensors[prefix + n]))

    @torch.no_grad()
    def copy_to(self, model: torch.nn.Module) -> None:
        for n, p in model.named_parameters():
            if n in self.shadow:
                p.copy_(self.shadow[n])


def weights_hash(model: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4").tobytes())
    return h.hexdigest()


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
